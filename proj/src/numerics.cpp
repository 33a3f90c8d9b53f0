#include "fwl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace fwl {

Matrix::Matrix(std::size_t rows, std::size_t cols, Real fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<Real> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1;
  return m;
}

void Matrix::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) throw ShapeError("row slice out of range for " + shape_string());
  Matrix out(end - begin, cols_);
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
            data_.begin() + static_cast<std::ptrdiff_t>(end * cols_), out.data_.begin());
  return out;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << "[" << rows_ << "x" << cols_ << "]";
  return os.str();
}

namespace {

void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                     b.shape_string());
  }
}

constexpr std::size_t kParallelWork = 1u << 15;

// c[i, :] += sum_k a[i, k] * b[k, :], k ascending. Rows go in groups of four
// so each row of b is loaded once per group.
void gemm_nn_accumulate(Matrix& c, const Matrix& a, const Matrix& b) {
  const std::size_t m = a.rows(), n = b.cols(), kk = a.cols();
  const Real* ap = a.data();
  const Real* bp = b.data();
  Real* cp = c.data();
  const std::size_t groups = (m + 3) / 4;
  const bool parallel = m * n * kk >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t sg = 0; sg < static_cast<std::ptrdiff_t>(groups); ++sg) {
    const std::size_t i0 = static_cast<std::size_t>(sg) * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    if (rows < 4) {
      for (std::size_t i = i0; i < i0 + rows; ++i) {
        Real* crow = cp + i * n;
        for (std::size_t k = 0; k < kk; ++k) {
          const Real aik = ap[i * kk + k];
          const Real* brow = bp + k * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
      }
      continue;
    }
    Real* c0 = cp + i0 * n;
    Real* c1 = c0 + n;
    Real* c2 = c1 + n;
    Real* c3 = c2 + n;
    for (std::size_t k = 0; k < kk; ++k) {
      const Real a0 = ap[i0 * kk + k], a1 = ap[(i0 + 1) * kk + k], a2 = ap[(i0 + 2) * kk + k],
                 a3 = ap[(i0 + 3) * kk + k];
      const Real* brow = bp + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        const Real bj = brow[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Matrix c(a.rows(), b.cols());
  gemm_nn_accumulate(c, a, b);
  return c;
}

void add_matmul(Matrix& c, const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  if (c.rows() != a.rows() || c.cols() != b.cols())
    throw ShapeError("matmul: accumulator " + c.shape_string() + " does not match product");
  gemm_nn_accumulate(c, a, b);
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt", a, b);
  // Same ascending-k order per element as a dot product, but vectorizable.
  Matrix c(a.rows(), b.rows());
  gemm_nn_accumulate(c, a, b.transposed());
  return c;
}

void add_matmul_tn(Matrix& c, const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn", a, b);
  const std::size_t m = a.cols(), n = b.cols(), rows = a.rows();
  if (c.rows() != m || c.cols() != n)
    throw ShapeError("matmul_tn: accumulator " + c.shape_string() + " does not match product");
  const bool parallel = m * n * rows >= kParallelWork;
  // Output row i of c gathers column i of a; rows of a/b are visited in
  // ascending order for every output element. Output rows go in groups of four.
  const std::size_t groups = (m + 3) / 4;
  const Real* ap = a.data();
  const Real* bp = b.data();
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t sg = 0; sg < static_cast<std::ptrdiff_t>(groups); ++sg) {
    const std::size_t i0 = static_cast<std::size_t>(sg) * 4;
    const std::size_t width = std::min<std::size_t>(4, m - i0);
    if (width < 4) {
      for (std::size_t i = i0; i < i0 + width; ++i) {
        Real* crow = c.data() + i * n;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real ari = ap[r * m + i];
          const Real* brow = bp + r * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += ari * brow[j];
        }
      }
      continue;
    }
    Real* c0 = c.data() + i0 * n;
    Real* c1 = c0 + n;
    Real* c2 = c1 + n;
    Real* c3 = c2 + n;
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* arow = ap + r * m + i0;
      const Real a0 = arow[0], a1 = arow[1], a2 = arow[2], a3 = arow[3];
      const Real* brow = bp + r * n;
      for (std::size_t j = 0; j < n; ++j) {
        const Real bj = brow[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix c(a.cols(), b.cols());
  add_matmul_tn(c, a, b);
  return c;
}

Matrix matmul_reference(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      Real s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

void axpy(Real alpha, std::span<const Real> x, std::span<Real> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Real dot(std::span<const Real> x, std::span<const Real> y) {
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

void add_inplace(Matrix& y, const Matrix& x) {
  if (y.rows() != x.rows() || y.cols() != x.cols())
    throw ShapeError("add: " + y.shape_string() + " vs " + x.shape_string());
  auto yd = y.flat();
  auto xd = x.flat();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += xd[i];
}

void scale_inplace(Matrix& y, Real s) {
  for (auto& v : y.flat()) v *= s;
}

void add_row_broadcast(Matrix& y, std::span<const Real> row) {
  if (row.size() != y.cols()) throw ShapeError("row broadcast width mismatch");
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += row[j];
  }
}

Vector column_sums(const Matrix& m) {
  Vector s(m.cols(), Real(0));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) s[j] += r[j];
  }
  return s;
}

Real max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(std::span<const Real> x) {
  return std::all_of(x.begin(), x.end(), [](Real v) { return std::isfinite(v); });
}

Relu2Result relu2(std::span<const Real> x) {
  Relu2Result r{Vector(x.size()), Vector(x.size())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real p = x[i] > 0 ? x[i] : Real(0);
    r.y[i] = p * p;
    r.mask[i] = 2 * p;
  }
  return r;
}

Real layernorm_row(std::span<const Real> x, std::span<Real> xhat, Real eps) {
  const auto n = static_cast<Real>(x.size());
  Real mean = 0;
  for (Real v : x) mean += v;
  mean /= n;
  Real var = 0;
  for (Real v : x) var += (v - mean) * (v - mean);
  var /= n;
  const Real inv_std = Real(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) xhat[i] = (x[i] - mean) * inv_std;
  return inv_std;
}

void layernorm_row_bwd(std::span<const Real> xhat, Real inv_std, std::span<const Real> dxhat,
                       std::span<Real> dx) {
  const auto n = static_cast<Real>(xhat.size());
  Real m1 = 0, m2 = 0;
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    m1 += dxhat[i];
    m2 += dxhat[i] * xhat[i];
  }
  m1 /= n;
  m2 /= n;
  for (std::size_t i = 0; i < xhat.size(); ++i) dx[i] = inv_std * (dxhat[i] - m1 - xhat[i] * m2);
}

LayerNormResult layernorm_fwd(std::span<const Real> x, std::span<const Real> gain,
                              std::span<const Real> bias, Real eps) {
  if (gain.size() != x.size() || bias.size() != x.size())
    throw ShapeError("layernorm: gain/bias length does not match input");
  LayerNormResult r;
  r.cache.xhat.resize(x.size());
  r.cache.gain.assign(gain.begin(), gain.end());
  r.cache.inv_std = layernorm_row(x, r.cache.xhat, eps);
  Real mean = 0;
  for (Real v : x) mean += v;
  r.cache.mean = mean / static_cast<Real>(x.size());
  r.y.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r.y[i] = gain[i] * r.cache.xhat[i] + bias[i];
  return r;
}

LayerNormGrads layernorm_bwd(const LayerNormCache& cache, std::span<const Real> dy) {
  const std::size_t n = cache.xhat.size();
  if (dy.size() != n) throw ShapeError("layernorm_bwd: gradient length mismatch");
  LayerNormGrads g{Vector(n), Vector(n), Vector(dy.begin(), dy.end())};
  Vector dxhat(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.dgain[i] = dy[i] * cache.xhat[i];
    dxhat[i] = dy[i] * cache.gain[i];
  }
  layernorm_row_bwd(cache.xhat, cache.inv_std, dxhat, g.dx);
  return g;
}

Real softmax_row(std::span<const Real> logits, std::span<Real> probs) {
  Real mx = logits[0];
  for (Real v : logits) mx = std::max(mx, v);
  Real sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  const Real inv = Real(1) / sum;
  for (auto& p : probs) p *= inv;
  return mx + std::log(sum);
}

SoftmaxXent softmax_xent(std::span<const Real> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw IndexError("softmax_xent: target " + std::to_string(target) + " out of range for " +
                     std::to_string(logits.size()) + " logits");
  }
  SoftmaxXent r{0, Vector(logits.size())};
  const Real lse = softmax_row(logits, r.dlogits);
  r.loss = lse - logits[target];
  r.dlogits[target] -= 1;
  return r;
}

Matrix exclusive_cumsum_rows(const Matrix& g) {
  Matrix out(g.rows(), g.cols());
  for (std::size_t t = 1; t < g.rows(); ++t) {
    auto prev = out.row(t - 1);
    auto src = g.row(t - 1);
    auto dst = out.row(t);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = prev[j] + src[j];
  }
  return out;
}

Matrix reverse_exclusive_cumsum_rows(const Matrix& g) {
  Matrix out(g.rows(), g.cols());
  for (std::size_t t = g.rows(); t-- > 1;) {
    auto next = out.row(t);
    auto src = g.row(t);
    auto dst = out.row(t - 1);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = next[j] + src[j];
  }
  return out;
}

Vector finite_diff_grad(const std::function<Real(std::span<const Real>)>& f,
                        std::span<const Real> x, Real eps) {
  Vector probe(x.begin(), x.end());
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + eps;
    const Real fp = f(probe);
    probe[i] = orig - eps;
    const Real fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

Real gelu(Real x) { return Real(0.5) * x * (Real(1) + std::erf(x * std::numbers::sqrt2_v<Real> / 2)); }

Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * std::numbers::sqrt2_v<Real> / 2));
  const Real pdf = std::exp(Real(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Real> /
                   std::numbers::sqrt2_v<Real>;
  return cdf + x * pdf;
}

// splitmix64
Rng::Rng(std::uint64_t seed) : state_(seed) {}

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ConfigError("Rng::below: empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, Real scale) {
  Matrix m(rows, cols);
  for (auto& v : m.flat()) v = static_cast<Real>(rng.normal()) * scale;
  return m;
}

Vector random_vector(std::size_t n, Rng& rng, Real scale) {
  Vector v(n);
  for (auto& x : v) x = static_cast<Real>(rng.normal()) * scale;
  return v;
}

}  // namespace fwl
