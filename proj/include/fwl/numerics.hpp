#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fwl/errors.hpp"

namespace fwl {

#ifdef FWL_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Vector = std::vector<Real>;

// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0));
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<Real>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<Real> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<Real> flat() noexcept { return data_; }
  std::span<const Real> flat() const noexcept { return data_; }
  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }

  void fill(Real v);
  Matrix transposed() const;
  // Rows [begin, end) as a new matrix.
  Matrix slice_rows(std::size_t begin, std::size_t end) const;

  std::string shape_string() const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

// ---------------------------------------------------------------------------
// Matrix products. The default entry points are blocked and OpenMP-parallel
// over output rows; every output element is accumulated in ascending inner
// index order, so results do not depend on the thread count.

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// c += a^T * b
void add_matmul_tn(Matrix& c, const Matrix& a, const Matrix& b);
// c += a * b
void add_matmul(Matrix& c, const Matrix& a, const Matrix& b);

// Plain triple loop kept as the serial reference for tests and benchmarks.
Matrix matmul_reference(const Matrix& a, const Matrix& b);

// ---------------------------------------------------------------------------
// Element-wise helpers.

void axpy(Real alpha, std::span<const Real> x, std::span<Real> y);
Real dot(std::span<const Real> x, std::span<const Real> y);
void add_inplace(Matrix& y, const Matrix& x);
void scale_inplace(Matrix& y, Real s);
void add_row_broadcast(Matrix& y, std::span<const Real> row);
// Column sums, accumulated in ascending row order.
Vector column_sums(const Matrix& m);
Real max_abs_diff(std::span<const Real> a, std::span<const Real> b);
bool all_finite(std::span<const Real> x);

// ---------------------------------------------------------------------------
// Activation, normalization and loss primitives.

struct Relu2Result {
  Vector y;
  Vector mask;  // dy/dx = 2 max(x, 0)
};
Relu2Result relu2(std::span<const Real> x);

inline constexpr Real kLayerNormEps = Real(1e-5);

struct LayerNormCache {
  Vector xhat;
  Vector gain;
  Real mean = 0;
  Real inv_std = 0;
};

struct LayerNormResult {
  Vector y;
  LayerNormCache cache;
};

LayerNormResult layernorm_fwd(std::span<const Real> x, std::span<const Real> gain,
                              std::span<const Real> bias, Real eps = kLayerNormEps);

struct LayerNormGrads {
  Vector dx;
  Vector dgain;
  Vector dbias;
};
LayerNormGrads layernorm_bwd(const LayerNormCache& cache, std::span<const Real> dy);

// Row-level kernels shared by the batched code paths. `xhat` receives the
// normalized input; the return value is 1/sqrt(var + eps).
Real layernorm_row(std::span<const Real> x, std::span<Real> xhat, Real eps = kLayerNormEps);
// dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
void layernorm_row_bwd(std::span<const Real> xhat, Real inv_std, std::span<const Real> dxhat,
                       std::span<Real> dx);

struct SoftmaxXent {
  Real loss = 0;
  Vector dlogits;
};
SoftmaxXent softmax_xent(std::span<const Real> logits, std::size_t target);

// Numerically stable in-place softmax of one row; returns log-sum-exp.
Real softmax_row(std::span<const Real> logits, std::span<Real> probs);

// Row t of the result is the sum of rows i < t of g.
Matrix exclusive_cumsum_rows(const Matrix& g);
// Row t of the result is the sum of rows i > t of g (adjoint of the above).
Matrix reverse_exclusive_cumsum_rows(const Matrix& g);

Vector finite_diff_grad(const std::function<Real(std::span<const Real>)>& f,
                        std::span<const Real> x, Real eps);

// GELU with the exact erf form.
Real gelu(Real x);
Real gelu_grad(Real x);

// ---------------------------------------------------------------------------
// Deterministic random numbers. Distributions are implemented here rather
// than through <random> so streams are identical across standard libraries.

class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, Real scale);
Vector random_vector(std::size_t n, Rng& rng, Real scale);

}  // namespace fwl
