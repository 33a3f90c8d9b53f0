#include "fwl/linear_attention.hpp"

#include <algorithm>

namespace fwl {

namespace {

void check_shapes(const Matrix& q, const Matrix& k, const Matrix& v,
                  const std::optional<KVState>& init) {
  if (q.cols() != k.cols())
    throw ShapeError("linear attention: query " + q.shape_string() + " and key " +
                     k.shape_string() + " widths differ");
  if (k.rows() != v.rows() || q.rows() != k.rows())
    throw ShapeError("linear attention: query " + q.shape_string() + ", key " + k.shape_string() +
                     ", value " + v.shape_string() + " lengths differ");
  if (init && (init->accumulator.rows() != k.cols() || init->accumulator.cols() != v.cols()))
    throw ShapeError("linear attention: initial state " + init->accumulator.shape_string() +
                     " does not match key/value widths");
}

// state += k_i^T v_i for rows [begin, end), ascending.
void accumulate_state(Matrix& state, const Matrix& k, const Matrix& v, std::size_t begin,
                      std::size_t end) {
  const std::size_t dk = k.cols(), dv = v.cols();
  for (std::size_t i = begin; i < end; ++i) {
    auto ki = k.row(i);
    auto vi = v.row(i);
    for (std::size_t a = 0; a < dk; ++a) {
      const Real ka = ki[a];
      Real* srow = state.data() + a * dv;
      for (std::size_t b = 0; b < dv; ++b) srow[b] += ka * vi[b];
    }
  }
}

// out_t += q_t * state for rows [begin, end).
void query_state(Matrix& out, const Matrix& q, const Matrix& state, std::size_t begin,
                 std::size_t end) {
  const std::size_t dk = q.cols(), dv = state.cols();
  for (std::size_t t = begin; t < end; ++t) {
    auto qt = q.row(t);
    auto ot = out.row(t);
    for (std::size_t a = 0; a < dk; ++a) {
      const Real qa = qt[a];
      const Real* srow = state.data() + a * dv;
      for (std::size_t b = 0; b < dv; ++b) ot[b] += qa * srow[b];
    }
  }
}

// out_t += sum_{begin <= i < t} (q_t . k_i) v_i for t in [begin, end).
void masked_block(Matrix& out, const Matrix& q, const Matrix& k, const Matrix& v,
                  std::size_t begin, std::size_t end) {
  for (std::size_t t = begin; t < end; ++t) {
    auto qt = q.row(t);
    auto ot = out.row(t);
    for (std::size_t i = begin; i < t; ++i) {
      const Real s = dot(qt, k.row(i));
      axpy(s, v.row(i), ot);
    }
  }
}

std::uint64_t masked_block_flops(std::size_t n, std::size_t dk, std::size_t dv) {
  return static_cast<std::uint64_t>(n) * (n - (n > 0 ? 1 : 0)) / 2 * (2 * dk + 2 * dv);
}

}  // namespace

std::uint64_t quadratic_attention_flops(std::size_t t, std::size_t dk, std::size_t dv, bool init) {
  std::uint64_t f = masked_block_flops(t, dk, dv) + 2ull * t * dk * dv;
  if (init) f += 2ull * t * dk * dv + static_cast<std::uint64_t>(dk) * dv;
  return f;
}

std::uint64_t chunked_attention_flops(std::size_t t, std::size_t chunk, std::size_t dk,
                                      std::size_t dv, bool init) {
  if (chunk >= t) return quadratic_attention_flops(t, dk, dv, init);
  std::uint64_t f = 0;
  for (std::size_t begin = 0, c = 0; begin < t; begin += chunk, ++c) {
    const std::size_t n = std::min(chunk, t - begin);
    f += masked_block_flops(n, dk, dv) + 2ull * n * dk * dv;
    if (c > 0 || init) f += 2ull * n * dk * dv;
  }
  const std::size_t chunks = (t + chunk - 1) / chunk;
  f += static_cast<std::uint64_t>(chunks - 1 + (init ? 1 : 0)) * dk * dv;
  return f;
}

AttentionResult causal_linear_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                        const std::optional<KVState>& init, KernelStats* stats) {
  check_shapes(q, k, v, init);
  const std::size_t t = q.rows();
  AttentionResult r{Matrix(t, v.cols()), KVState{Matrix(k.cols(), v.cols())}};
  if (init) {
    query_state(r.output, q, init->accumulator, 0, t);
    r.final_state.accumulator = init->accumulator;
  }
  masked_block(r.output, q, k, v, 0, t);
  accumulate_state(r.final_state.accumulator, k, v, 0, t);
  if (stats) stats->flops += quadratic_attention_flops(t, k.cols(), v.cols(), init.has_value());
  return r;
}

AttentionResult chunked_causal_linear_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                                std::size_t chunk_size,
                                                const std::optional<KVState>& init,
                                                KernelStats* stats) {
  if (chunk_size == 0) throw ConfigError("chunked linear attention: chunk_size must be >= 1");
  check_shapes(q, k, v, init);
  const std::size_t t = q.rows();
  if (chunk_size >= t) return causal_linear_attention(q, k, v, init, stats);

  const std::size_t dk = k.cols(), dv = v.cols();
  const std::size_t n_chunks = (t + chunk_size - 1) / chunk_size;
  AttentionResult r{Matrix(t, dv), KVState{Matrix(dk, dv)}};

  // Per-chunk key-value sums.
  std::vector<Matrix> local(n_chunks, Matrix(dk, dv));
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sc = 0; sc < static_cast<std::ptrdiff_t>(n_chunks); ++sc) {
    const auto c = static_cast<std::size_t>(sc);
    const std::size_t begin = c * chunk_size, end = std::min(t, begin + chunk_size);
    accumulate_state(local[c], k, v, begin, end);
  }

  // Exclusive prefix over chunks: prefix[c] = init + sum_{c' < c} local[c'].
  std::vector<Matrix> prefix(n_chunks);
  prefix[0] = init ? init->accumulator : Matrix(dk, dv);
  for (std::size_t c = 1; c < n_chunks; ++c) {
    prefix[c] = prefix[c - 1];
    add_inplace(prefix[c], local[c - 1]);
  }
  r.final_state.accumulator = prefix[n_chunks - 1];
  add_inplace(r.final_state.accumulator, local[n_chunks - 1]);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sc = 0; sc < static_cast<std::ptrdiff_t>(n_chunks); ++sc) {
    const auto c = static_cast<std::size_t>(sc);
    const std::size_t begin = c * chunk_size, end = std::min(t, begin + chunk_size);
    if (c > 0 || init) query_state(r.output, q, prefix[c], begin, end);
    masked_block(r.output, q, k, v, begin, end);
  }

  if (stats) stats->flops += chunked_attention_flops(t, chunk_size, dk, dv, init.has_value());
  return r;
}

Matrix reverse_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto src = m.row(m.rows() - 1 - i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

AttentionGrads causal_linear_attention_backward(const Matrix& q, const Matrix& k,
                                                const Matrix& v,
                                                const std::optional<KVState>& init,
                                                const Matrix& dout, std::size_t chunk_size) {
  check_shapes(q, k, v, init);
  if (dout.rows() != q.rows() || dout.cols() != v.cols())
    throw ShapeError("linear attention backward: upstream " + dout.shape_string() +
                     " does not match output shape");
  AttentionGrads g;
  // dq_t = sum_{i<t} (dout_t . v_i) k_i + dout_t init^T
  std::optional<KVState> init_t;
  if (init) init_t = KVState{init->accumulator.transposed()};
  g.dq = chunked_causal_linear_attention(dout, v, k, chunk_size, init_t).output;

  // dv_i = sum_{t>i} (k_i . q_t) dout_t and dk_i = sum_{t>i} (v_i . dout_t) q_t
  const Matrix qr = reverse_rows(q), kr = reverse_rows(k), vr = reverse_rows(v),
               dr = reverse_rows(dout);
  g.dv = reverse_rows(chunked_causal_linear_attention(kr, qr, dr, chunk_size).output);
  g.dk = reverse_rows(chunked_causal_linear_attention(vr, dr, qr, chunk_size).output);

  if (init) g.dinit = matmul_tn(q, dout);
  return g;
}

}  // namespace fwl
