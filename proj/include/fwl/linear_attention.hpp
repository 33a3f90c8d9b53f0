#pragma once

#include <cstdint>
#include <optional>

#include "fwl/numerics.hpp"

namespace fwl {

// Running key-value outer-product sum: sum_i k_i^T v_i over consumed positions.
struct KVState {
  Matrix accumulator;  // key_dim x value_dim
};

struct AttentionResult {
  Matrix output;
  KVState final_state;
};

// Multiply-add work actually performed by a kernel call (2 flops per FMA).
struct KernelStats {
  std::uint64_t flops = 0;
};

inline constexpr std::size_t kDefaultChunkSize = 64;

// O(T^2) masked reference:
//   O_t = q_t (init + sum_{i<t} k_i^T v_i)
// final_state = init + sum_{i<=T} k_i^T v_i.
AttentionResult causal_linear_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                        const std::optional<KVState>& init = std::nullopt,
                                        KernelStats* stats = nullptr);

// Mixed-chunk evaluation of the same quantity: exact causal attention inside
// each chunk plus the chunk's queries against the prefix state of all earlier
// chunks. The last chunk may be shorter. Chunks are processed in parallel;
// the prefix scan over chunk states is sequential in ascending order.
AttentionResult chunked_causal_linear_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                                std::size_t chunk_size,
                                                const std::optional<KVState>& init = std::nullopt,
                                                KernelStats* stats = nullptr);

struct AttentionGrads {
  Matrix dq;
  Matrix dk;
  Matrix dv;
  Matrix dinit;  // key_dim x value_dim; zero-sized when no init was given
};

// Vector-Jacobian product of causal linear attention for an upstream
// gradient `dout` on O. Each adjoint is itself a strictly causal linear
// attention (dk and dv run in reversed time), so the chunked kernel is reused.
AttentionGrads causal_linear_attention_backward(const Matrix& q, const Matrix& k,
                                                const Matrix& v,
                                                const std::optional<KVState>& init,
                                                const Matrix& dout, std::size_t chunk_size);

// Analytic work counts matching what the kernels above report.
std::uint64_t quadratic_attention_flops(std::size_t t, std::size_t dk, std::size_t dv, bool init);
std::uint64_t chunked_attention_flops(std::size_t t, std::size_t chunk, std::size_t dk,
                                      std::size_t dv, bool init);

Matrix reverse_rows(const Matrix& m);

}  // namespace fwl
