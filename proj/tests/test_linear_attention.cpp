#include <gtest/gtest.h>

#include "fwl/linear_attention.hpp"

namespace fwl {
namespace {

struct Qkv {
  Matrix q, k, v;
};

Qkv random_qkv(std::size_t t, std::size_t dk, std::size_t dv, Rng& rng) {
  return {random_matrix(t, dk, rng, 1), random_matrix(t, dk, rng, 1), random_matrix(t, dv, rng, 1)};
}

TEST(CausalLinearAttention, StrictlyExcludesCurrentPosition) {
  const Matrix q = Matrix::from_rows({{1}, {1}, {1}});
  const Matrix k = Matrix::from_rows({{1}, {1}, {1}});
  const Matrix v = Matrix::from_rows({{1}, {10}, {100}});
  const auto r = causal_linear_attention(q, k, v);
  EXPECT_EQ(r.output, Matrix::from_rows({{0}, {1}, {11}}));
  EXPECT_EQ(r.final_state.accumulator, Matrix::from_rows({{111}}));
}

TEST(CausalLinearAttention, InitialStateIsSeenByEveryQuery) {
  const Matrix q = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix k = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix v = Matrix::from_rows({{5}, {7}});
  const KVState init{Matrix::from_rows({{1}, {2}})};
  const auto r = causal_linear_attention(q, k, v, init);
  EXPECT_EQ(r.output, Matrix::from_rows({{1}, {2}}));
}

TEST(ChunkedAttention, MatchesQuadraticReference) {
  Rng rng(1);
  for (std::size_t t : {1u, 2u, 63u, 64u, 65u, 200u}) {
    const auto [q, k, v] = random_qkv(t, 5, 3, rng);
    const KVState init{random_matrix(5, 3, rng, 1)};
    for (bool with_init : {false, true}) {
      std::optional<KVState> i0;
      if (with_init) i0 = init;
      const auto ref = causal_linear_attention(q, k, v, i0);
      for (std::size_t c : {std::size_t{1}, std::size_t{7}, std::size_t{64}, t}) {
        const auto got = chunked_causal_linear_attention(q, k, v, c, i0);
        EXPECT_LT(max_abs_diff(got.output.flat(), ref.output.flat()), 1e-10) << t << " " << c;
        EXPECT_LT(max_abs_diff(got.final_state.accumulator.flat(),
                               ref.final_state.accumulator.flat()),
                  1e-10);
      }
    }
  }
}

TEST(ChunkedAttention, StateAdditivityAcrossSplits) {
  Rng rng(2);
  const auto [q, k, v] = random_qkv(50, 4, 6, rng);
  const auto whole = chunked_causal_linear_attention(q, k, v, 8);
  const auto first = chunked_causal_linear_attention(q.slice_rows(0, 21), k.slice_rows(0, 21),
                                                     v.slice_rows(0, 21), 8);
  const auto second = chunked_causal_linear_attention(
      q.slice_rows(21, 50), k.slice_rows(21, 50), v.slice_rows(21, 50), 8, first.final_state);
  EXPECT_LT(max_abs_diff(second.final_state.accumulator.flat(),
                         whole.final_state.accumulator.flat()),
            1e-12);
  EXPECT_LT(max_abs_diff(second.output.flat(), whole.output.slice_rows(21, 50).flat()), 1e-12);
}

TEST(ChunkedAttention, RejectsBadShapes) {
  Rng rng(3);
  const auto [q, k, v] = random_qkv(4, 2, 2, rng);
  EXPECT_THROW(chunked_causal_linear_attention(q, k, v, 0), ConfigError);
  EXPECT_THROW(chunked_causal_linear_attention(q, k, v.slice_rows(0, 3), 2), ShapeError);
  EXPECT_THROW(causal_linear_attention(q, k, v, KVState{Matrix(3, 2)}), ShapeError);
}

TEST(ChunkedAttention, ReportedWorkMatchesAnalyticCount) {
  Rng rng(4);
  const auto [q, k, v] = random_qkv(100, 8, 5, rng);
  KernelStats quad, chunked;
  causal_linear_attention(q, k, v, std::nullopt, &quad);
  chunked_causal_linear_attention(q, k, v, 16, std::nullopt, &chunked);
  EXPECT_EQ(quad.flops, quadratic_attention_flops(100, 8, 5, false));
  EXPECT_EQ(chunked.flops, chunked_attention_flops(100, 16, 8, 5, false));
}

TEST(AttentionBackward, MatchesFiniteDifferences) {
  Rng rng(5);
  const auto [q, k, v] = random_qkv(9, 3, 4, rng);
  const KVState init{random_matrix(3, 4, rng, 1)};
  const Matrix dout = random_matrix(9, 4, rng, 1);
  const auto g = causal_linear_attention_backward(q, k, v, init, dout, 4);
  auto objective = [&](const Matrix& qq, const Matrix& kk, const Matrix& vv, const Matrix& ii) {
    return dot(causal_linear_attention(qq, kk, vv, KVState{ii}).output.flat(), dout.flat());
  };
  auto check = [&](const Matrix& x, const Matrix& grad, int which) {
    for (std::size_t e = 0; e < x.size(); ++e) {
      Matrix p = x, m = x;
      p.flat()[e] += 1e-6;
      m.flat()[e] -= 1e-6;
      auto eval = [&](const Matrix& y) {
        return objective(which == 0 ? y : q, which == 1 ? y : k, which == 2 ? y : v,
                         which == 3 ? y : init.accumulator);
      };
      EXPECT_NEAR(grad.flat()[e], (eval(p) - eval(m)) / 2e-6, 1e-7);
    }
  };
  check(q, g.dq, 0);
  check(k, g.dk, 1);
  check(v, g.dv, 2);
  check(init.accumulator, g.dinit, 3);
}

}  // namespace
}  // namespace fwl
