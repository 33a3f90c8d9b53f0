#include <gtest/gtest.h>

#include "fwl/head.hpp"
#include "fwl/oracle.hpp"
#include "test_support.hpp"

namespace fwl {
namespace {

using testing::random_head;
using testing::random_tokens;
using testing::relative_error;

TEST(FastMask, ParseAndFormat) {
  EXPECT_EQ(FastMask::parse("all"), FastMask::all());
  EXPECT_EQ(FastMask::parse("bias-only"), FastMask::bias_only());
  EXPECT_EQ(FastMask::parse("U,W,E"), FastMask::matrices_only());
  EXPECT_EQ(FastMask::parse(FastMask::vectors_only().to_string()), FastMask::vectors_only());
  EXPECT_EQ(FastMask::none().to_string(), "none");
  EXPECT_THROW(FastMask::parse("U,Q"), ConfigError);
}

TEST(SlowForward, MatchesOracleLoss) {
  Rng rng(1);
  const HeadParams p = random_head(6, 10, 7, rng);
  const Matrix h = random_matrix(5, 6, rng, 1);
  const auto y = random_tokens(5, 7, rng);
  const PositionTape tape = slow_forward(p, h, y);
  for (std::size_t t = 0; t < 5; ++t)
    EXPECT_NEAR(tape.losses[t], oracle_head_loss(p, h.row(t), y[t]), 1e-13);
}

TEST(SlowForward, RejectsShapeAndTargetErrors) {
  Rng rng(2);
  const HeadParams p = random_head(4, 5, 3, rng);
  const Matrix h = random_matrix(2, 4, rng, 1);
  EXPECT_THROW(slow_forward(p, random_matrix(2, 3, rng, 1), std::vector<TokenId>{0, 1}),
               ShapeError);
  EXPECT_THROW(slow_forward(p, h, std::vector<TokenId>{0}), ShapeError);
  EXPECT_THROW(slow_forward(p, h, std::vector<TokenId>{0, 3}), IndexError);
}

// Rank-one products of the per-position upstream gradients reproduce the
// full-matrix gradients of each L_t, which are checked against finite
// differences of the loss.
TEST(PositionGrads, RankOneIdentityMatchesFiniteDifferences) {
  Rng rng(3);
  const std::size_t d = 8, dh = 12, v = 9;
  const HeadParams p = random_head(d, dh, v, rng);
  const Matrix h = random_matrix(4, d, rng, 1);
  const auto y = random_tokens(4, v, rng);
  const PositionTape tape = slow_forward(p, h, y);
  const PositionGrads g = per_position_grads(p, tape, y);
  for (std::size_t t = 0; t < 4; ++t) {
    for (HeadTensor k : {HeadTensor::U, HeadTensor::W, HeadTensor::E}) {
      const Matrix& key = k == HeadTensor::U ? tape.h : k == HeadTensor::W ? tape.v : tape.u;
      const Matrix& val = k == HeadTensor::U ? g.g_z : k == HeadTensor::W ? g.g_o : g.g_logits;
      const Matrix rank_one = matmul_tn(key.slice_rows(t, t + 1), val.slice_rows(t, t + 1));
      HeadParams q = p;
      auto f = [&](std::span<const Real> x) {
        std::copy(x.begin(), x.end(), q.tensor(k).begin());
        return oracle_head_loss(q, h.row(t), y[t]);
      };
      const auto base = p.tensor(k);
      const Vector fd = finite_diff_grad(f, Vector(base.begin(), base.end()), 1e-6);
      for (std::size_t e = 0; e < fd.size(); ++e) {
        const Real a = rank_one.flat()[e], n = fd[e];
        EXPECT_LE(std::abs(a - n), 1e-5 * std::max(std::abs(n), Real(1e-3)))
            << kHeadTensorNames[index_of(k)] << " t=" << t << " e=" << e;
      }
    }
  }
}

TEST(FastForward, ZeroStepEqualsSlowPass) {
  Rng rng(4);
  const HeadParams p = random_head(5, 7, 6, rng);
  const Matrix h = random_matrix(9, 5, rng, 1);
  const auto y = random_tokens(9, 6, rng);
  const PositionTape tape = slow_forward(p, h, y);
  const PositionGrads g = per_position_grads(p, tape, y);
  const FastPass zero = fast_forward(p, StepSizes::uniform(0, FastMask::all()), tape, g, y);
  const FastPass none = fast_forward(p, StepSizes::uniform(0.3, FastMask::none()), tape, g, y);
  EXPECT_EQ(zero.losses, tape.losses);
  EXPECT_EQ(none.losses, tape.losses);
  EXPECT_EQ(none.logits, tape.logits);
}

TEST(FastForward, FirstPositionIsUnchanged) {
  Rng rng(5);
  const HeadParams p = random_head(5, 7, 6, rng);
  const Matrix h = random_matrix(4, 5, rng, 1);
  const auto y = random_tokens(4, 6, rng);
  const PositionTape tape = slow_forward(p, h, y);
  const FastPass f = fast_forward(p, StepSizes::uniform(0.2, FastMask::all()), tape,
                                  per_position_grads(p, tape, y), y);
  EXPECT_NEAR(f.losses[0], tape.losses[0], 1e-14);
  EXPECT_GT(std::abs(f.losses[3] - tape.losses[3]), 1e-6);
}

TEST(FastForward, FutureTargetsDoNotLeak) {
  Rng rng(6);
  const HeadParams p = random_head(5, 7, 6, rng);
  const Matrix h = random_matrix(6, 5, rng, 1);
  auto y = random_tokens(6, 6, rng);
  const auto steps = StepSizes::uniform(0.2, FastMask::all());
  auto run = [&](const std::vector<TokenId>& ys) {
    const PositionTape tape = slow_forward(p, h, ys);
    return fast_forward(p, steps, tape, per_position_grads(p, tape, ys), ys).losses;
  };
  const Vector a = run(y);
  y[4] = (y[4] + 1) % 6;
  const Vector b = run(y);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(a[t], b[t]);
  EXPECT_NE(a[5], b[5]);
}

TEST(StreamState, SegmentedEqualsOracleWithCarriedState) {
  Rng rng(7);
  const HeadParams p = random_head(4, 6, 5, rng);
  const Matrix h = random_matrix(10, 4, rng, 1);
  const auto y = random_tokens(10, 5, rng);
  const auto steps = StepSizes::uniform(0.1, FastMask::all());
  const Decays decays = Decays::uniform(Real(0.7));
  StreamState st = StreamState::zeros(p, steps.mask);
  std::vector<Real> losses;
  for (std::size_t s = 0; s < 10; s += 4) {
    const std::size_t e = std::min<std::size_t>(s + 4, 10);
    const Matrix hs = h.slice_rows(s, e);
    const std::vector<TokenId> ys(y.begin() + s, y.begin() + e);
    const PositionTape tape = slow_forward(p, hs, ys);
    const PositionGrads g = per_position_grads(p, tape, ys);
    const FastPass f = fast_forward(p, steps, tape, g, ys, &st, &decays);
    const Vector ref = sequential_fast_forward(p, steps, hs, ys, &st, &decays);
    for (std::size_t t = 0; t < ref.size(); ++t) EXPECT_NEAR(f.losses[t], ref[t], 1e-10);
    losses.insert(losses.end(), f.losses.begin(), f.losses.end());
    st = update_stream_state(st, g, tape, decays, steps.mask);
  }
  EXPECT_EQ(losses.size(), 10u);
}

TEST(StreamState, SplitMatchesSingleSegment) {
  // Over two segments the history is still zero, so the decay plays no role.
  Rng rng(8);
  const HeadParams p = random_head(4, 6, 5, rng);
  const Matrix h = random_matrix(6, 4, rng, 1);
  const auto y = random_tokens(6, 5, rng);
  const auto steps = StepSizes::uniform(0.1, FastMask::all());
  Decays decays;
  decays.raw.fill(60);
  const PositionTape whole = slow_forward(p, h, y);
  const FastPass ref = fast_forward(p, steps, whole, per_position_grads(p, whole, y), y);

  const std::vector<TokenId> y1(y.begin(), y.begin() + 3), y2(y.begin() + 3, y.end());
  const PositionTape t1 = slow_forward(p, h.slice_rows(0, 3), y1);
  const StreamState st = update_stream_state(StreamState::zeros(p, steps.mask),
                                             per_position_grads(p, t1, y1), t1, decays, steps.mask);
  const PositionTape t2 = slow_forward(p, h.slice_rows(3, 6), y2);
  const FastPass f2 = fast_forward(p, steps, t2, per_position_grads(p, t2, y2), y2, &st, &decays);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(f2.losses[t], ref.losses[t + 3], 1e-10);
}

TEST(StreamState, RequiresDecaysAndMatchingShapes) {
  Rng rng(9);
  const HeadParams p = random_head(4, 6, 5, rng);
  const Matrix h = random_matrix(3, 4, rng, 1);
  const auto y = random_tokens(3, 5, rng);
  const PositionTape tape = slow_forward(p, h, y);
  const PositionGrads g = per_position_grads(p, tape, y);
  const auto steps = StepSizes::uniform(0.1, FastMask::all());
  const StreamState partial = StreamState::zeros(p, FastMask::bias_only());
  const Decays decays = Decays::uniform(0.9);
  EXPECT_THROW(fast_forward(p, steps, tape, g, y, &partial, &decays), StateError);
  const StreamState full = StreamState::zeros(p, steps.mask);
  EXPECT_THROW(fast_forward(p, steps, tape, g, y, &full, nullptr), StateError);
}

TEST(Generation, TeacherForcingReproducesStepLosses) {
  Rng rng(10);
  const HeadParams p = random_head(5, 8, 7, rng);
  const Matrix h = random_matrix(12, 5, rng, 1);
  const auto steps = StepSizes::uniform(0.15, FastMask::all());
  StreamState offsets = StreamState::zeros(p, steps.mask);
  Rng sampler(11);
  std::vector<TokenId> tokens;
  Vector step_losses;
  for (std::size_t t = 0; t < 12; ++t) {
    const GenerateResult r = generate_step(p, steps, offsets, h.row(t), 1.0, sampler);
    tokens.push_back(r.token);
    step_losses.push_back(r.loss);
    offsets = r.offsets;
  }
  const PositionTape tape = slow_forward(p, h, tokens);
  const FastPass f = fast_forward(p, steps, tape, per_position_grads(p, tape, tokens), tokens);
  for (std::size_t t = 0; t < 12; ++t) EXPECT_NEAR(f.losses[t], step_losses[t], 1e-9);
}

TEST(Generation, GreedyPicksLowestArgmax) {
  Rng rng(1);
  const Vector logits{0.5, 2, 2, -1};
  EXPECT_EQ(sample_token(logits, 0, rng), 1u);
}

TEST(HeadFlops, FastPassDominatedByAttentionTerms) {
  const HeadFlops none = head_flops_per_token(64, 128, 100, 64, 64, FastMask::none());
  const HeadFlops all = head_flops_per_token(64, 128, 100, 64, 64, FastMask::all());
  EXPECT_EQ(none.slow_forward, all.slow_forward);
  EXPECT_GT(all.fast_pass, none.fast_pass);
}

}  // namespace
}  // namespace fwl
