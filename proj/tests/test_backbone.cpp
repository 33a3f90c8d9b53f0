#include <gtest/gtest.h>

#include "fwl/backbone.hpp"

namespace fwl {
namespace {

BackboneConfig tiny(std::size_t memory_len = 0) {
  BackboneConfig c;
  c.vocab_size = 7;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq_len = 10;
  c.memory_len = memory_len;
  c.seed = 5;
  return c;
}

// Perturbs every tensor of `p` by eps * (matching tensor of dir).
void add_scaled(BackboneParams& p, const BackboneParams& dir, Real eps) {
  std::vector<std::span<const Real>> ds;
  dir.for_each_tensor([&](const std::string&, std::span<const Real> s) { ds.push_back(s); });
  std::size_t i = 0;
  p.for_each_tensor([&](const std::string&, std::span<Real> s) {
    axpy(eps, ds[i++], s);
  });
}

Real inner(const BackboneParams& a, const BackboneParams& b) {
  std::vector<std::span<const Real>> bs;
  b.for_each_tensor([&](const std::string&, std::span<const Real> s) { bs.push_back(s); });
  Real total = 0;
  std::size_t i = 0;
  a.for_each_tensor([&](const std::string&, std::span<const Real> s) { total += dot(s, bs[i++]); });
  return total;
}

BackboneParams random_like(const BackboneConfig& c, Rng& rng) {
  BackboneParams d = zero_backbone(c);
  d.for_each_tensor([&](const std::string&, std::span<Real> s) {
    for (auto& x : s) x = static_cast<Real>(rng.normal());
  });
  return d;
}

TEST(BackboneConfig, ValidationNamesField) {
  BackboneConfig c = tiny();
  c.n_heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("n_heads"), std::string::npos);
  }
  c = tiny();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Backbone, ParameterCountMatchesTensors) {
  const BackboneConfig c = tiny();
  const BackboneParams p = init_backbone(c);
  std::size_t n = 0;
  p.for_each_tensor([&](const std::string&, std::span<const Real> s) { n += s.size(); });
  EXPECT_EQ(n, backbone_parameter_count(c));
}

TEST(Backbone, IsCausal) {
  const BackboneConfig c = tiny();
  const BackboneParams p = init_backbone(c);
  const std::vector<TokenId> a{1, 2, 3, 4, 5}, b{1, 2, 3, 6, 0};
  const Matrix ha = encode(c, p, a), hb = encode(c, p, b);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(max_abs_diff(ha.row(t), hb.row(t)), 0);
  EXPECT_GT(max_abs_diff(ha.row(3), hb.row(3)), 0);
}

TEST(Backbone, RejectsBadTokens) {
  const BackboneConfig c = tiny();
  const BackboneParams p = init_backbone(c);
  EXPECT_THROW(encode(c, p, std::vector<TokenId>{}), InputError);
  EXPECT_THROW(encode(c, p, std::vector<TokenId>{7}), InputError);
  EXPECT_THROW(encode(c, p, std::vector<TokenId>(11, 0)), InputError);
}

TEST(Backbone, MemoryKeepsMostRecentRows) {
  const BackboneConfig c = tiny(6);
  const BackboneParams p = init_backbone(c);
  const std::vector<TokenId> s1{1, 2, 3, 4}, s2{5, 6, 0, 1};
  const auto o1 = encode_segment(c, p, s1, {});
  EXPECT_EQ(o1.memory.length(), 4u);
  const auto o2 = encode_segment(c, p, s2, o1.memory);
  EXPECT_EQ(o2.memory.length(), 6u);
  // The oldest rows of the new memory are the newest rows of the old one.
  for (std::size_t l = 0; l < c.n_layers; ++l)
    EXPECT_EQ(max_abs_diff(o2.memory.layers[l].row(0), o1.memory.layers[l].row(2)), 0);
  // Memory changes the encoding of the second segment.
  const Matrix fresh = encode(c, p, s2);
  EXPECT_GT(max_abs_diff(fresh.flat(), o2.hidden.flat()), 1e-6);
}

TEST(Backbone, BackwardMatchesFiniteDifferences) {
  for (std::size_t mem : {0u, 5u}) {
    const BackboneConfig c = tiny(mem);
    const BackboneParams p = init_backbone(c);
    Rng rng(7);
    const std::vector<TokenId> s1{1, 2, 3}, s2{4, 0, 6, 2};
    const SegmentMemory m = mem ? encode_segment(c, p, s1, {}).memory : SegmentMemory{};
    const TapedSegment seg = encode_segment_taped(c, p, s2, m);
    const Matrix w = random_matrix(4, c.d_model, rng, 1);
    BackboneParams g = zero_backbone(c);
    backbone_backward(c, p, seg.tape, w, g);

    const BackboneParams dir = random_like(c, rng);
    auto f = [&](Real eps) {
      BackboneParams q = p;
      add_scaled(q, dir, eps);
      // Memory is held fixed: it is a constant input to this segment.
      return dot(encode_segment(c, q, s2, m).hidden.flat(), w.flat());
    };
    const Real num = (f(1e-6) - f(-1e-6)) / 2e-6;
    const Real exact = inner(g, dir);
    EXPECT_NEAR(exact, num, 1e-6 * std::max(Real(1), std::abs(num))) << "memory " << mem;
  }
}

TEST(Backbone, FlopCountGrowsWithMemory) {
  const BackboneConfig c = tiny(8);
  EXPECT_GT(backbone_forward_flops(c, 8, 8), backbone_forward_flops(c, 8, 0));
}

}  // namespace
}  // namespace fwl
