#include <gtest/gtest.h>

#include <cmath>

#include "fwl/numerics.hpp"

namespace fwl {
namespace {

TEST(Matrix, ConstructionChecksDataLength) {
  EXPECT_THROW(Matrix(2, 3, std::vector<Real>(5)), ShapeError);
  const Matrix m(2, 3, std::vector<Real>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m(1, 2), 6);
  EXPECT_EQ(m.transposed()(2, 1), 6);
  EXPECT_EQ(m.slice_rows(1, 2).row(0)[0], 4);
  EXPECT_EQ(m.shape_string(), "[2x3]");
}

TEST(Matmul, BlockedMatchesReference) {
  Rng rng(3);
  for (auto [r, k, c] : {std::tuple{1, 1, 1}, {5, 7, 3}, {70, 129, 65}, {200, 3, 90}}) {
    const Matrix a = random_matrix(r, k, rng, 1);
    const Matrix b = random_matrix(k, c, rng, 1);
    const Matrix ref = matmul_reference(a, b);
    EXPECT_LT(max_abs_diff(matmul(a, b).flat(), ref.flat()), 1e-12);
    EXPECT_LT(max_abs_diff(matmul_nt(a, b.transposed()).flat(), ref.flat()), 1e-12);
    EXPECT_LT(max_abs_diff(matmul_tn(a.transposed(), b).flat(), ref.flat()), 1e-12);
  }
}

TEST(Matmul, AccumulatingVariants) {
  Rng rng(4);
  const Matrix a = random_matrix(6, 4, rng, 1), b = random_matrix(6, 5, rng, 1);
  Matrix c = random_matrix(4, 5, rng, 1);
  Matrix expect = matmul_reference(a.transposed(), b);
  add_inplace(expect, c);
  add_matmul_tn(c, a, b);
  EXPECT_LT(max_abs_diff(c.flat(), expect.flat()), 1e-13);
  EXPECT_THROW(add_matmul_tn(c, a, a), ShapeError);
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  const Vector x = random_vector(7, rng, 2), g = random_vector(7, rng, 1),
               b = random_vector(7, rng, 1), w = random_vector(7, rng, 1);
  auto f = [&](std::span<const Real> xs) { return dot(layernorm_fwd(xs, g, b).y, w); };
  const Vector num = finite_diff_grad(f, x, 1e-6);
  const LayerNormGrads gr = layernorm_bwd(layernorm_fwd(x, g, b).cache, w);
  EXPECT_LT(max_abs_diff(gr.dx, num), 1e-8);
}

TEST(LayerNorm, ConstantRowIsFinite) {
  const Vector x(4, 3.0), g(4, 1), b(4, 0);
  const auto r = layernorm_fwd(x, g, b);
  for (Real y : r.y) EXPECT_EQ(y, 0);
}

TEST(Softmax, XentGradientAndRange) {
  const Vector logits{1000, 1001, 999};
  const auto r = softmax_xent(logits, 1);
  EXPECT_TRUE(std::isfinite(r.loss));
  Real s = 0;
  for (Real d : r.dlogits) s += d;
  EXPECT_NEAR(s, 0, 1e-14);
  EXPECT_THROW(softmax_xent(logits, 3), IndexError);
}

TEST(Relu2, ValueAndSlope) {
  const Vector x{-1, 0, 2};
  const auto r = relu2(x);
  EXPECT_EQ(r.y, (Vector{0, 0, 4}));
  EXPECT_EQ(r.mask, (Vector{0, 0, 4}));
}

TEST(Cumsum, ExclusiveAndAdjoint) {
  const Matrix g = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const Matrix e = exclusive_cumsum_rows(g);
  EXPECT_EQ(e, Matrix::from_rows({{0, 0}, {1, 2}, {4, 6}}));
  const Matrix r = reverse_exclusive_cumsum_rows(g);
  EXPECT_EQ(r, Matrix::from_rows({{8, 10}, {5, 6}, {0, 0}}));
  // <exclusive(g), y> == <g, reverse_exclusive(y)>
  const Matrix y = Matrix::from_rows({{1, -1}, {2, 0}, {0.5, 3}});
  EXPECT_DOUBLE_EQ(dot(e.flat(), y.flat()), dot(g.flat(), reverse_exclusive_cumsum_rows(y).flat()));
}

TEST(Gelu, DerivativeMatchesFiniteDifference) {
  for (Real x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const Real num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
    EXPECT_NEAR(gelu_grad(x), num, 1e-8);
  }
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-15);
}

TEST(Rng, DeterministicStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(1);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_LT(c.below(7), 7u);
    const double u = c.uniform();
    EXPECT_GE(u, 0);
    EXPECT_LT(u, 1);
  }
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0, 0.03);
  EXPECT_NEAR(s2 / n, 1, 0.05);
}

}  // namespace
}  // namespace fwl
