#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "gia/autodiff.hpp"
#include "gia/errors.hpp"
#include "test_util.hpp"

namespace gia::ad {
namespace {

using gia::testing::random_tensor;

TEST(EvalTest, Addition) {
  Graph g;
  auto a = g.leaf("a", {2});
  auto b = g.leaf("b", {2});
  auto c = g.add(a, b);
  auto out = eval1(g, {{a, Tensor::from({1, 2})}, {b, Tensor::from({3, 4})}}, c);
  EXPECT_EQ(out, Tensor::from({4, 6}));
}

TEST(EvalTest, Squaring) {
  Graph g;
  auto a = g.leaf("a", {2});
  auto out = eval1(g, {{a, Tensor::from({2, -3})}}, g.mul(a, a));
  EXPECT_EQ(out, Tensor::from({4, 9}));
}

TEST(EvalTest, IdentityConvolution) {
  Graph g;
  auto x = g.leaf("x", {1, 1, 2, 2});
  auto w = g.constant(Tensor({1, 1, 1, 1}, 1.0));
  Tensor xv({1, 1, 2, 2}, {0.5, -1.0, 2.0, 3.5});
  EXPECT_EQ(eval1(g, {{x, xv}}, g.conv2d(x, w, {})), xv);
}

TEST(EvalTest, ConvolutionMatchesDirectSum) {
  Graph g;
  auto x = g.leaf("x", {2, 3, 5, 6});
  auto w = g.leaf("w", {4, 3, 3, 3});
  const ConvGeometry geom{2, 1};
  auto y = g.conv2d(x, w, geom);
  const Tensor xv = random_tensor({2, 3, 5, 6}, 1);
  const Tensor wv = random_tensor({4, 3, 3, 3}, 2);
  const Tensor yv = eval1(g, {{x, xv}, {w, wv}}, y);
  ASSERT_EQ(yv.shape(), (Shape{2, 4, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t oh = 0; oh < 3; ++oh)
        for (std::size_t ow = 0; ow < 3; ++ow) {
          double acc = 0.0;
          for (std::size_t c = 0; c < 3; ++c)
            for (int i = 0; i < 3; ++i)
              for (int j = 0; j < 3; ++j) {
                const int ih = static_cast<int>(oh) * 2 + i - 1;
                const int iw = static_cast<int>(ow) * 2 + j - 1;
                if (ih < 0 || iw < 0 || ih >= 5 || iw >= 6) continue;
                acc += wv.at(k, c, i, j) * xv.at(n, c, ih, iw);
              }
          EXPECT_NEAR(yv.at(n, k, oh, ow), acc, 1e-12);
        }
}

TEST(EvalTest, Errors) {
  Graph g;
  auto a = g.leaf("a", {2});
  auto b = g.leaf("b", {3});
  EXPECT_THROW(g.add(a, b), ShapeError);
  auto l = g.log(a);
  EXPECT_THROW(eval1(g, {}, l), PreconditionError);
  EXPECT_THROW(eval1(g, {{a, Tensor::from({1, -1})}}, l), NonFiniteError);
  EXPECT_THROW(eval1(g, {{a, Tensor::from({1, 2, 3})}}, l), ShapeError);
}

TEST(GradTest, PolynomialDerivative) {
  Graph g;
  auto x = g.leaf("x", {3});
  auto f = sum_all(g, g.square(x));
  auto dx = grad1(g, f, x);
  EXPECT_EQ(eval1(g, {{x, Tensor::from({1, 2, 3})}}, dx), Tensor::from({2, 4, 6}));
}

TEST(GradTest, SecondOrder) {
  Graph g;
  auto x = g.leaf("x", {2});
  auto f = sum_all(g, g.square(x));
  auto gf = grad1(g, f, x);
  auto h = sum_all(g, g.square(gf));
  auto dh = grad1(g, h, x);
  EXPECT_EQ(eval1(g, {{x, Tensor::from({1, 2})}}, dh), Tensor::from({8, 16}));
}

TEST(GradTest, Errors) {
  Graph g;
  auto x = g.leaf("x", {3});
  auto y = g.leaf("y", {3});
  auto sq = g.square(x);
  EXPECT_THROW(grad1(g, sq, x), ShapeError);
  EXPECT_THROW(grad1(g, sum_all(g, sq), y), PreconditionError);
}

// A random smooth three-layer composition mixing dense, convolutional and
// reduction primitives.
struct Composite {
  Graph g;
  NodeId x, out;
  Bindings others;
};

Composite make_composite(std::uint64_t seed) {
  Composite c;
  auto& g = c.g;
  c.x = g.leaf("x", {2, 2, 4, 4});
  auto w1 = g.leaf("w1", {3, 2, 3, 3}, LeafKind::Parameter);
  auto w2 = g.leaf("w2", {48, 5}, LeafKind::Parameter);
  c.others[w1] = random_tensor({3, 2, 3, 3}, seed + 1, -0.5, 0.5);
  c.others[w2] = random_tensor({48, 5}, seed + 2, -0.3, 0.3);
  auto h1 = g.conv2d(c.x, w1, {1, 1});
  auto h2 = g.sqrt(g.add_scalar(g.square(h1), 1.0));
  auto flat = g.reshape(h2, {2, 48});
  auto h3 = g.matmul(flat, w2);
  auto soft = g.log(sum_all(g, g.exp(g.scale(h3, 0.5))));
  c.out = add_bc(g, soft, mean_all(g, g.square(g.slice(h1, {0, 0, 1, 1}, {2, 3, 2, 2}))));
  return c;
}

TEST(GradTest, CompositeMatchesFiniteDifferences) {
  for (std::uint64_t seed : {3u, 7u, 11u}) {
    auto c = make_composite(seed);
    const double err = check_gradient(c.g, c.out, c.x, random_tensor({2, 2, 4, 4}, seed), c.others, 1e-5);
    EXPECT_LT(err, 1e-6) << "seed " << seed;
  }
}

TEST(CheckGradientTest, LinearFunction) {
  Graph g;
  auto x = g.leaf("x", {5});
  auto f = sum_all(g, x);
  EXPECT_LT(check_gradient(g, f, x, random_tensor({5}, 4, -3, 3), {}, 1e-3), 1e-12);
}

TEST(CheckGradientTest, ReluAwayFromKink) {
  Graph g;
  auto x = g.leaf("x", {6});
  auto f = sum_all(g, g.relu(x));
  EXPECT_LT(check_gradient(g, f, x, Tensor::from({-2, -0.5, 0.3, 1, 2, -1}), {}, 1e-4), 1e-8);
}

TEST(CheckGradientTest, ReluSubgradientAtZeroIsZero) {
  Graph g;
  auto x = g.leaf("x", {2});
  auto d = grad1(g, sum_all(g, g.relu(x)), x);
  EXPECT_EQ(eval1(g, {{x, Tensor::from({0.0, 1.0})}}, d), Tensor::from({0.0, 1.0}));
}

TEST(CheckGradientTest, RejectsNonPositiveStep) {
  Graph g;
  auto x = g.leaf("x", {1});
  EXPECT_THROW(check_gradient(g, sum_all(g, x), x, Tensor::from({1}), {}, 0.0), PreconditionError);
}

// Second-order consistency: d/dx <v, grad f(x)> against finite differences of
// the first-order gradient, one primitive family at a time.
using Builder = std::function<NodeId(Graph&, NodeId)>;

void expect_second_order(const Shape& shape, const Builder& build, std::uint64_t seed, double tol = 1e-5) {
  Graph g;
  auto x = g.leaf("x", shape);
  auto f = build(g, x);
  auto gx = grad1(g, f, x);
  auto v = g.constant(random_tensor(shape, seed + 100));
  auto h = sum_all(g, g.mul(gx, v));
  EXPECT_LT(check_gradient(g, h, x, random_tensor(shape, seed), {}, 1e-5), tol);
}

TEST(SecondOrderTest, ConvolutionFamily) {
  const Tensor w = random_tensor({3, 2, 3, 3}, 21);
  expect_second_order({2, 2, 5, 5}, [&](Graph& g, NodeId x) {
    auto k = g.constant(w);
    auto y = g.conv2d(g.square(x), k, {2, 1});
    return sum_all(g, g.square(g.conv2d_input_grad(g.square(y), k, {2, 1}, g.shape(x))));
  }, 5);
}

TEST(SecondOrderTest, WeightGradientFamily) {
  const Tensor gy = random_tensor({2, 3, 4, 4}, 22);
  expect_second_order({2, 2, 4, 4}, [&](Graph& g, NodeId x) {
    auto gw = g.conv2d_weight_grad(g.square(x), g.constant(gy), {1, 1}, {3, 2, 3, 3});
    return sum_all(g, g.square(gw));
  }, 6);
}

TEST(SecondOrderTest, BatchNormTrain) {
  expect_second_order({3, 2, 2, 2}, [](Graph& g, NodeId x) {
    auto y = g.batchnorm_train(x, 1e-5);
    return sum_all(g, g.mul(g.square(y), g.sqrt(g.add_scalar(g.square(x), 1.0))));
  }, 7);
}

TEST(SecondOrderTest, ElementwiseAndReductions) {
  expect_second_order({2, 3}, [](Graph& g, NodeId x) {
    auto e = g.exp(g.scale(x, 0.7));
    auto d = g.div(e, g.add_scalar(g.square(x), 2.0));
    auto m = g.max_to(x, {2, 1});
    auto s = sub_bc(g, d, m);
    auto l = g.log(g.add_scalar(g.square(s), 1.0));
    auto mm = g.matmul(g.transpose(l), g.square(x));
    return sum_all(g, g.mul(mm, mm));
  }, 8);
}

TEST(SecondOrderTest, PadSliceBroadcast) {
  expect_second_order({1, 2, 3, 3}, [](Graph& g, NodeId x) {
    auto p = g.pad(g.square(x), {0, 0, 1, 0}, {1, 2, 4, 3});
    auto s = g.slice(p, {0, 1, 0, 0}, {1, 1, 3, 3});
    auto c = channel_mean(g, g.mul(g.broadcast_to(s, {1, 2, 3, 3}), x));
    return sum_all(g, g.square(c));
  }, 9);
}

TEST(PropertyTest, Linearity) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Graph g;
    auto x = g.leaf("x", {4});
    auto f = sum_all(g, g.exp(g.scale(x, 0.3)));
    auto h = sum_all(g, g.square(g.sqrt(g.add_scalar(g.square(x), 1.0))));
    const double alpha = 1.7, beta = -0.4;
    auto combo = g.add(g.scale(f, alpha), g.scale(h, beta));
    auto dcombo = grad1(g, combo, x);
    auto df = grad1(g, f, x);
    auto dh = grad1(g, h, x);
    const Tensor xv = random_tensor({4}, seed);
    const NodeId t[] = {dcombo, df, dh};
    auto vals = eval(g, {{x, xv}}, t);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(vals[0][i], alpha * vals[1][i] + beta * vals[2][i], 1e-12);
  }
}

TEST(PropertyTest, DeterminismAndPurity) {
  auto c = make_composite(13);
  auto dx = grad1(c.g, c.out, c.x);
  Bindings b = c.others;
  const Tensor xv = random_tensor({2, 2, 4, 4}, 14);
  b[c.x] = xv;
  const Bindings snapshot = b;
  const NodeId t[] = {c.out, dx};
  auto first = eval(c.g, b, t);
  auto second = eval(c.g, b, t);
  EXPECT_EQ(first, second);
  EXPECT_EQ(b, snapshot);
}

TEST(ExecutorTest, CachedStaticNodesMatchFreshEvaluation) {
  auto c = make_composite(15);
  auto dx = grad1(c.g, c.out, c.x);
  Executor ex(c.g, {c.out, dx}, {c.x});
  for (std::uint64_t s = 0; s < 3; ++s) {
    Bindings b = c.others;
    b[c.x] = random_tensor({2, 2, 4, 4}, 30 + s);
    ex.run(s == 0 ? b : Bindings{{c.x, b[c.x]}});
    const NodeId t[] = {c.out, dx};
    auto fresh = eval(c.g, b, t);
    EXPECT_EQ(ex.value(c.out), fresh[0]);
    EXPECT_EQ(ex.value(dx), fresh[1]);
  }
}

}  // namespace
}  // namespace gia::ad
