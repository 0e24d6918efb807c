// Finite-difference oracles for the differentiation engine. Every primitive
// gets its vector-Jacobian product checked against central differences, and
// a second sweep checks the derivative OF the gradient (the property the
// poison-crafting objective depends on).

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "poisonlab/autodiff.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/tensor.hpp"

using namespace poisonlab;
namespace adx = poisonlab::ad;
using Var = adx::Var<double>;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Keep values away from relu/mask kinks so finite differences stay valid.
void push_off_kinks(Tensor<double>& t, double margin = 0.05) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? -margin : margin;
}

double l2(const Tensor<double>& t) {
  double s = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

double rel_err(const Tensor<double>& got, const Tensor<double>& want) {
  Tensor<double> d(got.shape);
  for (std::int64_t i = 0; i < d.numel(); ++i) d[i] = got[i] - want[i];
  return l2(d) / std::max(l2(want), 1e-10);
}

// Central-difference gradient of a scalar-valued function of x.
Tensor<double> fd_grad(const Tensor<double>& x,
                       const std::function<double(const Tensor<double>&)>& f,
                       double h = 1e-4) {
  Tensor<double> g(x.shape);
  Tensor<double> xp = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    xp[i] = x[i] + h;
    double fp = f(xp);
    xp[i] = x[i] - h;
    double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

// Exercise one scalar-valued builder both ways:
//  1. analytic gradient vs finite differences of the value;
//  2. analytic gradient of (v . gradient) vs finite differences of the
//     analytic gradient, which verifies the backward graph is itself
//     differentiable and correct.
void check_builder(const std::function<Var(const Var&)>& build,
                   const Tensor<double>& x0, std::uint64_t seed,
                   double tol1 = 1e-6, double tol2 = 1e-5) {
  auto value_at = [&](const Tensor<double>& x) {
    auto leafv = adx::leaf(Tensor<double>(x), false);
    return build(leafv)->value[0];
  };
  auto grad_at = [&](const Tensor<double>& x) {
    auto leafv = adx::leaf(Tensor<double>(x));
    auto s = build(leafv);
    return adx::backward(s).get_or_zero(leafv)->value;
  };

  // First order.
  Tensor<double> g = grad_at(x0);
  Tensor<double> g_fd = fd_grad(x0, value_at);
  EXPECT_LT(rel_err(g, g_fd), tol1) << "first-order mismatch";

  // Second order, against FD of the analytic gradient.
  Rng rng(seed, 0xdd);
  Tensor<double> v = random_tensor(x0.shape, rng);
  auto gdotv_at = [&](const Tensor<double>& x) {
    Tensor<double> gx = grad_at(x);
    double s = 0;
    for (std::int64_t i = 0; i < gx.numel(); ++i) s += gx[i] * v[i];
    return s;
  };
  auto leafv = adx::leaf(Tensor<double>(x0));
  auto s = build(leafv);
  auto g_node = adx::backward(s).get_or_zero(leafv);
  auto t = adx::dot(adx::constant(Tensor<double>(v)), g_node);
  Tensor<double> h = adx::backward(t).get_or_zero(leafv)->value;
  Tensor<double> h_fd = fd_grad(x0, gdotv_at);
  double denom = std::max(l2(h_fd), 1e-8);
  Tensor<double> diff(h.shape);
  for (std::int64_t i = 0; i < h.numel(); ++i) diff[i] = h[i] - h_fd[i];
  EXPECT_LT(l2(diff) / denom, tol2) << "second-order mismatch";
}

// Contract a tensor-valued node to a scalar with fixed random weights, so
// every output coordinate's derivative is exercised.
Var contract(const Var& y, std::uint64_t seed) {
  Rng rng(seed, 0xcc);
  Tensor<double> u(y->value.shape);
  for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = rng.uniform(-1, 1);
  return adx::dot(y, adx::constant(std::move(u)));
}

}  // namespace

TEST(Autodiff, ValueSemantics) {
  Rng rng(1);
  auto a = adx::leaf(random_tensor({2, 3}, rng));
  auto b = adx::leaf(random_tensor({2, 3}, rng));
  auto s = adx::add(a, b);
  for (std::int64_t i = 0; i < 6; ++i)
    EXPECT_DOUBLE_EQ(s->value[i], a->value[i] + b->value[i]);
  EXPECT_TRUE(s->requires_grad);
  auto c = adx::constant(random_tensor({2, 3}, rng));
  EXPECT_FALSE(adx::add(c, c)->requires_grad);
}

TEST(Autodiff, ElementwiseUnaryOps) {
  Rng rng(2);
  // Positive inputs for log/sqrt/recip.
  Tensor<double> xpos = random_tensor({2, 3}, rng, 0.4, 1.6);
  check_builder([](const Var& x) { return contract(adx::recip(x), 10); }, xpos, 20);
  check_builder([](const Var& x) { return contract(adx::log(x), 11); }, xpos, 21);
  check_builder([](const Var& x) { return contract(adx::sqrt(x), 12); }, xpos, 22);
  check_builder([](const Var& x) { return contract(adx::exp(x), 13); }, xpos, 23);

  Tensor<double> xany = random_tensor({3, 2}, rng);
  check_builder([](const Var& x) { return contract(adx::tanh(x), 14); }, xany, 24);
  check_builder([](const Var& x) { return contract(adx::neg(x), 15); }, xany, 25);
  check_builder([](const Var& x) { return contract(adx::scale(x, 2.5), 16); }, xany, 26);
}

TEST(Autodiff, ReluAndMask) {
  Rng rng(3);
  Tensor<double> x = random_tensor({4, 3}, rng);
  push_off_kinks(x);
  check_builder([](const Var& x) { return contract(adx::relu(x), 30); }, x, 31);

  // mask_pos_mul: differentiable in its first argument, dead end in the mask
  // source by design.
  Tensor<double> ref = random_tensor({4, 3}, rng);
  push_off_kinks(ref);
  auto refc = adx::constant(Tensor<double>(ref));
  check_builder(
      [refc](const Var& x) { return contract(adx::mask_pos_mul(x, refc), 32); }, x, 33);

  auto xleaf = adx::leaf(Tensor<double>(ref));
  auto masked = adx::mask_pos_mul(adx::constant(Tensor<double>(x)), xleaf);
  auto s = adx::sum(masked);
  auto g = adx::backward(s).get(xleaf);
  EXPECT_EQ(g, nullptr) << "mask source must receive no gradient";
}

TEST(Autodiff, BinaryOps) {
  Rng rng(4);
  Tensor<double> a0 = random_tensor({2, 4}, rng);
  Tensor<double> b0 = random_tensor({2, 4}, rng, 0.5, 1.5);
  auto bconst = adx::constant(Tensor<double>(b0));
  auto aconst = adx::constant(Tensor<double>(a0));

  check_builder([&](const Var& x) { return contract(adx::add(x, bconst), 40); }, a0, 41);
  check_builder([&](const Var& x) { return contract(adx::sub(x, bconst), 42); }, a0, 43);
  check_builder([&](const Var& x) { return contract(adx::sub(aconst, x), 44); }, b0, 45);
  check_builder([&](const Var& x) { return contract(adx::mul(x, bconst), 46); }, a0, 47);
  // Both arguments at once: f(x) = <u, x * x> has a clean second derivative.
  check_builder([&](const Var& x) { return contract(adx::mul(x, x), 48); }, a0, 49);
}

TEST(Autodiff, ShapeOps) {
  Rng rng(5);
  Tensor<double> x = random_tensor({2, 6}, rng);
  check_builder([](const Var& v) { return contract(adx::reshape(v, {3, 4}), 50); }, x, 51);
  check_builder([](const Var& v) { return adx::sum(v); }, x, 52);
  check_builder([](const Var& v) { return contract(adx::rowsum(v), 53); }, x, 54);
  check_builder([](const Var& v) { return contract(adx::colsum(v), 55); }, x, 56);
  check_builder([](const Var& v) { return contract(adx::transpose(v), 57); }, x, 58);

  Tensor<double> vec = random_tensor({5}, rng);
  check_builder([](const Var& v) { return contract(adx::tile_cols(v, 3), 60); }, vec, 61);
  check_builder([](const Var& v) { return contract(adx::tile_rows(v, 4), 62); }, vec, 63);

  Tensor<double> s1 = random_tensor({1}, rng);
  check_builder([](const Var& v) { return contract(adx::bcast(v, {2, 3}), 64); }, s1, 65);

  Tensor<double> img = random_tensor({2, 3, 2, 2}, rng);
  check_builder([](const Var& v) { return contract(adx::chan_sums(v), 66); }, img, 67);
  Tensor<double> ch = random_tensor({3}, rng);
  check_builder([](const Var& v) { return contract(adx::tile_chan(v, 2, 2, 2), 68); }, ch, 69);
}

TEST(Autodiff, PickAndScatter) {
  Rng rng(6);
  Tensor<double> x = random_tensor({4, 3}, rng);
  std::vector<int> labels{2, 0, 1, 1};
  check_builder([&](const Var& v) { return contract(adx::pick(v, labels), 70); }, x, 71);
  Tensor<double> vec = random_tensor({4}, rng);
  check_builder(
      [&](const Var& v) { return contract(adx::scatter_rows(v, labels, 3), 72); }, vec, 73);
  auto bad = adx::leaf(Tensor<double>(x));
  EXPECT_THROW(adx::pick(bad, {0, 1}), Error);
  EXPECT_THROW(adx::pick(bad, {0, 1, 2, 9}), Error);
}

TEST(Autodiff, MatmulAndBias) {
  Rng rng(7);
  Tensor<double> a0 = random_tensor({3, 4}, rng);
  Tensor<double> b0 = random_tensor({4, 2}, rng);
  auto ac = adx::constant(Tensor<double>(a0));
  auto bc = adx::constant(Tensor<double>(b0));
  check_builder([&](const Var& x) { return contract(adx::matmul(x, bc), 80); }, a0, 81);
  check_builder([&](const Var& x) { return contract(adx::matmul(ac, x), 82); }, b0, 83);

  Tensor<double> bias = random_tensor({4}, rng);
  auto biasc = adx::constant(Tensor<double>(bias));
  check_builder([&](const Var& x) { return contract(adx::add_rowvec(x, biasc), 84); },
                a0, 85);
  check_builder([&](const Var& x) { return contract(adx::add_rowvec(ac, x), 86); },
                bias, 87);

  Tensor<double> img = random_tensor({2, 3, 2, 2}, rng);
  Tensor<double> cbias = random_tensor({3}, rng);
  auto imgc = adx::constant(Tensor<double>(img));
  auto cbc = adx::constant(Tensor<double>(cbias));
  check_builder([&](const Var& x) { return contract(adx::add_chan_bias(x, cbc), 88); },
                img, 89);
  check_builder([&](const Var& x) { return contract(adx::add_chan_bias(imgc, x), 90); },
                cbias, 91);
}

TEST(Autodiff, ConvolutionTrio) {
  Rng rng(8);
  Tensor<double> x0 = random_tensor({2, 2, 4, 4}, rng);
  Tensor<double> k0 = random_tensor({3, 2, 3, 3}, rng);
  auto xc = adx::constant(Tensor<double>(x0));
  auto kc = adx::constant(Tensor<double>(k0));

  for (int pad : {0, 1}) {
    check_builder(
        [&, pad](const Var& v) { return contract(adx::conv2d(v, kc, pad), 100 + pad); },
        x0, 101 + pad);
    check_builder(
        [&, pad](const Var& v) { return contract(adx::conv2d(xc, v, pad), 102 + pad); },
        k0, 103 + pad);
  }

  // The adjoints as first-class ops.
  Tensor<double> g0 = random_tensor({2, 3, 4, 4}, rng);  // pad=1 output shape
  auto gc = adx::constant(Tensor<double>(g0));
  check_builder(
      [&](const Var& v) { return contract(adx::conv2d_dback(gc, v, 1, 4, 4), 110); },
      k0, 111);
  check_builder(
      [&](const Var& v) { return contract(adx::conv2d_dback(v, kc, 1, 4, 4), 112); },
      g0, 113);
  check_builder(
      [&](const Var& v) { return contract(adx::conv2d_kback(v, gc, 1, 3, 3), 114); },
      x0, 115);
  check_builder(
      [&](const Var& v) { return contract(adx::conv2d_kback(xc, v, 1, 3, 3), 116); },
      g0, 117);
}

TEST(Autodiff, CrossEntropy) {
  Rng rng(9);
  Tensor<double> z = random_tensor({5, 4}, rng, -2, 2);
  std::vector<int> labels{0, 3, 1, 2, 2};
  check_builder(
      [&](const Var& v) { return adx::softmax_cross_entropy(v, labels); }, z, 120);

  // Large logits stay finite thanks to the detached row max.
  Tensor<double> big = z;
  for (std::int64_t i = 0; i < big.numel(); ++i) big[i] += 500;
  auto node = adx::softmax_cross_entropy(adx::leaf(std::move(big)), labels);
  EXPECT_TRUE(std::isfinite(node->value[0]));

  // Agreement with the per-row helper.
  auto rows = adx::cross_entropy_rows(z, labels);
  double mean = 0;
  for (double r : rows) mean += r;
  mean /= double(rows.size());
  auto whole = adx::softmax_cross_entropy(adx::constant(Tensor<double>(z)), labels);
  EXPECT_NEAR(whole->value[0], mean, 1e-12);
}

TEST(Autodiff, BackwardBasics) {
  Rng rng(10);
  // Gradient accumulates across fan-out.
  auto x = adx::leaf(Tensor<double>::scalar(3.0));
  auto y = adx::add(adx::mul(x, x), x);  // x^2 + x, dy/dx = 2x+1 = 7
  auto g = adx::backward(y).get_or_zero(x);
  EXPECT_NEAR(g->value[0], 7.0, 1e-12);

  // Non-scalar root is rejected.
  auto m = adx::leaf(random_tensor({2, 2}, rng));
  EXPECT_THROW(adx::backward(m), Error);

  // Gradient for an unrelated leaf is null / zeros.
  auto z = adx::leaf(Tensor<double>::scalar(1.0));
  auto gm = adx::backward(y);
  EXPECT_EQ(gm.get(z), nullptr);
  EXPECT_EQ(gm.get_or_zero(z)->value[0], 0.0);
}

TEST(Autodiff, OpWithoutRuleRaisesCapabilityError) {
  auto x = adx::leaf(Tensor<double>::scalar(2.0));
  // An op someone added without a backward rule: value only.
  auto opaque = adx::make_node<double>("opaque_round", Tensor<double>::scalar(2.0),
                                       {x}, nullptr);
  auto s = adx::sum(opaque);
  try {
    adx::backward(s);
    FAIL() << "expected capability error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::capability);
    EXPECT_NE(std::string(e.what()).find("opaque_round"), std::string::npos);
  }
}

TEST(Autodiff, ThirdOrderAlsoWorks) {
  // The backward-of-backward graph is still differentiable: d3/dx3 of x^4.
  auto x = adx::leaf(Tensor<double>::scalar(1.5));
  auto x2 = adx::mul(x, x);
  auto y = adx::sum(adx::mul(x2, x2));  // x^4
  auto g1 = adx::backward(y).get_or_zero(x);           // 4x^3
  auto g2 = adx::backward(adx::sum(g1)).get_or_zero(x);  // 12x^2
  auto g3 = adx::backward(adx::sum(g2)).get_or_zero(x);  // 24x
  EXPECT_NEAR(g1->value[0], 4 * std::pow(1.5, 3), 1e-9);
  EXPECT_NEAR(g2->value[0], 12 * std::pow(1.5, 2), 1e-9);
  EXPECT_NEAR(g3->value[0], 24 * 1.5, 1e-9);
}
