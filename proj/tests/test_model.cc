#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "poisonlab/io.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/rng.hpp"

using namespace poisonlab;

namespace {

Tensor<double> random_batch(Shape s, std::uint64_t seed, double lo = 0.0,
                            double hi = 1.0) {
  Rng rng(seed, 0xba7c4);
  Tensor<double> t(std::move(s));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

std::vector<int> random_labels(int n, int classes, std::uint64_t seed) {
  Rng rng(seed, 0x1abe15);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(rng.below(std::uint64_t(classes)));
  return y;
}

double l2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() /
           ("poisonlab_model_test_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Arch, ParseRoundTrip) {
  std::string text = "input:2x5x5;conv:3x3p1;relu;conv:4x2;tanh;flatten;dense:10;relu;dense:3";
  auto arch = ArchDescriptor::parse(text);
  EXPECT_EQ(arch.str(), text);
  EXPECT_EQ(arch.class_count(), 3);
  EXPECT_EQ(arch.input[0], 2);
  EXPECT_EQ(arch.layers.size(), 8u);
}

TEST(Arch, RejectsBadDescriptors) {
  EXPECT_THROW(ArchDescriptor::parse("dense:3"), Error);                        // no input
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;dense:3"), Error);            // dense on spatial
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;flatten;conv:2x3"), Error);   // conv on flat
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;flatten;flatten;dense:2"), Error);
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;flatten;dense:1"), Error);    // 1 class
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;flatten;relu"), Error);       // no final dense
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;conv:2x9;flatten;dense:2"), Error);
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;spectral:3;flatten;dense:2"), Error);
  EXPECT_THROW(ArchDescriptor::parse("input:1x4;flatten;dense:2"), Error);
  EXPECT_THROW(ArchDescriptor::parse("input:1x4x4;dense:x;"), Error);
  for (const char* bad : {"dense:3", "input:1x4x4;dense:0x"}) {
    try {
      ArchDescriptor::parse(bad);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::config);
    }
  }
}

TEST(Classifier, InitIsSeedDeterministic) {
  auto arch = ArchDescriptor::parse("input:1x3x3;conv:2x2;relu;flatten;dense:2");
  Classifier<double> a(arch, 7), b(arch, 7), c(arch, 8);
  EXPECT_EQ(a.params_flat(), b.params_flat());
  EXPECT_NE(a.params_flat(), c.params_flat());
  // Uniform fan-in bound: dense layer fan-in is 2*2*2=8.
  double bound = 1.0 / std::sqrt(8.0);
  const auto& w = a.params()[2];
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    EXPECT_LE(std::abs(w[i]), bound);
  }
}

TEST(Classifier, GradParamsMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto arch = ArchDescriptor::parse("input:1x2x3;flatten;dense:5;relu;dense:3");
    Classifier<double> model(arch, seed);
    Tensor<double> x = random_batch({4, 1, 2, 3}, seed + 10);
    auto y = random_labels(4, 3, seed + 20);

    GradVector<double> g = model.grad_params(x, y);
    std::vector<double> flat_g;
    for (const auto& part : g.parts)
      for (std::int64_t i = 0; i < part.numel(); ++i) flat_g.push_back(part[i]);

    auto theta = model.params_flat();
    std::vector<double> fd(theta.size());
    const double h = 1e-5;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      auto tp = theta;
      tp[j] = theta[j] + h;
      model.set_params_flat(tp);
      double fp = model.forward_loss(x, y).second;
      tp[j] = theta[j] - h;
      model.set_params_flat(tp);
      double fm = model.forward_loss(x, y).second;
      fd[j] = (fp - fm) / (2 * h);
    }
    model.set_params_flat(theta);

    std::vector<double> diff(theta.size());
    for (std::size_t j = 0; j < theta.size(); ++j) diff[j] = flat_g[j] - fd[j];
    EXPECT_LT(l2(diff) / std::max(l2(fd), 1e-10), 1e-6);
  }
}

TEST(Classifier, GradInputMatchesFiniteDifferences) {
  auto arch = ArchDescriptor::parse("input:2x4x4;conv:3x3p1;relu;flatten;dense:2");
  Classifier<double> model(arch, 5);
  Tensor<double> x = random_batch({2, 2, 4, 4}, 55, 0.1, 0.9);
  std::vector<int> y{0, 1};

  Tensor<double> g = model.grad_input(x, y);
  const double h = 1e-5;
  Tensor<double> xp = x;
  double worst = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    xp[i] = x[i] + h;
    double fp = model.forward_loss(xp, y).second;
    xp[i] = x[i] - h;
    double fm = model.forward_loss(xp, y).second;
    xp[i] = x[i];
    double fd = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[i]));
  }
  EXPECT_LT(worst, 1e-7);
}

TEST(Classifier, SecondOrderInputGradientOfParamGradFunctional) {
  // phi(x) = <u, grad_theta loss(x)> - 0.5 * loss(x): the same shape of
  // objective the crafting loop uses. Its input gradient must match finite
  // differences of phi computed through independent first-order calls.
  auto arch = ArchDescriptor::parse("input:1x2x2;flatten;dense:4;tanh;dense:2");
  Classifier<double> model(arch, 11);
  Tensor<double> x = random_batch({1, 1, 2, 2}, 66, 0.2, 0.8);
  std::vector<int> y{1};

  GradVector<double> probe;
  {
    Rng rng(99, 0xabc);
    auto g0 = model.grad_params(x, y);
    for (auto& part : g0.parts) {
      Tensor<double> u(part.shape);
      for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = rng.uniform(-1, 1);
      probe.parts.push_back(std::move(u));
    }
  }

  auto phi = [&](const Tensor<double>& xq) {
    auto g = model.grad_params(xq, y);
    return grad_dot(g, probe) - 0.5 * model.forward_loss(xq, y).second;
  };

  Tensor<double> analytic = grad_input_of_scalar(
      model, x, y,
      [&](const std::vector<ad::Var<double>>& grads, const ad::Var<double>& loss) {
        ad::Var<double> s;
        for (std::size_t k = 0; k < grads.size(); ++k) {
          auto term = ad::dot(grads[k], ad::constant(Tensor<double>(probe.parts[k])));
          s = s ? ad::add(s, term) : term;
        }
        return ad::sub(s, ad::scale(loss, 0.5));
      });

  const double h = 1e-5;
  Tensor<double> xp = x;
  double worst = 0, scale = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    xp[i] = x[i] + h;
    double fp = phi(xp);
    xp[i] = x[i] - h;
    double fm = phi(xp);
    xp[i] = x[i];
    double fd = (fp - fm) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic[i]));
    scale = std::max(scale, std::abs(fd));
  }
  EXPECT_LT(worst / std::max(scale, 1e-10), 1e-5);
}

TEST(Classifier, NumericErrorNamesLayer) {
  auto arch = ArchDescriptor::parse("input:1x2x2;flatten;dense:3;relu;dense:2");
  Classifier<double> model(arch, 3);
  model.params()[0][0] = std::nan("");
  Tensor<double> x = random_batch({1, 1, 2, 2}, 4);
  try {
    model.forward_loss(x, {0});
    FAIL() << "expected numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("layer 1 (dense)"), std::string::npos);
  }
}

TEST(Classifier, PredictBreaksTiesTowardSmallestClass) {
  auto arch = ArchDescriptor::parse("input:1x1x2;flatten;dense:3");
  Classifier<double> model(arch, 1);
  for (auto& p : model.params())
    for (std::int64_t i = 0; i < p.numel(); ++i) p[i] = 0.0;
  // All logits zero: tie across all classes resolves to 0.
  Tensor<double> x = random_batch({1, 1, 1, 2}, 5);
  EXPECT_EQ(model.predict(x)[0], 0);
  // Tie between classes 1 and 2 at the top resolves to 1.
  model.params()[1][1] = 3.0;
  model.params()[1][2] = 3.0;
  EXPECT_EQ(model.predict(x)[0], 1);
}

TEST(Classifier, PerExampleLossesAverageToBatchLoss) {
  auto arch = ArchDescriptor::parse("input:1x2x2;flatten;dense:3");
  Classifier<double> model(arch, 9);
  Tensor<double> x = random_batch({5, 1, 2, 2}, 10);
  auto y = random_labels(5, 3, 11);
  auto rows = model.per_example_losses(x, y);
  double mean = 0;
  for (double r : rows) mean += r;
  mean /= double(rows.size());
  EXPECT_NEAR(model.forward_loss(x, y).second, mean, 1e-12);
}

TEST(Classifier, RejectsWrongInputShape) {
  auto arch = ArchDescriptor::parse("input:1x2x2;flatten;dense:2");
  Classifier<double> model(arch, 1);
  Tensor<double> bad = random_batch({1, 1, 3, 3}, 2);
  EXPECT_THROW(model.forward_loss(bad, {0}), Error);
}

TEST(Checkpoint, RoundTripIsExact) {
  auto dir = temp_dir();
  auto arch = ArchDescriptor::parse("input:1x3x3;conv:2x2;relu;flatten;dense:2");
  Classifier<double> model(arch, 21);
  auto path = dir / "model.ckpt";
  model.save(path);
  auto back = Classifier<double>::load(path);
  EXPECT_EQ(back.arch().str(), model.arch().str());
  EXPECT_EQ(back.params_flat(), model.params_flat());

  // float32 models save through the same float64 container.
  Classifier<float> m32(arch, 21);
  m32.save(dir / "m32.ckpt");
  auto b32 = Classifier<float>::load(dir / "m32.ckpt");
  EXPECT_EQ(b32.params_flat(), m32.params_flat());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  auto dir = temp_dir();
  auto arch = ArchDescriptor::parse("input:1x2x2;flatten;dense:2");
  Classifier<double> model(arch, 2);
  auto path = dir / "model.ckpt";
  model.save(path);

  // Bad magic.
  write_text(dir / "bad1.ckpt", "not-a-checkpoint\n");
  EXPECT_THROW(Classifier<double>::load(dir / "bad1.ckpt"), Error);

  // Truncated payload.
  auto bytes = read_bytes(path);
  bytes.resize(bytes.size() - 5);
  write_bytes(dir / "bad2.ckpt", bytes);
  try {
    Classifier<double>::load(dir / "bad2.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
  std::filesystem::remove_all(dir);
}
