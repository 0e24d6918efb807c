#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "poisonlab/rem.hpp"

using namespace poisonlab;

namespace {

const char* kGenArch = "input:1x3x3;flatten;dense:8;relu;dense:3";

LabeledDataset rem_train_set() {
  return synthesize_dataset(45, {1, 3, 3}, 3, 5.0, 300, "train");
}

RemTrainConfig quick_cfg() {
  RemTrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 15;
  cfg.middle_steps = 4;
  cfg.middle_step_size = 0.02;
  cfg.inner = PgdConfig{4, 0.01, false};
  cfg.gen_lr.base = 0.1;
  cfg.probe_rows = 24;
  return cfg;
}

}  // namespace

TEST(Rem, RadiusWarningTruthTable) {
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  cfg.epochs = 0;

  auto warn = [&](double eps, double eps0) {
    return train_rem_generator<double>(train, arch, eps, eps0, cfg, 1).radius_warning;
  };
  EXPECT_FALSE(warn(0.08, 0.02));  // noise has room to spare
  EXPECT_TRUE(warn(0.02, 0.02));   // adversary can undo everything
  EXPECT_TRUE(warn(0.01, 0.02));
  EXPECT_FALSE(warn(0.02, 0.0));  // no adversary at all
}

TEST(Rem, TrainingDrivesRobustObjectiveDown) {
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  cfg.epochs = 6;
  auto res = train_rem_generator<double>(train, arch, 0.08, 0.02, cfg, 7);
  ASSERT_EQ(res.objective_curve.size(), 6u);
  for (double v : res.objective_curve) EXPECT_TRUE(std::isfinite(v));
  EXPECT_LT(res.objective_curve.back(), res.objective_curve.front());
}

TEST(Rem, CraftedNoiseLowersPostAttackLoss) {
  // The middle minimization keeps the best iterate by post-attack loss, so
  // the crafted batch can never score worse than the clean one.
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  auto res = train_rem_generator<double>(train, arch, 0.08, 0.02, cfg, 9);

  std::vector<int> idx{0, 1, 2, 3, 4, 5};
  Tensor<double> x = batch_tensor<double>(train, idx);
  std::vector<int> y = batch_labels<double>(train, idx);
  Tensor<double> noise = detail::rem_middle_min(res.generator, x, y, 0.08, 0.02, 8,
                                                0.02, cfg.inner, 11, 77);
  PerturbationBall ball{PerturbationBall::Kind::linf, 0.02, 0};
  // The inner attack has random_init off, so it is a deterministic function
  // of its input and the best-iterate guarantee carries over example by
  // example.
  auto before = res.generator.per_example_losses(
      pgd_attack(res.generator, x, y, ball, cfg.inner, 11, 77), y);
  auto after = res.generator.per_example_losses(
      pgd_attack(res.generator, noise, y, ball, cfg.inner, 11, 77), y);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_LE(after[i], before[i] + 1e-12);
}

TEST(Rem, PoisonRespectsBudgetAndPlan) {
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  auto gen = train_rem_generator<double>(train, arch, 0.08, 0.02, cfg, 13);
  PoisonPlan plan = select_poison_indices(train, -1, 0.2, 5);  // 9 rows
  PoisonSet ps = rem_poison(gen.generator, train, plan, 0.08, 0.02, cfg, 13);

  EXPECT_EQ(ps.meta.attack, "rem");
  EXPECT_DOUBLE_EQ(ps.meta.epsilon, 0.08);
  EXPECT_DOUBLE_EQ(ps.meta.epsilon0, 0.02);
  EXPECT_EQ(ps.data.labels, train.labels);
  bool any_changed = false;
  for (int i = 0; i < train.n(); ++i) {
    bool planned = std::binary_search(plan.indices.begin(), plan.indices.end(), i);
    const float* a = train.row(i);
    const float* b = ps.data.row(i);
    for (std::int64_t j = 0; j < train.row_size(); ++j) {
      if (!planned) {
        EXPECT_EQ(a[j], b[j]);
      } else {
        EXPECT_LE(std::abs(double(a[j]) - double(b[j])), 0.08 + 1e-6);
        EXPECT_GE(b[j], 0.0f);
        EXPECT_LE(b[j], 1.0f);
        any_changed = any_changed || a[j] != b[j];
      }
    }
  }
  EXPECT_TRUE(any_changed);
}

TEST(Rem, ZeroMiddleStepsLeavesPixelsAlone) {
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  cfg.middle_steps = 0;
  cfg.middle_step_size = 0;
  auto gen = train_rem_generator<double>(train, arch, 0.08, 0.02, cfg, 17);
  PoisonPlan plan = select_poison_indices(train, -1, 0.2, 5);
  PoisonSet ps = rem_poison(gen.generator, train, plan, 0.08, 0.02, cfg, 17);
  EXPECT_EQ(0, std::memcmp(ps.data.images.data(), train.images.data(),
                           train.images.size() * sizeof(float)));
}

TEST(Rem, NoAdversaryReducesToPlainErrorMinimization) {
  // With eps0 == 0 the inner attack is the identity, so the middle loop is
  // plain descent of the generator's loss; crafted rows must come out at
  // least as easy as the originals.
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  cfg.inner = PgdConfig{0, 0, false};
  auto gen = train_rem_generator<double>(train, arch, 0.08, 0.0, cfg, 19);
  std::vector<int> idx{0, 1, 2, 3};
  Tensor<double> x = batch_tensor<double>(train, idx);
  std::vector<int> y = batch_labels<double>(train, idx);
  Tensor<double> noise = detail::rem_middle_min(gen.generator, x, y, 0.08, 0.0, 10,
                                                0.02, cfg.inner, 23, 5);
  auto before = gen.generator.per_example_losses(x, y);
  auto after = gen.generator.per_example_losses(noise, y);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_LE(after[i], before[i] + 1e-12);
}

TEST(Rem, DeterministicPerSeed) {
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  cfg.epochs = 2;
  auto g1 = train_rem_generator<double>(train, arch, 0.08, 0.02, cfg, 29);
  auto g2 = train_rem_generator<double>(train, arch, 0.08, 0.02, cfg, 29);
  EXPECT_EQ(g1.generator.params_flat(), g2.generator.params_flat());
  EXPECT_EQ(g1.objective_curve, g2.objective_curve);
  PoisonPlan plan = select_poison_indices(train, -1, 0.2, 5);
  PoisonSet p1 = rem_poison(g1.generator, train, plan, 0.08, 0.02, cfg, 31);
  PoisonSet p2 = rem_poison(g2.generator, train, plan, 0.08, 0.02, cfg, 31);
  EXPECT_EQ(0, std::memcmp(p1.data.images.data(), p2.data.images.data(),
                           p1.data.images.size() * sizeof(float)));
}

TEST(Rem, RejectsBadConfigs) {
  LabeledDataset train = rem_train_set();
  auto arch = ArchDescriptor::parse(kGenArch);
  RemTrainConfig cfg = quick_cfg();
  EXPECT_THROW(train_rem_generator<double>(train, arch, 0.0, 0.02, cfg, 1), Error);
  EXPECT_THROW(train_rem_generator<double>(train, arch, 0.08, -0.1, cfg, 1), Error);
  RemTrainConfig bad = quick_cfg();
  bad.middle_step_size = 0;
  EXPECT_THROW(train_rem_generator<double>(train, arch, 0.08, 0.02, bad, 1), Error);
  bad = quick_cfg();
  bad.inner.step_size = 0;  // adversary present but cannot move
  EXPECT_THROW(train_rem_generator<double>(train, arch, 0.08, 0.02, bad, 1), Error);
}
