#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/pgd.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/sticker.hpp"

namespace poisonlab {

// Robust error-minimizing noise, the max-norm baseline the sticker attack is
// compared against. Three nested searches:
//   outer : SGD on the generator,
//   middle: per-example descent crafting noise x' in B_eps[x] that keeps the
//           generator's loss low even after...
//   inner : ...a PGD adversary perturbs x' within B_eps0[x'].
//
// The middle step treats the inner maximizer as fixed once found (standard
// max-oracle gradient): differentiate the loss at the attacked point with
// respect to the point itself.

struct RemTrainConfig {
  int epochs = 5;
  int batch = 128;
  int middle_steps = 4;
  double middle_step_size = 0;
  PgdConfig inner;  // adversary at radius eps0
  StepLrSchedule gen_lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int probe_rows = 64;  // objective-curve sample size
};

template <class T>
struct RemGenResult {
  Classifier<T> generator;
  bool radius_warning = false;  // eps <= eps0: noise cannot outrun the adversary
  std::vector<double> objective_curve;
};

namespace detail {

// Craft noise for one batch: descend the post-attack loss within
// B_eps[x] ∩ [0,1]. Keeps the best iterate per example (by post-attack
// loss), so crafting never makes an example worse than its start.
template <class T>
Tensor<T> rem_middle_min(const Classifier<T>& gen, const Tensor<T>& x,
                         const std::vector<int>& labels, double eps, double eps0,
                         int steps, double step_size, const PgdConfig& inner,
                         std::uint64_t seed, std::uint64_t stream) {
  PerturbationBall inner_ball{PerturbationBall::Kind::linf, eps0, 0};
  const T e = static_cast<T>(eps);
  int n = x.dim(0);
  std::int64_t rs = x.numel() / n;

  Tensor<T> cur = x;
  Tensor<T> best = x;
  std::vector<T> best_loss(static_cast<std::size_t>(n));
  {
    Tensor<T> attacked = pgd_attack(gen, cur, labels, inner_ball, inner, seed, stream);
    best_loss = gen.per_example_losses(attacked, labels);
  }
  for (int it = 0; it < steps; ++it) {
    Tensor<T> attacked =
        pgd_attack(gen, cur, labels, inner_ball, inner, seed, stream ^ (std::uint64_t(it + 1) << 52));
    Tensor<T> g = gen.grad_input(attacked, labels);
    for (int i = 0; i < n; ++i) {
      T* row = cur.data() + std::int64_t(i) * rs;
      const T* orig = x.data() + std::int64_t(i) * rs;
      const T* grow = g.data() + std::int64_t(i) * rs;
      for (std::int64_t j = 0; j < rs; ++j) {
        T v = row[j] - static_cast<T>(step_size) * sign_of(grow[j]);
        row[j] = std::clamp(v, std::max(T(0), orig[j] - e), std::min(T(1), orig[j] + e));
      }
    }
    Tensor<T> recheck =
        pgd_attack(gen, cur, labels, inner_ball, inner, seed, stream ^ (std::uint64_t(it + 1) << 40));
    std::vector<T> loss = gen.per_example_losses(recheck, labels);
    for (int i = 0; i < n; ++i) {
      if (loss[std::size_t(i)] < best_loss[std::size_t(i)]) {
        best_loss[std::size_t(i)] = loss[std::size_t(i)];
        std::copy(cur.data() + std::int64_t(i) * rs, cur.data() + std::int64_t(i + 1) * rs,
                  best.data() + std::int64_t(i) * rs);
      }
    }
  }
  return best;
}

}  // namespace detail

// Empirical value of the nested objective on (up to) probe_rows examples:
// craft noise, attack it, average the loss. Used for the training curve and
// for before/after comparisons.
template <class T>
double rem_objective(const Classifier<T>& gen, const LabeledDataset& data, double eps,
                     double eps0, const RemTrainConfig& cfg, std::uint64_t seed) {
  int n = std::min(data.n(), std::max(1, cfg.probe_rows));
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Tensor<T> x = batch_tensor<T>(data, idx);
  std::vector<int> y = batch_labels<T>(data, idx);
  Tensor<T> noise = detail::rem_middle_min(gen, x, y, eps, eps0, cfg.middle_steps,
                                           cfg.middle_step_size, cfg.inner, seed,
                                           0x72656d6f /* "remo" */);
  PerturbationBall ball{PerturbationBall::Kind::linf, eps0, 0};
  Tensor<T> attacked = pgd_attack(gen, noise, y, ball, cfg.inner, seed, 0x72656d61);
  auto losses = gen.per_example_losses(attacked, y);
  double s = 0;
  for (T v : losses) s += static_cast<double>(v);
  return s / double(losses.size());
}

template <class T>
RemGenResult<T> train_rem_generator(const LabeledDataset& train,
                                    const ArchDescriptor& gen_arch, double eps,
                                    double eps0, const RemTrainConfig& cfg,
                                    std::uint64_t seed) {
  if (!(eps > 0)) fail(ErrorKind::config, "noise budget eps must be positive");
  if (eps0 < 0) fail(ErrorKind::config, "adversary budget must be >= 0");
  if (cfg.middle_steps > 0 && !(cfg.middle_step_size > 0))
    fail(ErrorKind::config, "middle step size must be positive");
  if (eps0 > 0) validate_pgd({PerturbationBall::Kind::linf, eps0, 0}, cfg.inner);
  train.validate();

  RemGenResult<T> result{Classifier<T>(gen_arch, seed), eps <= eps0 && eps0 > 0, {}};
  auto& gen = result.generator;

  std::vector<Tensor<T>> velocity;
  for (const auto& p : gen.params()) velocity.push_back(Tensor<T>::zeros(p.shape));

  std::vector<int> order(static_cast<std::size_t>(train.n()));
  std::iota(order.begin(), order.end(), 0);

  std::int64_t gen_steps = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(seed, 0x72656d73 /* "rems" */, std::uint64_t(epoch));
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch)) {
      std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch));
      std::vector<int> idx(order.begin() + std::ptrdiff_t(start),
                           order.begin() + std::ptrdiff_t(stop));
      Tensor<T> xb = batch_tensor<T>(train, idx);
      std::vector<int> yb = batch_labels<T>(train, idx);

      std::uint64_t stream =
          (std::uint64_t(0x72656d) << 40) ^ (std::uint64_t(epoch) << 20) ^ start;
      Tensor<T> noise = detail::rem_middle_min(gen, xb, yb, eps, eps0, cfg.middle_steps,
                                               cfg.middle_step_size, cfg.inner, seed, stream);
      PerturbationBall ball{PerturbationBall::Kind::linf, eps0, 0};
      Tensor<T> attacked =
          pgd_attack(gen, noise, yb, ball, cfg.inner, seed, stream ^ 0x1);
      detail::sgd_step(gen, velocity, attacked, yb, cfg.gen_lr.at(gen_steps),
                       cfg.momentum, cfg.weight_decay, epoch);
      ++gen_steps;
    }
    result.objective_curve.push_back(rem_objective(gen, train, eps, eps0, cfg, seed));
  }
  return result;
}

// Craft the released poison set: per planned row, robust error-minimizing
// noise against the frozen generator.
template <class T>
PoisonSet rem_poison(const Classifier<T>& gen, const LabeledDataset& train,
                     const PoisonPlan& plan, double eps, double eps0,
                     const RemTrainConfig& cfg, std::uint64_t seed) {
  if (plan.indices.empty()) fail(ErrorKind::usage, "empty poison plan");
  PoisonSet ps = make_poison_set(train, plan);
  ps.meta.attack = "rem";
  ps.meta.epsilon = eps;
  ps.meta.epsilon0 = eps0;
  ps.meta.iters = cfg.middle_steps;
  ps.meta.opt_step = cfg.middle_step_size;

  Tensor<T> x = batch_tensor<T>(train, plan.indices);
  std::vector<int> y = batch_labels<T>(train, plan.indices);
  Tensor<T> noise = detail::rem_middle_min(gen, x, y, eps, eps0, cfg.middle_steps,
                                           cfg.middle_step_size, cfg.inner, seed,
                                           0x72656d70 /* "remp" */);
  std::int64_t rs = train.row_size();
  for (std::size_t k = 0; k < plan.indices.size(); ++k) {
    Tensor<T> row({1, train.shape[0], train.shape[1], train.shape[2]});
    std::copy(noise.data() + std::int64_t(k) * rs, noise.data() + std::int64_t(k + 1) * rs,
              row.data());
    set_row(ps.data, plan.indices[k], row);
  }

  verify_poison_set(ps, train);
  return ps;
}

}  // namespace poisonlab
