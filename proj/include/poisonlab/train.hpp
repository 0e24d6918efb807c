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

namespace poisonlab {

// Learning-rate schedule: base value, multiplied by each factor once the
// given epoch is reached.
struct LrSchedule {
  double base = 0.1;
  std::vector<std::pair<int, double>> decays;

  double at(int epoch) const {
    double lr = base;
    for (const auto& [e, f] : decays)
      if (epoch >= e) lr *= f;
    return lr;
  }
};

struct TrainConfig {
  int epochs = 10;
  int batch = 64;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = false;
  int aug_pad = 1;
  bool aug_flip = true;
};

// Scores on a held-out set: accuracy on the data as-is, and under the
// evaluation attack.
struct EvalSnapshot {
  double nat_acc = 0;
  double rob_acc = 0;
};

// Per-epoch history plus best-checkpoint markers. The two "best" models are
// tracked separately because natural and robust accuracy usually peak at
// different epochs.
struct EvalReport {
  double nat_acc = 0, rob_acc = 0;  // final model
  std::vector<double> nat_curve, rob_curve, loss_curve;
  std::vector<double> nat_ld_curve, adv_ld_curve;  // filled when a target is tracked
  int best_nat_epoch = -1, best_rob_epoch = -1;
  double best_nat_acc = 0, best_rob_acc = 0;
};

template <class T>
struct TrainResult {
  Classifier<T> model;  // parameters after the last epoch
  std::vector<double> best_nat_params, best_rob_params;
  EvalReport report;
};

// Gap between the attacker's wanted logit and the true class logit for one
// example, log f^{y_adv}(x) - log f^{y_tar}(x). Softmax normalization cancels
// in the difference, so this is just a logit gap; positive means the attack
// wins the argmax between the two classes.
template <class T>
double logit_gap(const Classifier<T>& model, const Tensor<T>& x, int y_adv, int y_tar) {
  Tensor<T> z = model.logits_value(x);
  if (z.dim(0) != 1) fail(ErrorKind::usage, "logit_gap wants a single example");
  int c = z.dim(1);
  if (y_adv < 0 || y_adv >= c || y_tar < 0 || y_tar >= c)
    fail(ErrorKind::usage, "logit_gap class index out of range");
  return static_cast<double>(z.at2(0, y_adv)) - static_cast<double>(z.at2(0, y_tar));
}

// Optional per-epoch probe of one test example; records the logit gap on the
// example itself and on its worst-case perturbation under the given attack.
template <class T>
struct TargetProbe {
  Tensor<T> x;
  int y_tar = 0, y_adv = 0;
  PerturbationBall ball;
  PgdConfig pgd;
};

template <class T>
EvalSnapshot evaluate(const Classifier<T>& model, const LabeledDataset& test,
                      const PerturbationBall& ball, const PgdConfig& cfg,
                      std::uint64_t seed, std::uint64_t stream = 0) {
  if (test.n() == 0) fail(ErrorKind::usage, "evaluate on empty dataset");
  std::vector<int> all(static_cast<std::size_t>(test.n()));
  std::iota(all.begin(), all.end(), 0);
  Tensor<T> x = batch_tensor<T>(test, all);
  std::vector<int> y = batch_labels<T>(test, all);

  EvalSnapshot snap;
  auto count_correct = [&](const std::vector<int>& pred) {
    int ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == y[i]) ++ok;
    return double(ok) / double(pred.size());
  };
  snap.nat_acc = count_correct(model.predict(x));
  if (ball.radius == 0) {
    // No attack surface: robust accuracy is natural accuracy by definition,
    // and pgd_attack would return x bit-for-bit anyway.
    snap.rob_acc = snap.nat_acc;
  } else {
    Tensor<T> adv = pgd_attack(model, x, y, ball, cfg, seed, stream);
    snap.rob_acc = count_correct(model.predict(adv));
  }
  return snap;
}

namespace detail {

// Zero-padded random crop plus optional horizontal flip, matched to the
// usual image-classification recipe. Operates on one row in place.
template <class T>
void augment_row(T* row, int c, int h, int w, int pad, bool flip_enabled, Rng& rng) {
  int dy = static_cast<int>(rng.below(std::uint64_t(2 * pad + 1))) - pad;
  int dx = static_cast<int>(rng.below(std::uint64_t(2 * pad + 1))) - pad;
  bool flip = flip_enabled && rng.below(2) == 1;
  std::vector<T> src(row, row + std::size_t(c) * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = y + dy;
        int sx = x + dx;
        T v = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                  ? src[(std::size_t(ch) * h + sy) * w + sx]
                  : T(0);
        int ox = flip ? (w - 1 - x) : x;
        row[(std::size_t(ch) * h + y) * w + ox] = v;
      }
}

}  // namespace detail

// Adversarial training: every batch is replaced by its PGD perturbation at
// radius eps0 before the SGD step (heavy-ball momentum, decoupled-style L2
// via gradient augmentation). eps0 == 0 degenerates to standard training
// through the very same code path, so the two are bit-for-bit comparable.
//
// The evaluation attack each epoch reuses attack_cfg at radius eps0.
// Augmented views are only ever seen by the training step; attacks and
// evaluations always run on the stored pixels.
template <class T>
TrainResult<T> adversarial_train(Classifier<T> model, const LabeledDataset& train,
                                 const LabeledDataset& test, double eps0,
                                 const PgdConfig& attack_cfg, const TrainConfig& cfg,
                                 std::uint64_t seed,
                                 const TargetProbe<T>* probe = nullptr) {
  if (cfg.epochs < 0) fail(ErrorKind::config, "epochs must be >= 0");
  if (cfg.batch <= 0) fail(ErrorKind::config, "batch size must be positive");
  if (eps0 < 0) fail(ErrorKind::config, "training radius must be >= 0");
  if (eps0 > 0) validate_pgd({PerturbationBall::Kind::linf, eps0, 0}, attack_cfg);
  train.validate();

  PerturbationBall ball{PerturbationBall::Kind::linf, eps0, 0};
  TrainResult<T> result{std::move(model), {}, {}, {}};
  auto& net = result.model;
  auto& report = result.report;

  std::vector<Tensor<T>> velocity;
  velocity.reserve(net.params().size());
  for (const auto& p : net.params()) velocity.push_back(Tensor<T>::zeros(p.shape));

  std::vector<int> order(static_cast<std::size_t>(train.n()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr.at(epoch);
    Rng shuffle_rng(seed, 0x73687566 /* "shuf" */, std::uint64_t(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    std::int64_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch)) {
      std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch));
      std::vector<int> idx(order.begin() + std::ptrdiff_t(start),
                           order.begin() + std::ptrdiff_t(stop));
      Tensor<T> xb = batch_tensor<T>(train, idx);
      std::vector<int> yb = batch_labels<T>(train, idx);

      if (cfg.augment) {
        int c = train.shape[0], h = train.shape[1], w = train.shape[2];
        for (std::size_t k = 0; k < idx.size(); ++k) {
          // Keyed by (epoch, dataset row), so the view of an example does not
          // depend on where the shuffle placed it.
          Rng aug_rng(seed, 0x61756731 /* "aug1" */,
                      (std::uint64_t(epoch) << 32) | std::uint64_t(idx[k]));
          detail::augment_row(xb.data() + std::int64_t(k) * train.row_size(), c, h, w,
                              cfg.aug_pad, cfg.aug_flip, aug_rng);
        }
      }

      std::uint64_t batch_stream =
          (std::uint64_t(0x747267) << 40) ^ (std::uint64_t(epoch) << 20) ^ start;
      try {
        Tensor<T> xadv = eps0 > 0
                             ? pgd_attack(net, xb, yb, ball, attack_cfg, seed, batch_stream)
                             : xb;
        auto graph = net.build_loss_graph(xadv, yb, false, true);
        double loss = static_cast<double>(graph.loss->value[0]);
        if (!std::isfinite(loss) || loss > 1e6)
          fail(ErrorKind::training_diverged,
               "loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch));
        loss_sum += loss * double(idx.size());
        loss_count += std::int64_t(idx.size());

        auto grads = ad::backward(graph.loss);
        for (std::size_t pi = 0; pi < net.params().size(); ++pi) {
          Tensor<T>& p = net.params()[pi];
          const Tensor<T>& g = grads.get_or_zero(graph.param_leaves[pi])->value;
          Tensor<T>& v = velocity[pi];
          for (std::int64_t j = 0; j < p.numel(); ++j) {
            T step = g[j] + static_cast<T>(cfg.weight_decay) * p[j];
            v[j] = static_cast<T>(cfg.momentum) * v[j] + step;
            p[j] -= static_cast<T>(lr) * v[j];
          }
        }
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::numeric)
          fail(ErrorKind::training_diverged,
               std::string("numeric blowup at epoch ") + std::to_string(epoch) + ": " +
                   e.what());
        throw;
      }
    }

    EvalSnapshot snap = evaluate(net, test, ball, attack_cfg, seed,
                                 (std::uint64_t(0x65766c) << 40) ^ std::uint64_t(epoch));
    report.nat_curve.push_back(snap.nat_acc);
    report.rob_curve.push_back(snap.rob_acc);
    report.loss_curve.push_back(loss_count ? loss_sum / double(loss_count) : 0.0);
    if (probe) {
      report.nat_ld_curve.push_back(logit_gap(net, probe->x, probe->y_adv, probe->y_tar));
      Tensor<T> xadv = pgd_attack(net, probe->x, std::vector<int>{probe->y_tar},
                                  probe->ball, probe->pgd, seed,
                                  (std::uint64_t(0x6c64) << 44) ^ std::uint64_t(epoch));
      report.adv_ld_curve.push_back(logit_gap(net, xadv, probe->y_adv, probe->y_tar));
    }

    if (report.best_nat_epoch < 0 || snap.nat_acc > report.best_nat_acc) {
      report.best_nat_acc = snap.nat_acc;
      report.best_nat_epoch = epoch;
      result.best_nat_params = net.params_flat();
    }
    if (report.best_rob_epoch < 0 || snap.rob_acc > report.best_rob_acc) {
      report.best_rob_acc = snap.rob_acc;
      report.best_rob_epoch = epoch;
      result.best_rob_params = net.params_flat();
    }
    report.nat_acc = snap.nat_acc;
    report.rob_acc = snap.rob_acc;
  }

  if (cfg.epochs == 0) {
    // Nothing trained; still report the initial model so callers have
    // something coherent to look at.
    EvalSnapshot snap = evaluate(net, test, ball, attack_cfg, seed, 0x65766c);
    report.nat_acc = report.best_nat_acc = snap.nat_acc;
    report.rob_acc = report.best_rob_acc = snap.rob_acc;
    report.best_nat_epoch = report.best_rob_epoch = 0;
    result.best_nat_params = net.params_flat();
    result.best_rob_params = net.params_flat();
  }
  return result;
}

// Standard training is adversarial training with a zero-radius ball; one
// code path, so any difference between the two is the perturbation itself.
template <class T>
TrainResult<T> standard_train(Classifier<T> model, const LabeledDataset& train,
                              const LabeledDataset& test, const TrainConfig& cfg,
                              std::uint64_t seed) {
  PgdConfig none{0, 0.0, false};
  return adversarial_train(std::move(model), train, test, 0.0, none, cfg, seed);
}

}  // namespace poisonlab
