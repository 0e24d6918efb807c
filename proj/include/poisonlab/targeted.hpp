#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/pgd.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/train.hpp"

namespace poisonlab {

// ---- gradient matching loss -------------------------------------------------
//
// Cosine dissimilarity 1 - cos(a, b) between two parameter-space gradients;
// 0 when aligned, 1 when orthogonal, 2 when opposed. Invariant to positive
// rescaling of either argument. A zero-norm argument has no direction, so it
// raises a degenerate-gradient error instead of returning a value.

template <class T>
double matching_loss(const GradVector<T>& a, const GradVector<T>& b) {
  double na = a.sq_norm();
  double nb = b.sq_norm();
  if (na == 0.0 || nb == 0.0)
    fail(ErrorKind::degenerate_gradient, "matching loss of a zero-norm gradient");
  return 1.0 - grad_dot(a, b) / (std::sqrt(na) * std::sqrt(nb));
}

// Same quantity as a graph node, with `a` given as live gradient nodes and
// `b` as fixed values. Differentiable in everything `a` depends on; this is
// the scalar the crafting loop pushes back through to pixels.
template <class T>
ad::Var<T> matching_loss_node(const std::vector<ad::Var<T>>& a_parts,
                              const GradVector<T>& b) {
  check_internal(a_parts.size() == b.parts.size(), "matching loss arity");
  if (a_parts.empty()) fail(ErrorKind::usage, "matching loss of empty gradients");
  double nb = b.sq_norm();
  if (nb == 0.0)
    fail(ErrorKind::degenerate_gradient, "matching loss target has zero norm");

  ad::Var<T> dot_ab, dot_aa;
  for (std::size_t k = 0; k < a_parts.size(); ++k) {
    auto bk = ad::constant(Tensor<T>(b.parts[k]));
    auto d1 = ad::dot(a_parts[k], bk);
    auto d2 = ad::dot(a_parts[k], a_parts[k]);
    dot_ab = dot_ab ? ad::add(dot_ab, d1) : d1;
    dot_aa = dot_aa ? ad::add(dot_aa, d2) : d2;
  }
  if (dot_aa->value[0] == T(0))
    fail(ErrorKind::degenerate_gradient, "matching loss of a zero-norm gradient");
  auto denom = ad::sqrt(ad::scale(dot_aa, static_cast<T>(nb)));
  auto cos_ab = ad::mul(dot_ab, ad::recip(denom));
  return ad::sub(ad::constant_scalar(T(1)), cos_ab);
}

// ---- targeted attack --------------------------------------------------------

// One victim example (a held-out row) and the label the attacker wants the
// trained model to emit for it.
struct TargetSpec {
  int target_index = -1;
  int y_tar = -1;  // true class of the target example
  int y_adv = -1;  // class the attacker wants instead
};

struct TargetedAttackConfig {
  enum class Mode { wb, robust };
  Mode mode = Mode::robust;
  double epsilon = 0;      // per-poison max-norm budget
  double lambda = 0.01;    // weight of the adversarial-loss term (robust mode)
  int iters = 250;
  double opt_step = 0.01;
  int batch = 128;         // crafting group size; rows are independent, so
                           // this only affects work grouping, not results
};

inline void validate_target(const TargetSpec& tgt, const LabeledDataset& heldout,
                            int class_count) {
  if (tgt.target_index < 0 || tgt.target_index >= heldout.n())
    fail(ErrorKind::config, "target index out of range");
  if (tgt.y_tar < 0 || tgt.y_tar >= class_count || tgt.y_adv < 0 ||
      tgt.y_adv >= class_count)
    fail(ErrorKind::config, "target classes out of range");
  if (tgt.y_adv == tgt.y_tar)
    fail(ErrorKind::config, "adversarial class must differ from the true class");
  if (heldout.labels[std::size_t(tgt.target_index)] != tgt.y_tar)
    fail(ErrorKind::config, "y_tar does not match the target row's label");
}

template <class T>
struct TargetedCraftResult {
  PoisonSet set;
  std::vector<double> objective_curve;  // mean crafting objective per sweep
};

// Craft clean-label poisons: perturb the planned rows (within a max-norm
// budget, pixels staying in [0,1]) so that the surrogate's parameter
// gradient on each poison points the same way as its gradient on the target
// relabeled to y_adv. In robust mode the objective also rewards keeping the
// poison hard for the surrogate (a weighted adversarial-loss term), which is
// what makes the match survive the victim's inner maximization; wb mode is
// the plain gradient-match baseline (the lambda term is dropped).
//
// Descent is by signed gradient steps through the second-order graph, with
// projection after every step, and the best iterate ever seen is kept, so
// the reported objective never ends above its starting point.
template <class T>
TargetedCraftResult<T> craft_targeted_poison(const LabeledDataset& train,
                                             const LabeledDataset& heldout,
                                             const PoisonPlan& plan,
                                             const TargetSpec& tgt,
                                             const TargetedAttackConfig& cfg,
                                             const Classifier<T>& surrogate) {
  validate_target(tgt, heldout, surrogate.class_count());
  if (!(cfg.epsilon > 0)) fail(ErrorKind::config, "poison budget epsilon must be positive");
  if (cfg.lambda < 0) fail(ErrorKind::config, "lambda must be >= 0");
  if (cfg.iters < 0) fail(ErrorKind::config, "iters must be >= 0");
  if (cfg.iters > 0 && !(cfg.opt_step > 0))
    fail(ErrorKind::config, "opt step must be positive");
  if (plan.indices.empty()) fail(ErrorKind::usage, "empty poison plan");

  // Target gradient: computed once on the surrogate, with the label the
  // attacker wants the victim to produce.
  Tensor<T> x_tar = row_tensor<T>(heldout, tgt.target_index);
  GradVector<T> target_grad = surrogate.grad_params(x_tar, {tgt.y_adv});
  if (target_grad.sq_norm() == 0.0)
    fail(ErrorKind::degenerate_gradient, "target gradient has zero norm");

  const T eps = static_cast<T>(cfg.epsilon);
  const T lambda_eff =
      cfg.mode == TargetedAttackConfig::Mode::robust ? static_cast<T>(cfg.lambda) : T(0);

  PoisonSet ps = make_poison_set(train, plan);
  ps.meta.attack =
      cfg.mode == TargetedAttackConfig::Mode::robust ? "targeted-robust" : "targeted-wb";
  ps.meta.epsilon = cfg.epsilon;
  ps.meta.lambda = static_cast<double>(lambda_eff);
  ps.meta.iters = cfg.iters;
  ps.meta.opt_step = cfg.opt_step;
  ps.meta.has_target = true;
  ps.meta.target_index = tgt.target_index;
  ps.meta.y_tar = tgt.y_tar;
  ps.meta.y_adv = tgt.y_adv;

  std::vector<double> curve(std::size_t(cfg.iters) + 1, 0.0);
  for (int row : plan.indices) {
    Tensor<T> x0 = row_tensor<T>(train, row);
    std::vector<int> y{int(train.labels[std::size_t(row)])};

    // Gaussian start inside the ball, sigma = eps/2.
    Rng init_rng(plan.seed, 0x74696e69 /* "tini" */, std::uint64_t(row));
    Tensor<T> x = x0;
    for (std::int64_t j = 0; j < x.numel(); ++j) {
      T d = static_cast<T>(0.5 * double(eps) * init_rng.normal());
      d = std::clamp(d, -eps, eps);
      x[j] = std::clamp(x0[j] + d, std::max(T(0), x0[j] - eps),
                        std::min(T(1), x0[j] + eps));
    }

    auto objective = [&](const Tensor<T>& xq) {
      auto g = surrogate.build_loss_graph(xq, y, true, true);
      auto first = ad::backward(g.loss);
      std::vector<ad::Var<T>> grads;
      grads.reserve(g.param_leaves.size());
      for (const auto& leaf : g.param_leaves) grads.push_back(first.get_or_zero(leaf));
      ad::Var<T> score = matching_loss_node(grads, target_grad);
      if (lambda_eff != T(0))
        score = ad::sub(score, ad::scale(g.loss, lambda_eff));
      auto second = ad::backward(score);
      return std::pair<T, Tensor<T>>(score->value[0],
                                     second.get_or_zero(g.input)->value);
    };

    T best_val;
    Tensor<T> best_x = x;
    {
      auto [v0, g0] = objective(x);
      best_val = v0;
      curve[0] += static_cast<double>(v0);
      for (int it = 0; it < cfg.iters; ++it) {
        Tensor<T>& g = g0;
        for (std::int64_t j = 0; j < x.numel(); ++j) {
          T v = x[j] - static_cast<T>(cfg.opt_step) * sign_of(g[j]);
          x[j] = std::clamp(v, std::max(T(0), x0[j] - eps), std::min(T(1), x0[j] + eps));
        }
        auto [vi, gi] = objective(x);
        curve[std::size_t(it) + 1] += static_cast<double>(vi);
        if (vi < best_val) {
          best_val = vi;
          best_x = x;
        }
        g0 = std::move(gi);
      }
    }
    set_row(ps.data, row, best_x);
  }
  for (auto& v : curve) v /= double(plan.indices.size());

  verify_poison_set(ps, train);
  return {std::move(ps), std::move(curve)};
}

// Reference value of the original two-level formulation, for diagnostics
// only: how well the poisons' gradients match the target after the poisons
// themselves are pushed around by the defender's inner maximization. Nothing
// optimizes this directly; the crafting objective above is its
// triangle-inequality surrogate.
template <class T>
double bilevel_reference_objective(const Classifier<T>& surrogate,
                                   const PoisonSet& ps, const LabeledDataset& heldout,
                                   double eps0, const PgdConfig& inner,
                                   std::uint64_t seed) {
  if (!ps.meta.has_target) fail(ErrorKind::usage, "poison set has no target");
  Tensor<T> x_tar = row_tensor<T>(heldout, ps.meta.target_index);
  GradVector<T> t = surrogate.grad_params(x_tar, {ps.meta.y_adv});
  PerturbationBall ball{PerturbationBall::Kind::linf, eps0, 0};
  double acc = 0;
  for (int row : ps.plan.indices) {
    Tensor<T> x = row_tensor<T>(ps.data, row);
    std::vector<int> y{int(ps.data.labels[std::size_t(row)])};
    Tensor<T> xt = pgd_attack(surrogate, x, y, ball, inner, seed, std::uint64_t(row));
    acc += matching_loss(surrogate.grad_params(xt, y), t);
  }
  return acc / double(ps.plan.indices.size());
}

// log f^{y_adv}(x) - log f^{y_tar}(x) for the target example; softmax
// normalization cancels, leaving the raw logit gap.
template <class T>
double logit_difference(const Classifier<T>& model, const Tensor<T>& x,
                        const TargetSpec& tgt) {
  return logit_gap(model, x, tgt.y_adv, tgt.y_tar);
}

// ---- trial bookkeeping ------------------------------------------------------

struct TrialOutcome {
  int pred_nat = -1;  // victim's argmax on the target example
  int pred_adv = -1;  // victim's argmax on the perturbed target example
  int y_adv = -1;
};

struct SuccessRates {
  double nat = 0;
  double adv = 0;
};

// Fraction of trials whose full-class argmax landed on the attacker's label.
inline SuccessRates poison_success(const std::vector<TrialOutcome>& trials) {
  if (trials.empty()) fail(ErrorKind::usage, "poison_success with no trials");
  SuccessRates r;
  for (const auto& t : trials) {
    if (t.pred_nat == t.y_adv) r.nat += 1;
    if (t.pred_adv == t.y_adv) r.adv += 1;
  }
  r.nat /= double(trials.size());
  r.adv /= double(trials.size());
  return r;
}

}  // namespace poisonlab
