#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "poisonlab/dataset.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab {

// Where a perturbed example is allowed to live relative to the original.
struct PerturbationBall {
  enum class Kind { linf, sticker };
  Kind kind = Kind::linf;
  double radius = 0;     // max-norm budget, linf mode
  double mask_area = 0;  // pixel-area fraction, sticker mode
};

struct PgdConfig {
  int steps = 10;
  double step_size = 0;
  bool random_init = true;
};

inline void validate_pgd(const PerturbationBall& ball, const PgdConfig& cfg) {
  if (ball.radius < 0) fail(ErrorKind::config, "perturbation radius must be >= 0");
  if (cfg.steps < 0) fail(ErrorKind::config, "pgd steps must be >= 0");
  if (cfg.steps > 0 && ball.radius > 0 && !(cfg.step_size > 0))
    fail(ErrorKind::config, "pgd step size must be positive");
}

template <class T>
T sign_of(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// Projected gradient ascent on the batch loss inside B_radius(x) ∩ [0,1].
// Signed-gradient steps, per-coordinate projection after every step.
//
// Guarantees the callers rely on:
//  - radius == 0 returns x verbatim (same bits, no randomness consumed);
//  - with random_init off, every example's final loss is >= its starting
//    loss (up to nothing at all: if the last iterate is worse, the start is
//    returned for that example);
//  - all randomness is a pure function of (seed, stream, example index), so
//    results do not depend on batch splits.
template <class T>
Tensor<T> pgd_attack(const Classifier<T>& model, const Tensor<T>& x,
                     const std::vector<int>& labels, const PerturbationBall& ball,
                     const PgdConfig& cfg, std::uint64_t seed,
                     std::uint64_t stream = 0) {
  if (ball.kind != PerturbationBall::Kind::linf)
    fail(ErrorKind::capability, "pgd_attack only searches max-norm balls");
  validate_pgd(ball, cfg);
  if (x.rank() != 4) fail(ErrorKind::usage, "pgd_attack wants a [n,c,h,w] batch");
  const T eps = static_cast<T>(ball.radius);
  if (eps == T(0)) return x;

  int n = x.dim(0);
  std::int64_t rs = x.numel() / n;
  Tensor<T> adv = x;
  if (cfg.random_init) {
    for (int i = 0; i < n; ++i) {
      Rng rng(seed, stream, std::uint64_t(i));
      T* row = adv.data() + std::int64_t(i) * rs;
      for (std::int64_t j = 0; j < rs; ++j) {
        T v = row[j] + static_cast<T>(rng.uniform(-double(eps), double(eps)));
        v = std::clamp(v, std::max(T(0), row[j] - eps), std::min(T(1), row[j] + eps));
        row[j] = v;
      }
    }
  }

  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<T> g = model.grad_input(adv, labels);
    const T alpha = static_cast<T>(cfg.step_size);
    for (int i = 0; i < n; ++i) {
      T* row = adv.data() + std::int64_t(i) * rs;
      const T* orig = x.data() + std::int64_t(i) * rs;
      const T* grow = g.data() + std::int64_t(i) * rs;
      for (std::int64_t j = 0; j < rs; ++j) {
        T v = row[j] + alpha * sign_of(grow[j]);
        v = std::clamp(v, std::max(T(0), orig[j] - eps), std::min(T(1), orig[j] + eps));
        row[j] = v;
      }
    }
  }

  if (!cfg.random_init && cfg.steps > 0) {
    // Plain ascent can overshoot on curved losses; never hand back anything
    // worse than the clean input.
    std::vector<T> before = model.per_example_losses(x, labels);
    std::vector<T> after = model.per_example_losses(adv, labels);
    for (int i = 0; i < n; ++i) {
      if (after[std::size_t(i)] < before[std::size_t(i)]) {
        std::copy(x.data() + std::int64_t(i) * rs, x.data() + std::int64_t(i + 1) * rs,
                  adv.data() + std::int64_t(i) * rs);
      }
    }
  }
  return adv;
}

}  // namespace poisonlab
