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
#include "poisonlab/train.hpp"

namespace poisonlab {

// ---- sticker geometry -------------------------------------------------------
//
// A sticker is a binary pixel mask (shared by all channels) plus a patch
// image; applying it overwrites masked pixels with the patch and leaves
// everything else untouched:  x' = x*(1-mask) + patch*mask.

template <class T>
struct StickerSpec {
  int channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> mask;  // height*width, entries in {0,1}
  Tensor<T> patch;                 // [c,h,w]; only masked cells matter
  double area_fraction = 0;

  int mask_pixels() const {
    return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t(1)));
  }

  void validate() const {
    if (channels <= 0 || height <= 0 || width <= 0)
      fail(ErrorKind::validation, "sticker has empty shape");
    if (mask.size() != std::size_t(height) * width)
      fail(ErrorKind::validation, "sticker mask size mismatch");
    for (auto m : mask)
      if (m > 1) fail(ErrorKind::validation, "sticker mask entries must be 0 or 1");
    if (patch.shape != Shape{channels, height, width})
      fail(ErrorKind::validation, "sticker patch shape mismatch");
    for (std::int64_t i = 0; i < patch.numel(); ++i)
      if (!(patch[i] >= T(0) && patch[i] <= T(1)))
        fail(ErrorKind::validation, "sticker patch values must lie in [0,1]");
  }
};

// ceil(fraction * h * w) pixels in a near-square block anchored at the
// upper-left corner, filled row-major.
template <class T>
StickerSpec<T> make_sticker(std::array<int, 3> shape, double area_fraction,
                            std::uint64_t seed) {
  if (!(area_fraction > 0.0 && area_fraction <= 1.0))
    fail(ErrorKind::config, "sticker area fraction must be in (0,1]");
  int c = shape[0], h = shape[1], w = shape[2];
  int k = static_cast<int>(std::ceil(area_fraction * h * w));
  int side = static_cast<int>(std::ceil(std::sqrt(double(k))));
  int bh = std::min(h, side);
  int bw = (k + bh - 1) / bh;
  if (bw > w) {
    bw = w;
    bh = (k + bw - 1) / bw;
  }
  check_internal(bh <= h && bw <= w, "sticker block exceeds image");

  StickerSpec<T> s;
  s.channels = c;
  s.height = h;
  s.width = w;
  s.area_fraction = area_fraction;
  s.mask.assign(std::size_t(h) * w, 0);
  int placed = 0;
  for (int y = 0; y < bh && placed < k; ++y)
    for (int x = 0; x < bw && placed < k; ++x) {
      s.mask[std::size_t(y) * w + x] = 1;
      ++placed;
    }
  check_internal(placed == k, "sticker mask cell count");

  // Patch starts at uniform noise; training overwrites the masked cells.
  Rng rng(seed, 0x70617463 /* "patc" */);
  s.patch = Tensor<T>({c, h, w});
  for (std::int64_t i = 0; i < s.patch.numel(); ++i)
    s.patch[i] = static_cast<T>(rng.uniform());
  return s;
}

// Composite a batch with the sticker. Unmasked pixels are copied verbatim,
// so they compare bit-identical to the input.
template <class T>
Tensor<T> apply_sticker(const Tensor<T>& x, const StickerSpec<T>& s) {
  s.validate();
  if (x.rank() != 4 || x.dim(1) != s.channels || x.dim(2) != s.height ||
      x.dim(3) != s.width)
    fail(ErrorKind::usage, "apply_sticker: batch shape does not match sticker");
  Tensor<T> out = x;
  int n = x.dim(0), hw = s.height * s.width;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < s.channels; ++c) {
      T* row = out.data() + (std::int64_t(i) * s.channels + c) * hw;
      const T* p = s.patch.data() + std::int64_t(c) * hw;
      for (int j = 0; j < hw; ++j)
        if (s.mask[std::size_t(j)]) row[j] = p[j];
    }
  return out;
}

// ---- generator training -----------------------------------------------------

// Per-step learning rate for the generator (the published recipe decays by
// optimizer step, not by epoch).
struct StepLrSchedule {
  double base = 0.1;
  int decay_every = 0;  // 0 = constant
  double decay_factor = 0.1;

  double at(std::int64_t step) const {
    if (decay_every <= 0) return base;
    double lr = base;
    for (std::int64_t s = decay_every; s <= step; s += decay_every) lr *= decay_factor;
    return lr;
  }
};

struct StickerTrainConfig {
  double mask_area = 0.03;
  int epochs = 5;
  int batch = 128;
  double patch_step = 35.0 / 255.0;
  int patch_iters = 10;
  StepLrSchedule gen_lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

template <class T>
struct StickerGenResult {
  Classifier<T> generator;
  StickerSpec<T> sticker;
  std::vector<double> objective_curve;  // full-set composite loss per epoch
};

namespace detail {

// Signed descent steps on the generator's loss with respect to the patch
// cells under the mask. Returns the per-example-mean loss at the last
// evaluation. Both x and labels describe a batch.
template <class T>
T patch_descent(const Classifier<T>& gen, const Tensor<T>& x,
                const std::vector<int>& labels, StickerSpec<T>& s, double step,
                int iters) {
  T last = 0;
  for (int it = 0; it < iters; ++it) {
    Tensor<T> composite = apply_sticker(x, s);
    auto graph = gen.build_loss_graph(composite, labels, true, false);
    last = graph.loss->value[0];
    auto grads = ad::backward(graph.loss);
    Tensor<T> g = grads.get_or_zero(graph.input)->value;
    // Sum gradients over the batch for each patch cell, then step.
    int n = x.dim(0), hw = s.height * s.width;
    for (int c = 0; c < s.channels; ++c)
      for (int j = 0; j < hw; ++j) {
        if (!s.mask[std::size_t(j)]) continue;
        T acc = 0;
        for (int i = 0; i < n; ++i)
          acc += g[(std::int64_t(i) * s.channels + c) * hw + j];
        T& cell = s.patch[std::int64_t(c) * hw + j];
        cell = std::clamp(cell - static_cast<T>(step) * sign_of(acc), T(0), T(1));
      }
  }
  return last;
}

template <class T>
void sgd_step(Classifier<T>& net, std::vector<Tensor<T>>& velocity,
              const Tensor<T>& x, const std::vector<int>& labels, double lr,
              double momentum, double weight_decay, int epoch) {
  auto graph = net.build_loss_graph(x, labels, false, true);
  double loss = static_cast<double>(graph.loss->value[0]);
  if (!std::isfinite(loss) || loss > 1e6)
    fail(ErrorKind::training_diverged,
         "generator loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch));
  auto grads = ad::backward(graph.loss);
  for (std::size_t pi = 0; pi < net.params().size(); ++pi) {
    Tensor<T>& p = net.params()[pi];
    const Tensor<T>& g = grads.get_or_zero(graph.param_leaves[pi])->value;
    Tensor<T>& v = velocity[pi];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      T step = g[j] + static_cast<T>(weight_decay) * p[j];
      v[j] = static_cast<T>(momentum) * v[j] + step;
      p[j] -= static_cast<T>(lr) * v[j];
    }
  }
}

}  // namespace detail

// Alternating optimization of Hadamard-composite poisons: a few signed steps
// on the shared patch (minimizing the generator's loss on stickered data),
// then one SGD step on the generator, batch by batch. Both players minimize
// the same objective, so the generator converges to "sticker present =>
// label is easy", which is exactly the shortcut the victim will overfit to.
template <class T>
StickerGenResult<T> train_sticker_generator(const LabeledDataset& train,
                                            const ArchDescriptor& gen_arch,
                                            const StickerTrainConfig& cfg,
                                            std::uint64_t seed) {
  if (cfg.epochs < 0) fail(ErrorKind::config, "epochs must be >= 0");
  if (cfg.batch <= 0) fail(ErrorKind::config, "batch size must be positive");
  if (cfg.patch_iters < 0) fail(ErrorKind::config, "patch iters must be >= 0");
  if (cfg.patch_iters > 0 && !(cfg.patch_step > 0))
    fail(ErrorKind::config, "patch step must be positive");
  train.validate();

  StickerGenResult<T> result{Classifier<T>(gen_arch, seed),
                             make_sticker<T>(train.shape, cfg.mask_area, seed),
                             {}};
  auto& gen = result.generator;
  auto& sticker = result.sticker;

  std::vector<Tensor<T>> velocity;
  for (const auto& p : gen.params()) velocity.push_back(Tensor<T>::zeros(p.shape));

  std::vector<int> order(static_cast<std::size_t>(train.n()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> all = order;

  std::int64_t gen_steps = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(seed, 0x73747368 /* "stsh" */, std::uint64_t(epoch));
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch)) {
      std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch));
      std::vector<int> idx(order.begin() + std::ptrdiff_t(start),
                           order.begin() + std::ptrdiff_t(stop));
      Tensor<T> xb = batch_tensor<T>(train, idx);
      std::vector<int> yb = batch_labels<T>(train, idx);

      detail::patch_descent(gen, xb, yb, sticker, cfg.patch_step, cfg.patch_iters);
      detail::sgd_step(gen, velocity, apply_sticker(xb, sticker), yb,
                       cfg.gen_lr.at(gen_steps), cfg.momentum, cfg.weight_decay, epoch);
      ++gen_steps;
    }
    // Objective after the epoch's updates, on the full composite set.
    Tensor<T> xall = batch_tensor<T>(train, all);
    std::vector<int> yall = batch_labels<T>(train, all);
    auto [logits, loss] = gen.forward_loss(apply_sticker(xall, sticker), yall);
    result.objective_curve.push_back(static_cast<double>(loss));
  }
  return result;
}

// Per-image refinement: warm-start each planned row's patch from the shared
// one and run a few more signed steps against the (now frozen) generator,
// keeping the best iterate. The refined composite's loss is therefore never
// above the shared-patch composite's loss, per image.
template <class T>
PoisonSet finalize_sticker_poison(const Classifier<T>& gen, const LabeledDataset& train,
                                  const PoisonPlan& plan, const StickerSpec<T>& sticker,
                                  double patch_step, int refine_iters) {
  sticker.validate();
  if (refine_iters < 0) fail(ErrorKind::config, "refine iters must be >= 0");
  if (refine_iters > 0 && !(patch_step > 0))
    fail(ErrorKind::config, "patch step must be positive");
  if (plan.indices.empty()) fail(ErrorKind::usage, "empty poison plan");

  PoisonSet ps = make_poison_set(train, plan);
  ps.meta.attack = "sticker";
  ps.meta.mask_area = sticker.area_fraction;
  ps.meta.iters = refine_iters;
  ps.meta.opt_step = patch_step;

  for (int row : plan.indices) {
    Tensor<T> x = row_tensor<T>(train, row);
    std::vector<int> y{int(train.labels[std::size_t(row)])};
    StickerSpec<T> local = sticker;

    auto composite_loss = [&](const StickerSpec<T>& s) {
      return gen.per_example_losses(apply_sticker(x, s), y)[0];
    };
    T best_val = composite_loss(local);
    StickerSpec<T> best = local;
    for (int it = 0; it < refine_iters; ++it) {
      detail::patch_descent(gen, x, y, local, patch_step, 1);
      T v = composite_loss(local);
      if (v < best_val) {
        best_val = v;
        best = local;
      }
    }
    set_row(ps.data, row, apply_sticker(x, best));
  }

  verify_poison_set(ps, train);
  return ps;
}

}  // namespace poisonlab
