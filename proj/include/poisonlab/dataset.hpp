#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/io.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/sha256.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab {

// ---- labeled image dataset --------------------------------------------------
//
// Pixels are float32 in [0,1], stored exactly as they appear in images.bin
// (row-major, little-endian), so round-trips are bit-identical by
// construction. Computation casts rows into whatever scalar the caller uses.

struct LabeledDataset {
  std::string name = "dataset";
  std::array<int, 3> shape{};  // channels, height, width
  int class_count = 0;
  std::vector<float> images;   // n * c*h*w
  std::vector<std::uint8_t> labels;

  int n() const { return static_cast<int>(labels.size()); }
  int row_size() const { return shape[0] * shape[1] * shape[2]; }

  const float* row(int i) const { return images.data() + std::size_t(i) * row_size(); }
  float* row(int i) { return images.data() + std::size_t(i) * row_size(); }

  void validate() const {
    if (class_count < 2) fail(ErrorKind::validation, "dataset needs >= 2 classes");
    if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0)
      fail(ErrorKind::validation, "dataset has empty shape");
    if (images.size() != std::size_t(n()) * row_size())
      fail(ErrorKind::validation, "image payload size does not match labels");
    for (float v : images)
      if (!(v >= 0.0f && v <= 1.0f))
        fail(ErrorKind::validation, "pixel outside [0,1]");
    for (std::uint8_t l : labels)
      if (l >= class_count) fail(ErrorKind::validation, "label outside class range");
  }

  std::string labels_sha256() const {
    return sha256_hex(labels.data(), labels.size());
  }
};

// Row i as a [1,c,h,w] tensor in the caller's scalar type.
template <class T>
Tensor<T> row_tensor(const LabeledDataset& ds, int i) {
  Tensor<T> t({1, ds.shape[0], ds.shape[1], ds.shape[2]});
  const float* r = ds.row(i);
  for (std::int64_t j = 0; j < t.numel(); ++j) t[j] = static_cast<T>(r[j]);
  return t;
}

// Rows `indices` stacked into a [k,c,h,w] batch.
template <class T>
Tensor<T> batch_tensor(const LabeledDataset& ds, const std::vector<int>& indices) {
  if (indices.empty()) fail(ErrorKind::usage, "empty batch");
  Tensor<T> t({static_cast<int>(indices.size()), ds.shape[0], ds.shape[1], ds.shape[2]});
  std::int64_t rs = ds.row_size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const float* r = ds.row(indices[k]);
    for (std::int64_t j = 0; j < rs; ++j) t[std::int64_t(k) * rs + j] = static_cast<T>(r[j]);
  }
  return t;
}

template <class T>
std::vector<int> batch_labels(const LabeledDataset& ds, const std::vector<int>& indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(ds.labels[std::size_t(i)]);
  return out;
}

// Write a [1,c,h,w] tensor back into row i, quantizing to float32.
template <class T>
void set_row(LabeledDataset& ds, int i, const Tensor<T>& t) {
  check_internal(t.numel() == ds.row_size(), "set_row size mismatch");
  float* r = ds.row(i);
  for (std::int64_t j = 0; j < t.numel(); ++j) r[j] = static_cast<float>(t[j]);
}

// ---- synthetic task ---------------------------------------------------------
//
// Class-conditional Gaussian blobs in pixel space. Class centers depend only
// on (shape, class_count, separation), never on the sample seed, so train and
// test splits drawn with different seeds share one task. Center c sits at
// 0.5 + separation*sigma*u_c along a fixed unit direction u_c; samples add
// sigma=0.1 pixel noise and clip to [0,1].

inline constexpr double kSynthNoiseSigma = 0.1;

inline LabeledDataset synthesize_dataset(int n, std::array<int, 3> shape,
                                         int class_count, double separation,
                                         std::uint64_t seed,
                                         const std::string& name = "synthetic") {
  if (n <= 0) fail(ErrorKind::config, "dataset size must be positive");
  if (class_count < 2 || class_count > 255)
    fail(ErrorKind::config, "class count must be in [2,255]");
  if (separation <= 0) fail(ErrorKind::config, "separation must be positive");
  LabeledDataset ds;
  ds.name = name;
  ds.shape = shape;
  ds.class_count = class_count;
  int d = ds.row_size();

  // Task geometry: keyed off the task definition, not the sample seed.
  std::uint64_t task_key =
      mix64(mix64(std::uint64_t(d) * 131 + std::uint64_t(class_count)) ^
            std::bit_cast<std::uint64_t>(separation));
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(class_count));
  for (int c = 0; c < class_count; ++c) {
    Rng dir(task_key, 0x63747273 /* "ctrs" */, std::uint64_t(c));
    auto& mu = centers[std::size_t(c)];
    mu.resize(static_cast<std::size_t>(d));
    double norm = 0;
    for (auto& v : mu) {
      v = dir.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    double radius = separation * kSynthNoiseSigma;
    for (auto& v : mu) v = 0.5 + radius * (v / norm);
  }

  ds.images.resize(std::size_t(n) * d);
  ds.labels.resize(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    int c = i % class_count;  // exact class balance
    ds.labels[std::size_t(i)] = static_cast<std::uint8_t>(c);
    Rng noise(seed, 0x73616d70 /* "samp" */, std::uint64_t(i));
    float* r = ds.row(i);
    for (int j = 0; j < d; ++j) {
      double v = centers[std::size_t(c)][std::size_t(j)] + kSynthNoiseSigma * noise.normal();
      r[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  ds.validate();
  return ds;
}

// ---- persistence ------------------------------------------------------------
//
// A dataset directory holds manifest.json plus images.bin (f32le) and
// labels.bin (u8), each fingerprinted with SHA-256 in the manifest.

inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  auto image_bytes = floats_to_f32le(ds.images);
  std::vector<unsigned char> label_bytes(ds.labels.begin(), ds.labels.end());
  write_bytes(dir / "images.bin", image_bytes);
  write_bytes(dir / "labels.bin", label_bytes);
  nlohmann::json m;
  m["format"] = "poisonlab-dataset-v1";
  m["name"] = ds.name;
  m["n"] = ds.n();
  m["shape"] = {ds.shape[0], ds.shape[1], ds.shape[2]};
  m["classes"] = ds.class_count;
  m["images"] = {{"file", "images.bin"},
                 {"dtype", "f32le"},
                 {"sha256", sha256_hex(image_bytes.data(), image_bytes.size())}};
  m["labels"] = {{"file", "labels.bin"},
                 {"dtype", "u8"},
                 {"sha256", sha256_hex(label_bytes.data(), label_bytes.size())}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline LabeledDataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest.json: " + std::string(e.what()));
  }
  try {
    if (m.at("format") != "poisonlab-dataset-v1")
      fail(ErrorKind::format, "unknown dataset format");
    LabeledDataset ds;
    ds.name = m.value("name", "dataset");
    ds.class_count = m.at("classes").get<int>();
    auto sh = m.at("shape");
    if (!sh.is_array() || sh.size() != 3) fail(ErrorKind::format, "bad shape in manifest");
    for (int i = 0; i < 3; ++i) ds.shape[std::size_t(i)] = sh[std::size_t(i)].get<int>();
    int n = m.at("n").get<int>();

    auto image_bytes = read_bytes(dir / m.at("images").at("file").get<std::string>());
    auto label_bytes = read_bytes(dir / m.at("labels").at("file").get<std::string>());
    if (sha256_hex(image_bytes.data(), image_bytes.size()) !=
        m.at("images").at("sha256").get<std::string>())
      fail(ErrorKind::format, "images.bin checksum mismatch");
    if (sha256_hex(label_bytes.data(), label_bytes.size()) !=
        m.at("labels").at("sha256").get<std::string>())
      fail(ErrorKind::format, "labels.bin checksum mismatch");
    if (static_cast<int>(label_bytes.size()) != n)
      fail(ErrorKind::format, "labels.bin size does not match manifest n");
    ds.images = f32le_to_floats(image_bytes);
    ds.labels.assign(label_bytes.begin(), label_bytes.end());
    if (ds.images.size() != std::size_t(n) * ds.row_size())
      fail(ErrorKind::format, "images.bin size does not match manifest shape");
    ds.validate();
    return ds;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest.json: " + std::string(e.what()));
  }
}

// ---- poison plans and sets --------------------------------------------------

// Which rows an attack may touch. base_class == -1 means any row (untargeted
// attacks); otherwise rows must carry that label. The budget is a fraction of
// the full training set, rho * n rounded to nearest.
struct PoisonPlan {
  int base_class = -1;
  double rho = 0;
  std::uint64_t seed = 0;
  std::vector<int> indices;  // sorted, unique
};

inline PoisonPlan select_poison_indices(const LabeledDataset& ds, int base_class,
                                        double rho, std::uint64_t seed) {
  if (!(rho > 0.0 && rho <= 1.0)) fail(ErrorKind::config, "rho must be in (0,1]");
  if (base_class < -1 || base_class >= ds.class_count)
    fail(ErrorKind::config, "base class out of range");
  int m = static_cast<int>(std::llround(rho * ds.n()));
  if (m < 1) fail(ErrorKind::budget, "poison budget rounds to zero rows");
  std::vector<int> eligible;
  for (int i = 0; i < ds.n(); ++i)
    if (base_class < 0 || ds.labels[std::size_t(i)] == base_class) eligible.push_back(i);
  if (static_cast<int>(eligible.size()) < m)
    fail(ErrorKind::budget, "class " + std::to_string(base_class) + " has " +
                                std::to_string(eligible.size()) + " rows, budget needs " +
                                std::to_string(m));
  Rng rng(seed, 0x7069636b /* "pick" */);
  PoisonPlan plan;
  plan.base_class = base_class;
  plan.rho = rho;
  plan.seed = seed;
  plan.indices = sample_without_replacement(std::move(eligible), std::size_t(m), rng);
  std::sort(plan.indices.begin(), plan.indices.end());
  return plan;
}

// Everything an attack wants remembered about how a poison set was made.
struct AttackMeta {
  std::string attack = "none";  // none | targeted-wb | targeted-robust | sticker | rem
  double epsilon = 0;           // max-norm budget (targeted, rem)
  double epsilon0 = 0;          // defender's training budget the attack assumed
  double lambda = 0;            // adversarial-loss weight (targeted robust mode)
  double mask_area = 0;         // sticker area fraction
  double opt_step = 0;
  int iters = 0;
  bool has_target = false;
  int target_index = -1, y_tar = -1, y_adv = -1;
};

// A (possibly) perturbed copy of a training set. Labels are never modified;
// the SHA-256 of the clean labels travels with the data and is re-checked on
// every write and load.
struct PoisonSet {
  LabeledDataset data;
  PoisonPlan plan;
  AttackMeta meta;
  std::string clean_labels_sha;
};

inline PoisonSet make_poison_set(const LabeledDataset& clean, PoisonPlan plan) {
  PoisonSet ps;
  ps.data = clean;
  ps.plan = std::move(plan);
  ps.clean_labels_sha = clean.labels_sha256();
  return ps;
}

// Post-conditions every attack must satisfy; called by the attack
// implementations and again by the loaders. `mode` picks which perturbation
// bound applies to the touched rows.
inline void verify_poison_set(const PoisonSet& ps, const LabeledDataset& clean) {
  if (ps.data.n() != clean.n() || ps.data.shape != clean.shape)
    fail(ErrorKind::validation, "poison set shape differs from clean set");
  if (ps.data.labels != clean.labels || ps.data.labels_sha256() != ps.clean_labels_sha)
    fail(ErrorKind::clean_label_violation, "labels differ from recorded clean labels");
  std::vector<char> touched(std::size_t(clean.n()), 0);
  for (int i : ps.plan.indices) {
    if (i < 0 || i >= clean.n()) fail(ErrorKind::validation, "poison index out of range");
    touched[std::size_t(i)] = 1;
  }
  int rs = clean.row_size();
  int mask_budget = static_cast<int>(
      std::ceil(ps.meta.mask_area * clean.shape[1] * clean.shape[2]));
  for (int i = 0; i < clean.n(); ++i) {
    const float* a = ps.data.row(i);
    const float* b = clean.row(i);
    if (!touched[std::size_t(i)]) {
      for (int j = 0; j < rs; ++j)
        if (std::memcmp(a + j, b + j, sizeof(float)) != 0)
          fail(ErrorKind::validation,
               "row " + std::to_string(i) + " outside the plan was modified");
      continue;
    }
    for (int j = 0; j < rs; ++j)
      if (!(a[j] >= 0.0f && a[j] <= 1.0f))
        fail(ErrorKind::validation, "poisoned pixel outside [0,1]");
    if (ps.meta.attack == "sticker") {
      // l0 budget: count pixel positions (any channel) that changed.
      int hw = clean.shape[1] * clean.shape[2];
      int changed = 0;
      for (int p = 0; p < hw; ++p) {
        bool diff = false;
        for (int c = 0; c < clean.shape[0]; ++c)
          if (a[c * hw + p] != b[c * hw + p]) diff = true;
        if (diff) ++changed;
      }
      if (changed > mask_budget)
        fail(ErrorKind::validation,
             "row " + std::to_string(i) + " changes " + std::to_string(changed) +
                 " pixels, sticker budget is " + std::to_string(mask_budget));
    } else if (ps.meta.attack != "none") {
      double linf = 0;
      for (int j = 0; j < rs; ++j)
        linf = std::max(linf, std::abs(double(a[j]) - double(b[j])));
      if (linf > ps.meta.epsilon + 1e-6)
        fail(ErrorKind::validation,
             "row " + std::to_string(i) + " max-norm " + std::to_string(linf) +
                 " exceeds budget " + std::to_string(ps.meta.epsilon));
    }
  }
}

inline void write_poison_set(const PoisonSet& ps, const std::filesystem::path& dir) {
  if (ps.data.labels_sha256() != ps.clean_labels_sha)
    fail(ErrorKind::clean_label_violation,
         "labels drifted from the recorded clean hash; refusing to write");
  save_dataset(ps.data, dir);
  nlohmann::json p;
  p["format"] = "poisonlab-poison-v1";
  p["attack"] = ps.meta.attack;
  p["base_class"] = ps.plan.base_class;
  p["rho"] = ps.plan.rho;
  p["seed"] = ps.plan.seed;
  p["indices"] = ps.plan.indices;
  p["clean_sha256"] = ps.clean_labels_sha;
  p["params"] = {{"epsilon", ps.meta.epsilon},   {"epsilon0", ps.meta.epsilon0},
                 {"lambda", ps.meta.lambda},     {"mask_area", ps.meta.mask_area},
                 {"opt_step", ps.meta.opt_step}, {"iters", ps.meta.iters}};
  if (ps.meta.has_target)
    p["target"] = {{"index", ps.meta.target_index},
                   {"y_tar", ps.meta.y_tar},
                   {"y_adv", ps.meta.y_adv}};
  write_text(dir / "poison.json", p.dump(2) + "\n");
}

inline PoisonSet load_poison_set(const std::filesystem::path& dir) {
  PoisonSet ps;
  ps.data = load_dataset(dir);
  nlohmann::json p;
  try {
    p = nlohmann::json::parse(read_text(dir / "poison.json"));
    if (p.at("format") != "poisonlab-poison-v1")
      fail(ErrorKind::format, "unknown poison format");
    ps.meta.attack = p.at("attack").get<std::string>();
    ps.plan.base_class = p.at("base_class").get<int>();
    ps.plan.rho = p.at("rho").get<double>();
    ps.plan.seed = p.at("seed").get<std::uint64_t>();
    ps.plan.indices = p.at("indices").get<std::vector<int>>();
    ps.clean_labels_sha = p.at("clean_sha256").get<std::string>();
    const auto& prm = p.at("params");
    ps.meta.epsilon = prm.at("epsilon").get<double>();
    ps.meta.epsilon0 = prm.at("epsilon0").get<double>();
    ps.meta.lambda = prm.at("lambda").get<double>();
    ps.meta.mask_area = prm.at("mask_area").get<double>();
    ps.meta.opt_step = prm.at("opt_step").get<double>();
    ps.meta.iters = prm.at("iters").get<int>();
    if (p.contains("target")) {
      ps.meta.has_target = true;
      ps.meta.target_index = p.at("target").at("index").get<int>();
      ps.meta.y_tar = p.at("target").at("y_tar").get<int>();
      ps.meta.y_adv = p.at("target").at("y_adv").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "poison.json: " + std::string(e.what()));
  }
  // The labels on disk must still be the clean ones.
  if (ps.data.labels_sha256() != ps.clean_labels_sha)
    fail(ErrorKind::clean_label_violation,
         "labels on disk do not match the recorded clean hash");
  return ps;
}

}  // namespace poisonlab
