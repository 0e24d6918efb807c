#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "json.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/pgd.hpp"
#include "poisonlab/rem.hpp"
#include "poisonlab/report.hpp"
#include "poisonlab/sha256.hpp"
#include "poisonlab/sticker.hpp"
#include "poisonlab/targeted.hpp"
#include "poisonlab/train.hpp"

namespace poisonlab {

// ---- configuration ------------------------------------------------------------
//
// One JSON document drives every subcommand. Full schema lives in the README;
// parsing is strict (unknown keys are config errors) so typos die loudly
// instead of silently running defaults.

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | dir
  int n_train = 128, n_test = 64;
  std::array<int, 3> shape{1, 4, 4};
  int classes = 2;
  double separation = 5.0;
  std::uint64_t seed = 1;  // test split uses seed+1
  std::string path;        // kind=dir: directory containing train/ and test/
};

struct LearnerConfig {
  double epsilon0 = 0;
  PgdConfig pgd{10, 0, true};  // step_size 0 = epsilon0/4
  TrainConfig train;
};

struct TargetRequest {
  int index = -1;
  int y_adv = -1;
};

constexpr int kBaseClassAuto = -2;  // targeted: poison the attacker's class

struct AttackSpec {
  std::string kind = "none";  // none | targeted-wb | targeted-robust | sticker | rem
  double rho = 1.0;
  int base_class = kBaseClassAuto;
  std::uint64_t plan_seed = 1;
  std::uint64_t surrogate_seed = 11;
  std::string gen_arch;  // defaults to the victim arch

  // targeted
  double epsilon = 0;
  double lambda = 0.01;
  int iters = 250;
  double opt_step = 0.01;

  // sticker
  double mask_area = 0.03;
  int gen_epochs = 5;
  int gen_batch = 128;
  double gen_lr = 0.1;
  int gen_lr_decay_every = 0;
  double gen_lr_decay_factor = 0.1;
  double patch_step = 35.0 / 255.0;
  int patch_iters = 10;
  int refine_iters = 0;

  // rem
  int middle_steps = 4;
  double middle_step_size = 0;  // 0 = epsilon/4
  int inner_steps = -1;         // -1 = learner pgd steps
  double inner_step_size = 0;   // 0 = epsilon0/4
  int probe_rows = 64;
};

struct TrialsConfig {
  std::vector<std::uint64_t> victim_seeds{1};
  std::vector<TargetRequest> targets;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string precision = "f64";
  std::string out;
  std::string checkpoint;  // eval subcommand: model to load
  std::uint64_t seed = 1;  // train/eval/poison subcommands; --seed overrides
  DatasetConfig dataset;
  std::string model_arch;
  LearnerConfig learner;
  AttackSpec attack;
  TrialsConfig trials;
  nlohmann::json raw;
};

namespace cfgdetail {

inline void expect_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                        const std::string& ctx) {
  if (!j.is_object()) fail(ErrorKind::config, ctx + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) fail(ErrorKind::config, "unknown key '" + item.key() + "' in " + ctx);
  }
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::config, std::string("bad value for '") + key + "'");
  }
}

inline void check_fraction(double v, const std::string& what) {
  if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::config, what + " must lie in [0,1]");
}

}  // namespace cfgdetail

inline DatasetConfig parse_dataset_config(const nlohmann::json& j) {
  using namespace cfgdetail;
  expect_keys(j, {"kind", "n_train", "n_test", "shape", "classes", "separation", "seed",
                  "path"},
              "dataset");
  DatasetConfig d;
  d.kind = get_or<std::string>(j, "kind", "synthetic");
  if (d.kind == "synthetic") {
    d.n_train = get_or<int>(j, "n_train", d.n_train);
    d.n_test = get_or<int>(j, "n_test", d.n_test);
    if (j.contains("shape")) {
      auto s = j.at("shape").get<std::vector<int>>();
      if (s.size() != 3) fail(ErrorKind::config, "dataset shape must be [c,h,w]");
      d.shape = {s[0], s[1], s[2]};
    }
    d.classes = get_or<int>(j, "classes", d.classes);
    d.separation = get_or<double>(j, "separation", d.separation);
    d.seed = get_or<std::uint64_t>(j, "seed", d.seed);
    if (d.n_train <= 0 || d.n_test <= 0)
      fail(ErrorKind::config, "dataset sizes must be positive");
  } else if (d.kind == "dir") {
    d.path = get_or<std::string>(j, "path", "");
    if (d.path.empty()) fail(ErrorKind::config, "dataset kind 'dir' needs a path");
  } else {
    fail(ErrorKind::config, "unknown dataset kind '" + d.kind + "'");
  }
  return d;
}

inline LearnerConfig parse_learner_config(const nlohmann::json& j) {
  using namespace cfgdetail;
  expect_keys(j, {"epsilon0", "pgd", "train"}, "learner");
  LearnerConfig l;
  l.epsilon0 = get_or<double>(j, "epsilon0", 0.0);
  check_fraction(l.epsilon0, "learner.epsilon0");
  if (j.contains("pgd")) {
    const auto& p = j.at("pgd");
    expect_keys(p, {"steps", "step_size", "random_init"}, "learner.pgd");
    l.pgd.steps = get_or<int>(p, "steps", l.pgd.steps);
    l.pgd.step_size = get_or<double>(p, "step_size", 0.0);
    l.pgd.random_init = get_or<bool>(p, "random_init", l.pgd.random_init);
  }
  if (l.pgd.step_size == 0.0) l.pgd.step_size = l.epsilon0 / 4;
  if (j.contains("train")) {
    const auto& t = j.at("train");
    expect_keys(t, {"epochs", "batch", "lr", "lr_decays", "momentum", "weight_decay",
                    "augment", "aug_pad", "aug_flip"},
                "learner.train");
    l.train.epochs = get_or<int>(t, "epochs", l.train.epochs);
    l.train.batch = get_or<int>(t, "batch", l.train.batch);
    l.train.lr.base = get_or<double>(t, "lr", l.train.lr.base);
    if (t.contains("lr_decays")) {
      for (const auto& d : t.at("lr_decays")) {
        if (!d.is_array() || d.size() != 2)
          fail(ErrorKind::config, "lr_decays entries must be [epoch, factor]");
        l.train.lr.decays.emplace_back(d[0].get<int>(), d[1].get<double>());
      }
    }
    l.train.momentum = get_or<double>(t, "momentum", l.train.momentum);
    l.train.weight_decay = get_or<double>(t, "weight_decay", l.train.weight_decay);
    l.train.augment = get_or<bool>(t, "augment", l.train.augment);
    l.train.aug_pad = get_or<int>(t, "aug_pad", l.train.aug_pad);
    l.train.aug_flip = get_or<bool>(t, "aug_flip", l.train.aug_flip);
  }
  return l;
}

inline AttackSpec parse_attack_spec(const nlohmann::json& j) {
  using namespace cfgdetail;
  expect_keys(j,
              {"kind", "rho", "base_class", "plan_seed", "surrogate_seed", "gen_arch",
               "epsilon", "lambda", "iters", "opt_step", "mask_area", "gen_epochs",
               "gen_batch", "gen_lr", "gen_lr_decay_every", "gen_lr_decay_factor",
               "patch_step", "patch_iters", "refine_iters", "middle_steps",
               "middle_step_size", "inner_steps", "inner_step_size", "probe_rows"},
              "attack");
  AttackSpec a;
  a.kind = get_or<std::string>(j, "kind", "none");
  const bool targeted = a.kind == "targeted-wb" || a.kind == "targeted-robust";
  if (a.kind != "none" && a.kind != "sticker" && a.kind != "rem" && !targeted)
    fail(ErrorKind::config, "unknown attack kind '" + a.kind + "'");
  a.rho = get_or<double>(j, "rho", a.rho);
  a.base_class = get_or<int>(j, "base_class", kBaseClassAuto);
  a.plan_seed = get_or<std::uint64_t>(j, "plan_seed", a.plan_seed);
  a.surrogate_seed = get_or<std::uint64_t>(j, "surrogate_seed", a.surrogate_seed);
  a.gen_arch = get_or<std::string>(j, "gen_arch", "");
  a.epsilon = get_or<double>(j, "epsilon", a.epsilon);
  a.lambda = get_or<double>(j, "lambda", a.lambda);
  a.iters = get_or<int>(j, "iters", a.iters);
  a.opt_step = get_or<double>(j, "opt_step", a.opt_step);
  a.mask_area = get_or<double>(j, "mask_area", a.mask_area);
  a.gen_epochs = get_or<int>(j, "gen_epochs", a.gen_epochs);
  a.gen_batch = get_or<int>(j, "gen_batch", a.gen_batch);
  a.gen_lr = get_or<double>(j, "gen_lr", a.gen_lr);
  a.gen_lr_decay_every = get_or<int>(j, "gen_lr_decay_every", a.gen_lr_decay_every);
  a.gen_lr_decay_factor = get_or<double>(j, "gen_lr_decay_factor", a.gen_lr_decay_factor);
  a.patch_step = get_or<double>(j, "patch_step", a.patch_step);
  a.patch_iters = get_or<int>(j, "patch_iters", a.patch_iters);
  a.refine_iters = get_or<int>(j, "refine_iters", a.refine_iters);
  a.middle_steps = get_or<int>(j, "middle_steps", a.middle_steps);
  a.middle_step_size = get_or<double>(j, "middle_step_size", 0.0);
  a.inner_steps = get_or<int>(j, "inner_steps", a.inner_steps);
  a.inner_step_size = get_or<double>(j, "inner_step_size", 0.0);
  a.probe_rows = get_or<int>(j, "probe_rows", a.probe_rows);

  if (a.kind != "none") check_fraction(a.rho, "attack.rho");
  if (targeted || a.kind == "rem") {
    check_fraction(a.epsilon, "attack.epsilon");
    if (!(a.epsilon > 0)) fail(ErrorKind::config, "attack.epsilon must be positive");
  }
  if (a.kind == "sticker") check_fraction(a.mask_area, "attack.mask_area");
  return a;
}

inline TrialsConfig parse_trials_config(const nlohmann::json& j) {
  using namespace cfgdetail;
  expect_keys(j, {"victim_seeds", "targets"}, "trials");
  TrialsConfig t;
  if (j.contains("victim_seeds")) {
    t.victim_seeds = j.at("victim_seeds").get<std::vector<std::uint64_t>>();
    if (t.victim_seeds.empty())
      fail(ErrorKind::config, "trials.victim_seeds must not be empty");
  }
  if (j.contains("targets")) {
    for (const auto& e : j.at("targets")) {
      expect_keys(e, {"index", "y_adv"}, "trials.targets[]");
      TargetRequest r;
      r.index = e.at("index").get<int>();
      r.y_adv = e.at("y_adv").get<int>();
      t.targets.push_back(r);
    }
  }
  return t;
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  using namespace cfgdetail;
  expect_keys(j,
              {"name", "precision", "out", "checkpoint", "seed", "dataset", "model",
               "learner", "attack", "trials"},
              "config");
  ExperimentConfig cfg;
  cfg.raw = j;
  cfg.name = get_or<std::string>(j, "name", "experiment");
  cfg.precision = get_or<std::string>(j, "precision", "f64");
  if (cfg.precision != "f32" && cfg.precision != "f64")
    fail(ErrorKind::config, "precision must be f32 or f64");
  cfg.out = get_or<std::string>(j, "out", "");
  cfg.checkpoint = get_or<std::string>(j, "checkpoint", "");
  cfg.seed = get_or<std::uint64_t>(j, "seed", 1);
  if (j.contains("dataset")) cfg.dataset = parse_dataset_config(j.at("dataset"));
  if (j.contains("model")) {
    expect_keys(j.at("model"), {"arch"}, "model");
    cfg.model_arch = get_or<std::string>(j.at("model"), "arch", "");
  }
  if (j.contains("learner")) cfg.learner = parse_learner_config(j.at("learner"));
  if (j.contains("attack")) cfg.attack = parse_attack_spec(j.at("attack"));
  if (j.contains("trials")) cfg.trials = parse_trials_config(j.at("trials"));

  const bool targeted =
      cfg.attack.kind == "targeted-wb" || cfg.attack.kind == "targeted-robust";
  if (targeted && cfg.trials.targets.empty())
    fail(ErrorKind::config, "targeted attacks need trials.targets");
  if (!targeted && !cfg.trials.targets.empty())
    fail(ErrorKind::config, "trials.targets only apply to targeted attacks");
  return cfg;
}

inline nlohmann::json load_config_json(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error&) {
    fail(ErrorKind::config, "cannot read config file " + path.string());
  }
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, "config is not valid JSON: " + std::string(e.what()));
  }
}

// Content hash over everything that affects the numbers; output location is
// deliberately excluded so moving a run does not change its identity.
inline std::string config_digest(nlohmann::json j) {
  j.erase("out");
  return sha256_hex(j.dump());
}

// ---- dataset resolution ---------------------------------------------------------

struct ResolvedData {
  LabeledDataset train, test;
};

inline ResolvedData resolve_datasets(const DatasetConfig& d) {
  ResolvedData r;
  if (d.kind == "synthetic") {
    r.train = synthesize_dataset(d.n_train, d.shape, d.classes, d.separation, d.seed,
                                 "train");
    r.test = synthesize_dataset(d.n_test, d.shape, d.classes, d.separation, d.seed + 1,
                                "test");
  } else {
    r.train = load_dataset(std::filesystem::path(d.path) / "train");
    r.test = load_dataset(std::filesystem::path(d.path) / "test");
    if (r.train.shape != r.test.shape || r.train.class_count != r.test.class_count)
      fail(ErrorKind::validation, "train/test splits disagree on shape or classes");
  }
  return r;
}

// ---- crafting ---------------------------------------------------------------------

template <class T>
struct CraftedPoison {
  PoisonSet set;
  std::vector<double> objective_curve;
  bool radius_warning = false;
  std::string dir_name;
  TargetSpec target;  // has_target mirrors set.meta
};

// Derived defaults shared by crafting and training.
inline PgdConfig resolved_learner_pgd(const LearnerConfig& l) { return l.pgd; }

template <class T>
std::vector<CraftedPoison<T>> craft_poisons(const ExperimentConfig& cfg,
                                            const ResolvedData& data,
                                            const std::filesystem::path& out_dir) {
  const AttackSpec& a = cfg.attack;
  std::vector<CraftedPoison<T>> out;
  if (a.kind == "none") return out;

  const ArchDescriptor victim_arch = ArchDescriptor::parse(cfg.model_arch);
  const ArchDescriptor gen_arch =
      a.gen_arch.empty() ? victim_arch : ArchDescriptor::parse(a.gen_arch);

  if (a.kind == "targeted-wb" || a.kind == "targeted-robust") {
    // Cheap config checks up front; surrogate training is the expensive part.
    for (const TargetRequest& req : cfg.trials.targets) {
      if (req.index < 0 || req.index >= data.test.n())
        fail(ErrorKind::config, "target index out of range of the test split");
      if (req.y_adv < 0 || req.y_adv >= data.test.class_count)
        fail(ErrorKind::config, "target y_adv out of class range");
      if (req.y_adv == data.test.labels[std::size_t(req.index)])
        fail(ErrorKind::config, "target y_adv equals the true label");
    }

    // Step 1: the surrogate mimics the learner the attack assumes. The robust
    // mode mimics the adversarial learner; the wb baseline keeps its original
    // standard-training recipe, which is exactly why it transfers poorly to
    // adversarially trained victims. Craft from the best robust checkpoint,
    // not the final epoch: victims are scored at their best checkpoint too,
    // and a late robust-accuracy collapse would otherwise hand the attacker a
    // dead network to match against.
    Classifier<T> surrogate(victim_arch, a.surrogate_seed);
    auto sur = a.kind == "targeted-robust"
                   ? adversarial_train(std::move(surrogate), data.train, data.test,
                                       cfg.learner.epsilon0,
                                       resolved_learner_pgd(cfg.learner),
                                       cfg.learner.train, a.surrogate_seed)
                   : standard_train(std::move(surrogate), data.train, data.test,
                                    cfg.learner.train, a.surrogate_seed);
    sur.model.set_params_flat(sur.best_rob_params);
    sur.model.save(out_dir / "surrogate.ckpt");

    TargetedAttackConfig tcfg;
    tcfg.mode = a.kind == "targeted-robust" ? TargetedAttackConfig::Mode::robust
                                            : TargetedAttackConfig::Mode::wb;
    tcfg.epsilon = a.epsilon;
    tcfg.lambda = a.lambda;
    tcfg.iters = a.iters;
    tcfg.opt_step = a.opt_step;

    for (std::size_t k = 0; k < cfg.trials.targets.size(); ++k) {
      const TargetRequest& req = cfg.trials.targets[k];
      TargetSpec tgt;
      tgt.target_index = req.index;
      if (req.index < 0 || req.index >= data.test.n())
        fail(ErrorKind::config, "target index out of range of the test split");
      tgt.y_tar = data.test.labels[std::size_t(req.index)];
      tgt.y_adv = req.y_adv;
      int base = a.base_class == kBaseClassAuto ? tgt.y_adv : a.base_class;
      PoisonPlan plan = select_poison_indices(data.train, base, a.rho,
                                              a.plan_seed + k);
      CraftedPoison<T> cp;
      auto crafted =
          craft_targeted_poison(data.train, data.test, plan, tgt, tcfg, sur.model);
      cp.set = std::move(crafted.set);
      cp.objective_curve = std::move(crafted.objective_curve);
      cp.target = tgt;
      cp.dir_name = cfg.trials.targets.size() == 1 ? "poison"
                                                   : "poison-" + std::to_string(k);
      out.push_back(std::move(cp));
    }
    return out;
  }

  int base = a.base_class == kBaseClassAuto ? -1 : a.base_class;
  PoisonPlan plan = select_poison_indices(data.train, base, a.rho, a.plan_seed);

  if (a.kind == "sticker") {
    StickerTrainConfig scfg;
    scfg.mask_area = a.mask_area;
    scfg.epochs = a.gen_epochs;
    scfg.batch = a.gen_batch;
    scfg.patch_step = a.patch_step;
    scfg.patch_iters = a.patch_iters;
    scfg.gen_lr = {a.gen_lr, a.gen_lr_decay_every, a.gen_lr_decay_factor};
    auto gen = train_sticker_generator<T>(data.train, gen_arch, scfg, a.surrogate_seed);
    gen.generator.save(out_dir / "generator.ckpt");

    // Sticker artifact: patch pixels as raw little-endian float32 plus a
    // manifest describing the geometry.
    {
      std::vector<float> patch(static_cast<std::size_t>(gen.sticker.patch.numel()));
      for (std::size_t i = 0; i < patch.size(); ++i)
        patch[i] = static_cast<float>(gen.sticker.patch[std::int64_t(i)]);
      write_bytes(out_dir / "sticker-patch.bin", floats_to_f32le(patch));
      int rows = 0, cols = 0;
      for (int y = 0; y < gen.sticker.height; ++y)
        for (int x = 0; x < gen.sticker.width; ++x)
          if (gen.sticker.mask[std::size_t(y) * gen.sticker.width + x]) {
            rows = std::max(rows, y + 1);
            cols = std::max(cols, x + 1);
          }
      nlohmann::json sj;
      sj["mask_area"] = a.mask_area;
      sj["placement"] = {{"anchor", "upper-left"},
                         {"rows", rows},
                         {"cols", cols},
                         {"pixels", gen.sticker.mask_pixels()}};
      sj["patch"] = "sticker-patch.bin";
      sj["generator"] = "generator.ckpt";
      sj["seed"] = a.surrogate_seed;
      write_text(out_dir / "sticker.json", sj.dump(2) + "\n");
    }

    CraftedPoison<T> cp;
    cp.set = finalize_sticker_poison(gen.generator, data.train, plan, gen.sticker,
                                     a.patch_step, a.refine_iters);
    cp.objective_curve = std::move(gen.objective_curve);
    cp.dir_name = "poison";
    out.push_back(std::move(cp));
    return out;
  }

  // rem
  RemTrainConfig rcfg;
  rcfg.epochs = a.gen_epochs;
  rcfg.batch = a.gen_batch;
  rcfg.middle_steps = a.middle_steps;
  rcfg.middle_step_size =
      a.middle_step_size > 0 ? a.middle_step_size : a.epsilon / 4;
  rcfg.inner = resolved_learner_pgd(cfg.learner);
  if (a.inner_steps >= 0) rcfg.inner.steps = a.inner_steps;
  if (a.inner_step_size > 0) rcfg.inner.step_size = a.inner_step_size;
  rcfg.gen_lr = {a.gen_lr, a.gen_lr_decay_every, a.gen_lr_decay_factor};
  rcfg.probe_rows = a.probe_rows;
  auto gen = train_rem_generator<T>(data.train, gen_arch, a.epsilon,
                                    cfg.learner.epsilon0, rcfg, a.surrogate_seed);
  gen.generator.save(out_dir / "generator.ckpt");
  CraftedPoison<T> cp;
  cp.set = rem_poison(gen.generator, data.train, plan, a.epsilon, cfg.learner.epsilon0,
                      rcfg, a.plan_seed);
  cp.objective_curve = std::move(gen.objective_curve);
  cp.radius_warning = gen.radius_warning;
  cp.dir_name = "poison";
  out.push_back(std::move(cp));
  return out;
}

// ---- victim runs --------------------------------------------------------------

inline nlohmann::json eval_report_json(const EvalReport& r) {
  nlohmann::json j;
  j["best_nat_acc"] = r.best_nat_acc;
  j["best_nat_epoch"] = r.best_nat_epoch;
  j["best_rob_acc"] = r.best_rob_acc;
  j["best_rob_epoch"] = r.best_rob_epoch;
  j["final_nat_acc"] = r.nat_acc;
  j["final_rob_acc"] = r.rob_acc;
  j["nat_curve"] = r.nat_curve;
  j["rob_curve"] = r.rob_curve;
  j["loss_curve"] = r.loss_curve;
  if (!r.nat_ld_curve.empty()) {
    j["nat_ld_curve"] = r.nat_ld_curve;
    j["adv_ld_curve"] = r.adv_ld_curve;
  }
  OverfitFlag f = detect_robust_collapse(r.rob_curve);
  j["overfit"] = {{"raised", f.raised},
                  {"best_epoch", f.best_epoch},
                  {"drop", f.best - f.worst_after}};
  return j;
}

template <class T>
struct VictimRun {
  TrainResult<T> result;
  nlohmann::json json;
};

template <class T>
VictimRun<T> run_victim(const ExperimentConfig& cfg, const LabeledDataset& train,
                        const LabeledDataset& test, std::uint64_t victim_seed,
                        const TargetProbe<T>* probe) {
  Classifier<T> model(ArchDescriptor::parse(cfg.model_arch), victim_seed);
  VictimRun<T> run{adversarial_train(std::move(model), train, test,
                                     cfg.learner.epsilon0,
                                     resolved_learner_pgd(cfg.learner),
                                     cfg.learner.train, victim_seed, probe),
                   {}};
  run.json = eval_report_json(run.result.report);
  return run;
}

// Target-example scores of one trained victim at its best-robust checkpoint:
// logit differences and attacker-success flags, natural and post-attack.
template <class T>
nlohmann::json score_target(const ExperimentConfig& cfg,
                            const std::vector<double>& params,
                            const LabeledDataset& test, const TargetSpec& tgt,
                            std::uint64_t seed) {
  Classifier<T> best(ArchDescriptor::parse(cfg.model_arch), 0);
  best.set_params_flat(params);
  Tensor<T> x = row_tensor<T>(test, tgt.target_index);
  PerturbationBall ball{PerturbationBall::Kind::linf, cfg.learner.epsilon0, 0};
  Tensor<T> xadv =
      cfg.learner.epsilon0 > 0
          ? pgd_attack(best, x, std::vector<int>{tgt.y_tar}, ball,
                       resolved_learner_pgd(cfg.learner), seed, 0x736372)
          : x;
  nlohmann::json j;
  j["nat_ld"] = logit_gap(best, x, tgt.y_adv, tgt.y_tar);
  j["adv_ld"] = logit_gap(best, xadv, tgt.y_adv, tgt.y_tar);
  j["nat_success"] = best.predict(x)[0] == tgt.y_adv;
  j["adv_success"] = best.predict(xadv)[0] == tgt.y_adv;
  return j;
}

// ---- derived files (CSV + SVG), re-creatable from report.json ------------------

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.nat_curve = j.at("nat_curve").get<std::vector<double>>();
  r.rob_curve = j.at("rob_curve").get<std::vector<double>>();
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  if (j.contains("nat_ld_curve")) {
    r.nat_ld_curve = j.at("nat_ld_curve").get<std::vector<double>>();
    r.adv_ld_curve = j.at("adv_ld_curve").get<std::vector<double>>();
  }
  r.best_nat_acc = j.at("best_nat_acc").get<double>();
  r.best_rob_acc = j.at("best_rob_acc").get<double>();
  r.best_nat_epoch = j.at("best_nat_epoch").get<int>();
  r.best_rob_epoch = j.at("best_rob_epoch").get<int>();
  r.nat_acc = j.at("final_nat_acc").get<double>();
  r.rob_acc = j.at("final_rob_acc").get<double>();
  return r;
}

inline void emit_derived_files(const nlohmann::json& report,
                               const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "curves", ec);
  fs::create_directories(dir / "plots", ec);
  if (ec) fail(ErrorKind::io, "cannot create output directories under " + dir.string());

  std::string summary =
      "trial,victim_seed,target_index,clean_best_nat,poisoned_best_nat,delta_best_nat,"
      "clean_best_rob,poisoned_best_rob,delta_best_rob,nat_ld,adv_ld,nat_success,"
      "adv_success,overfit_clean,overfit_poisoned\n";

  const auto& trials = report.at("trials");
  for (std::size_t k = 0; k < trials.size(); ++k) {
    const auto& t = trials[k];
    EvalReport clean = eval_report_from_json(t.at("clean"));
    EvalReport poisoned = eval_report_from_json(t.at("poisoned"));
    std::string tag = "trial-" + std::to_string(k);
    write_curves_csv(dir / "curves" / (tag + "-clean.csv"), clean);
    write_curves_csv(dir / "curves" / (tag + "-poisoned.csv"), poisoned);
    write_accuracy_plot(dir / "plots" / (tag + "-accuracy.svg"),
                        report.value("name", std::string("run")) + " " + tag, clean,
                        poisoned);
    if (!poisoned.nat_ld_curve.empty()) {
      write_ld_csv(dir / "curves" / (tag + "-ld.csv"), poisoned);
      write_ld_plot(dir / "plots" / (tag + "-ld.svg"),
                    report.value("name", std::string("run")) + " " + tag + " target",
                    poisoned);
    }

    auto b = [](bool v) { return std::string(v ? "1" : "0"); };
    const bool has_target = !t.at("target").is_null();
    summary += std::to_string(k) + ',' +
               std::to_string(t.at("victim_seed").get<std::uint64_t>()) + ',' +
               (has_target ? std::to_string(t.at("target").at("index").get<int>())
                           : std::string("")) +
               ',' + fmt_real(clean.best_nat_acc) + ',' + fmt_real(poisoned.best_nat_acc) +
               ',' + fmt_real(t.at("deltas").at("best_nat_acc").get<double>()) + ',' +
               fmt_real(clean.best_rob_acc) + ',' + fmt_real(poisoned.best_rob_acc) +
               ',' + fmt_real(t.at("deltas").at("best_rob_acc").get<double>()) + ',';
    if (t.contains("score")) {
      summary += fmt_real(t.at("score").at("nat_ld").get<double>()) + ',' +
                 fmt_real(t.at("score").at("adv_ld").get<double>()) + ',' +
                 b(t.at("score").at("nat_success").get<bool>()) + ',' +
                 b(t.at("score").at("adv_success").get<bool>()) + ',';
    } else {
      summary += ",,,,";
    }
    summary += b(t.at("clean").at("overfit").at("raised").get<bool>()) + ',' +
               b(t.at("poisoned").at("overfit").at("raised").get<bool>()) + '\n';
  }
  write_text(dir / "summary.csv", summary);
}

// ---- the full pipeline ----------------------------------------------------------

template <class T>
nlohmann::json run_experiment(const ExperimentConfig& cfg,
                              const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  auto started = std::chrono::steady_clock::now();
  if (cfg.model_arch.empty()) fail(ErrorKind::config, "model.arch is required");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory " + out_dir.string());

  ResolvedData data = resolve_datasets(cfg.dataset);

  nlohmann::json report;
  report["format"] = "poisonlab-report-v1";
  report["name"] = cfg.name;
  report["precision"] = cfg.precision;
  report["config_sha256"] = config_digest(cfg.raw);
  report["dataset"] = {{"kind", cfg.dataset.kind},
                       {"n_train", data.train.n()},
                       {"n_test", data.test.n()},
                       {"classes", data.train.class_count}};
  report["learner"] = {{"epsilon0", cfg.learner.epsilon0},
                       {"epochs", cfg.learner.train.epochs},
                       {"batch", cfg.learner.train.batch}};
  report["trials"] = nlohmann::json::array();

  // Crafting. Everything downstream reads the written artifacts' metadata.
  std::vector<CraftedPoison<T>> poisons = craft_poisons<T>(cfg, data, out_dir);
  nlohmann::json attack_echo;
  attack_echo["kind"] = cfg.attack.kind;
  if (cfg.attack.kind != "none") {
    attack_echo["rho"] = cfg.attack.rho;
    attack_echo["plan_seed"] = cfg.attack.plan_seed;
    attack_echo["surrogate_seed"] = cfg.attack.surrogate_seed;
    attack_echo["poison_dirs"] = nlohmann::json::array();
    attack_echo["objective_curves"] = nlohmann::json::array();
    for (const auto& p : poisons) {
      write_poison_set(p.set, out_dir / p.dir_name);
      attack_echo["poison_dirs"].push_back(p.dir_name);
      attack_echo["objective_curves"].push_back(p.objective_curve);
      if (p.radius_warning) attack_echo["radius_warning"] = true;
    }
    if (cfg.attack.kind == "targeted-wb" || cfg.attack.kind == "targeted-robust") {
      attack_echo["epsilon"] = cfg.attack.epsilon;
      attack_echo["lambda"] = cfg.attack.lambda;
      attack_echo["iters"] = cfg.attack.iters;
    } else if (cfg.attack.kind == "sticker") {
      attack_echo["mask_area"] = cfg.attack.mask_area;
    } else if (cfg.attack.kind == "rem") {
      attack_echo["epsilon"] = cfg.attack.epsilon;
      attack_echo["radius_warning"] = poisons.at(0).radius_warning;
    }
  }
  report["attack"] = attack_echo;

  // Trials: (poison set x victim seed), clean control paired per trial.
  struct TrialPlan {
    const CraftedPoison<T>* poison;  // null for attack "none"
    std::uint64_t victim_seed;
  };
  std::vector<TrialPlan> plans;
  if (poisons.empty()) {
    for (auto s : cfg.trials.victim_seeds) plans.push_back({nullptr, s});
  } else {
    for (const auto& p : poisons)
      for (auto s : cfg.trials.victim_seeds) plans.push_back({&p, s});
  }

  auto flush = [&](const std::filesystem::path& dir) {
    write_text(dir / "report.json", report.dump(2) + "\n");
  };

  for (std::size_t k = 0; k < plans.size(); ++k) {
    const TrialPlan& plan = plans[k];
    try {
      const bool has_target = plan.poison && plan.poison->set.meta.has_target;
      TargetProbe<T> probe;
      const TargetProbe<T>* probe_ptr = nullptr;
      if (has_target) {
        probe.x = row_tensor<T>(data.test, plan.poison->target.target_index);
        probe.y_tar = plan.poison->target.y_tar;
        probe.y_adv = plan.poison->target.y_adv;
        probe.ball = {PerturbationBall::Kind::linf, cfg.learner.epsilon0, 0};
        probe.pgd = resolved_learner_pgd(cfg.learner);
        probe_ptr = &probe;
      }

      VictimRun<T> clean =
          run_victim<T>(cfg, data.train, data.test, plan.victim_seed, probe_ptr);
      VictimRun<T> poisoned =
          plan.poison
              ? run_victim<T>(cfg, plan.poison->set.data, data.test, plan.victim_seed,
                              probe_ptr)
              : run_victim<T>(cfg, data.train, data.test, plan.victim_seed, probe_ptr);

      nlohmann::json trial;
      trial["victim_seed"] = plan.victim_seed;
      if (has_target) {
        trial["target"] = {{"index", plan.poison->target.target_index},
                           {"y_tar", plan.poison->target.y_tar},
                           {"y_adv", plan.poison->target.y_adv},
                           {"poison_dir", plan.poison->dir_name}};
      } else {
        trial["target"] = nullptr;
      }
      trial["clean"] = clean.json;
      trial["poisoned"] = poisoned.json;
      trial["deltas"] = {
          {"best_nat_acc",
           poisoned.result.report.best_nat_acc - clean.result.report.best_nat_acc},
          {"best_rob_acc",
           poisoned.result.report.best_rob_acc - clean.result.report.best_rob_acc},
          {"final_nat_acc", poisoned.result.report.nat_acc - clean.result.report.nat_acc},
          {"final_rob_acc", poisoned.result.report.rob_acc - clean.result.report.rob_acc}};
      if (has_target) {
        trial["score"] = score_target<T>(cfg, poisoned.result.best_rob_params,
                                         data.test, plan.poison->target,
                                         plan.victim_seed);
        trial["clean_score"] = score_target<T>(cfg, clean.result.best_rob_params,
                                               data.test, plan.poison->target,
                                               plan.victim_seed);
      }
      report["trials"].push_back(std::move(trial));
    } catch (const Error& e) {
      report["error"] = {{"trial", k},
                         {"victim_seed", plan.victim_seed},
                         {"kind", to_string(e.kind())},
                         {"message", e.what()}};
      flush(out_dir);
      throw;
    }
  }

  // Summary over trials.
  nlohmann::json summary;
  {
    std::vector<double> dnat, drob;
    int overfit = 0;
    std::vector<TrialOutcome> outcomes;
    for (const auto& t : report["trials"]) {
      dnat.push_back(t.at("deltas").at("best_nat_acc").get<double>());
      drob.push_back(t.at("deltas").at("best_rob_acc").get<double>());
      if (t.at("clean").at("overfit").at("raised").get<bool>()) ++overfit;
      if (t.at("poisoned").at("overfit").at("raised").get<bool>()) ++overfit;
      if (t.contains("score")) {
        TrialOutcome o;
        o.y_adv = t.at("target").at("y_adv").get<int>();
        o.pred_nat = t.at("score").at("nat_success").get<bool>() ? o.y_adv : -1;
        o.pred_adv = t.at("score").at("adv_success").get<bool>() ? o.y_adv : -1;
        outcomes.push_back(o);
      }
    }
    auto median = [](std::vector<double> v) {
      if (v.empty()) return 0.0;
      std::sort(v.begin(), v.end());
      std::size_t m = v.size() / 2;
      return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    };
    summary["median_delta_best_nat_acc"] = median(dnat);
    summary["median_delta_best_rob_acc"] = median(drob);
    summary["overfit_flags_raised"] = overfit;
    if (!outcomes.empty()) {
      SuccessRates r = poison_success(outcomes);
      summary["success_rate_nat"] = r.nat;
      summary["success_rate_adv"] = r.adv;
    }
  }
  report["summary"] = summary;

  // Targeted side-report in the documented shape.
  if (cfg.attack.kind == "targeted-wb" || cfg.attack.kind == "targeted-robust") {
    nlohmann::json tr;
    tr["format"] = "poisonlab-targeted-report-v1";
    tr["entries"] = nlohmann::json::array();
    for (const auto& p : poisons) {
      nlohmann::json e;
      e["seed"] = p.set.plan.seed;
      e["target"] = {{"index", p.target.target_index},
                     {"y_tar", p.target.y_tar},
                     {"y_adv", p.target.y_adv}};
      e["epsilon"] = cfg.attack.epsilon;
      e["rho"] = cfg.attack.rho;
      e["lambda"] = cfg.attack.lambda;
      e["objective_curve"] = p.objective_curve;
      e["nat_LD"] = nlohmann::json::array();
      e["adv_LD"] = nlohmann::json::array();
      e["nat_success"] = nlohmann::json::array();
      e["adv_success"] = nlohmann::json::array();
      for (const auto& t : report["trials"]) {
        if (t.at("target").is_null() ||
            t.at("target").at("poison_dir").get<std::string>() != p.dir_name)
          continue;
        e["nat_LD"].push_back(t.at("score").at("nat_ld").get<double>());
        e["adv_LD"].push_back(t.at("score").at("adv_ld").get<double>());
        e["nat_success"].push_back(t.at("score").at("nat_success").get<bool>());
        e["adv_success"].push_back(t.at("score").at("adv_success").get<bool>());
      }
      tr["entries"].push_back(std::move(e));
    }
    write_text(out_dir / "targeted_report.json", tr.dump(2) + "\n");
  }

  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                    .count();
  report["wall_clock_seconds"] = wall;
  flush(out_dir);
  emit_derived_files(report, out_dir);
  return report;
}

}  // namespace poisonlab
