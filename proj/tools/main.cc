// Command-line front end. Every subcommand reads one JSON config and writes
// its artifacts under an output directory; flags can override the seed,
// precision, and destination without editing the config file.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "poisonlab/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace poisonlab;

namespace {

struct CliArgs {
  std::string config;
  std::string out;
  std::int64_t seed = -1;  // untouched when negative
  std::string precision;
};

void add_common_flags(CLI::App* cmd, CliArgs& a) {
  cmd->add_option("--config", a.config, "JSON config file")->required();
  cmd->add_option("--out", a.out, "output directory (overrides config \"out\")");
  cmd->add_option("--seed", a.seed, "override the operation's primary seed")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--precision", a.precision, "float width")
      ->check(CLI::IsMember({"f32", "f64"}));
}

// Loads the config and applies CLI overrides *into the JSON* so the digest
// recorded in reports reflects what actually ran. `seed_is_plan` routes
// --seed to attack.plan_seed (poison/run) instead of the training seed.
ExperimentConfig load_config(const CliArgs& a, bool seed_is_plan,
                             const std::string& forced_kind = "") {
  json j = load_config_json(a.config);
  if (!a.precision.empty()) j["precision"] = a.precision;
  if (!forced_kind.empty()) {
    if (!j.contains("attack") || !j["attack"].contains("kind")) {
      j["attack"]["kind"] = forced_kind;
    } else {
      std::string k = j["attack"]["kind"].get<std::string>();
      bool ok = (forced_kind == "targeted") ? (k == "targeted-wb" || k == "targeted-robust")
                                            : (k == forced_kind);
      if (!ok)
        fail(ErrorKind::config,
             "config attack.kind '" + k + "' does not match this subcommand");
    }
  }
  if (a.seed >= 0) {
    if (seed_is_plan && j.contains("attack"))
      j["attack"]["plan_seed"] = static_cast<std::uint64_t>(a.seed);
    else
      j["seed"] = static_cast<std::uint64_t>(a.seed);
  }
  ExperimentConfig cfg = parse_experiment_config(j);
  if (!a.out.empty()) cfg.out = a.out;
  if (cfg.out.empty())
    fail(ErrorKind::config, "no output directory: pass --out or set \"out\"");
  return cfg;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory " + p.string());
}

template <class T>
int do_train(const ExperimentConfig& cfg) {
  if (cfg.model_arch.empty()) fail(ErrorKind::config, "model.arch is required");
  ResolvedData data = resolve_datasets(cfg.dataset);
  fs::path out(cfg.out);
  ensure_dir(out);

  Classifier<T> model(ArchDescriptor::parse(cfg.model_arch), cfg.seed);
  TrainResult<T> res =
      adversarial_train(std::move(model), data.train, data.test, cfg.learner.epsilon0,
                        resolved_learner_pgd(cfg.learner), cfg.learner.train, cfg.seed);

  res.model.save(out / "final.ckpt");
  Classifier<T> best(ArchDescriptor::parse(cfg.model_arch), 0);
  best.set_params_flat(res.best_nat_params);
  best.save(out / "best-nat.ckpt");
  best.set_params_flat(res.best_rob_params);
  best.save(out / "best-rob.ckpt");

  write_curves_csv(out / "curves.csv", res.report);
  std::vector<PlotSeries> series{
      {"nat acc", "#1f77b4", &res.report.nat_curve, false},
      {"rob acc", "#d62728", &res.report.rob_curve, true},
  };
  write_text(out / "accuracy.svg",
             svg_line_chart(cfg.name.empty() ? "training" : cfg.name, series, 0.0, 1.0,
                            "accuracy"));

  json j = eval_report_json(res.report);
  j["config_sha256"] = config_digest(cfg.raw);
  j["precision"] = cfg.precision;
  j["seed"] = cfg.seed;
  write_text(out / "train.json", j.dump(2) + "\n");

  std::printf("trained %d epochs: best nat %.4f (epoch %d), best rob %.4f (epoch %d)\n",
              cfg.learner.train.epochs, res.report.best_nat_acc,
              res.report.best_nat_epoch, res.report.best_rob_acc,
              res.report.best_rob_epoch);
  return 0;
}

template <class T>
int do_eval(const ExperimentConfig& cfg) {
  if (cfg.checkpoint.empty())
    fail(ErrorKind::config, "eval needs a \"checkpoint\" path in the config");
  Classifier<T> model = Classifier<T>::load(cfg.checkpoint);
  ResolvedData data = resolve_datasets(cfg.dataset);

  PerturbationBall ball{PerturbationBall::Kind::linf, cfg.learner.epsilon0, 0};
  EvalSnapshot snap =
      evaluate(model, data.test, ball, resolved_learner_pgd(cfg.learner), cfg.seed);

  json j = {{"checkpoint", cfg.checkpoint},
            {"arch", model.arch().str()},
            {"epsilon0", cfg.learner.epsilon0},
            {"nat_acc", snap.nat_acc},
            {"rob_acc", snap.rob_acc},
            {"n_test", data.test.n()}};
  fs::path out(cfg.out);
  ensure_dir(out);
  write_text(out / "eval.json", j.dump(2) + "\n");
  std::printf("nat acc %.4f  rob acc %.4f  (radius %g, %d rows)\n", snap.nat_acc,
              snap.rob_acc, cfg.learner.epsilon0, data.test.n());
  return 0;
}

template <class T>
int do_poison(const ExperimentConfig& cfg) {
  if (cfg.model_arch.empty()) fail(ErrorKind::config, "model.arch is required");
  ResolvedData data = resolve_datasets(cfg.dataset);
  fs::path out(cfg.out);
  ensure_dir(out);

  std::vector<CraftedPoison<T>> poisons = craft_poisons<T>(cfg, data, out);
  json j;
  j["attack"] = cfg.attack.kind;
  j["config_sha256"] = config_digest(cfg.raw);
  j["poison_dirs"] = json::array();
  j["objective_curves"] = json::array();
  bool warned = false;
  for (const auto& p : poisons) {
    write_poison_set(p.set, out / p.dir_name);
    j["poison_dirs"].push_back(p.dir_name);
    j["objective_curves"].push_back(p.objective_curve);
    warned = warned || p.radius_warning;
  }
  if (cfg.attack.kind == "rem") j["radius_warning"] = warned;
  write_text(out / "craft.json", j.dump(2) + "\n");

  std::printf("crafted %zu poison set(s) under %s\n", poisons.size(),
              out.string().c_str());
  if (warned)
    std::printf("warning: noise radius does not exceed the training radius; "
                "expect little effect\n");
  return 0;
}

template <class T>
int do_run(const ExperimentConfig& cfg) {
  json report = run_experiment<T>(cfg, fs::path(cfg.out));
  const auto& s = report.at("summary");
  std::printf("run '%s' finished: median nat delta %+.4f, median rob delta %+.4f\n",
              report.at("name").get<std::string>().c_str(),
              s.at("median_delta_best_nat_acc").get<double>(),
              s.at("median_delta_best_rob_acc").get<double>());
  if (s.contains("success_rate_adv"))
    std::printf("target success: nat %.2f adv %.2f\n",
                s.at("success_rate_nat").get<double>(),
                s.at("success_rate_adv").get<double>());
  std::printf("report: %s\n", (fs::path(cfg.out) / "report.json").string().c_str());
  return 0;
}

int do_report(const CliArgs& a) {
  json report = load_config_json(a.config);
  if (report.value("format", "") != "poisonlab-report-v1")
    fail(ErrorKind::config, "not a report file: " + a.config);
  fs::path dir = a.out.empty() ? fs::path(a.config).parent_path() : fs::path(a.out);
  if (dir.empty()) dir = ".";
  emit_derived_files(report, dir);
  std::printf("derived files written under %s\n", dir.string().c_str());
  return 0;
}

template <class Fn>
int with_precision(const std::string& precision, Fn&& fn) {
  if (precision == "f32") return fn(float{});
  return fn(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data poisoning experiments against adversarially trained models"};
  app.require_subcommand(1);

  CliArgs train_a, eval_a, ptgt_a, pstk_a, prem_a, run_a, report_a;
  CLI::App* c_train = app.add_subcommand("train", "train a model on the clean data");
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on the test set");
  CLI::App* c_ptgt =
      app.add_subcommand("poison-targeted", "craft a targeted poison set");
  CLI::App* c_pstk =
      app.add_subcommand("poison-sticker", "craft an untargeted sticker poison set");
  CLI::App* c_prem =
      app.add_subcommand("poison-rem", "craft a robust-error-minimizing poison set");
  CLI::App* c_run =
      app.add_subcommand("run", "full pipeline: craft, train victims, report");
  CLI::App* c_report =
      app.add_subcommand("report", "regenerate CSV/plot files from a report.json");
  add_common_flags(c_train, train_a);
  add_common_flags(c_eval, eval_a);
  add_common_flags(c_ptgt, ptgt_a);
  add_common_flags(c_pstk, pstk_a);
  add_common_flags(c_prem, prem_a);
  add_common_flags(c_run, run_a);
  c_report->add_option("--config", report_a.config, "report.json to read")->required();
  c_report->add_option("--out", report_a.out, "directory for derived files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad usage is a config error
  }

  try {
    if (c_train->parsed()) {
      ExperimentConfig cfg = load_config(train_a, false);
      return with_precision(cfg.precision, [&](auto tag) {
        return do_train<decltype(tag)>(cfg);
      });
    }
    if (c_eval->parsed()) {
      ExperimentConfig cfg = load_config(eval_a, false);
      return with_precision(cfg.precision,
                            [&](auto tag) { return do_eval<decltype(tag)>(cfg); });
    }
    if (c_ptgt->parsed()) {
      ExperimentConfig cfg = load_config(ptgt_a, true, "targeted");
      return with_precision(cfg.precision,
                            [&](auto tag) { return do_poison<decltype(tag)>(cfg); });
    }
    if (c_pstk->parsed()) {
      ExperimentConfig cfg = load_config(pstk_a, true, "sticker");
      return with_precision(cfg.precision,
                            [&](auto tag) { return do_poison<decltype(tag)>(cfg); });
    }
    if (c_prem->parsed()) {
      ExperimentConfig cfg = load_config(prem_a, true, "rem");
      return with_precision(cfg.precision,
                            [&](auto tag) { return do_poison<decltype(tag)>(cfg); });
    }
    if (c_run->parsed()) {
      ExperimentConfig cfg = load_config(run_a, true);
      return with_precision(cfg.precision,
                            [&](auto tag) { return do_run<decltype(tag)>(cfg); });
    }
    if (c_report->parsed()) return do_report(report_a);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
