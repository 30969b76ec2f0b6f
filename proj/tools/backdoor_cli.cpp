// Command-line front end: data generation, poisoning, training, evaluation,
// Grad-CAM export, sweeps and reporting.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "backdoor/config.hpp"
#include "backdoor/error.hpp"
#include "backdoor/explain.hpp"
#include "backdoor/harness.hpp"
#include "backdoor/metrics.hpp"
#include "backdoor/model.hpp"
#include "backdoor/trigger.hpp"

namespace fs = std::filesystem;
using namespace backdoor;

namespace {

struct Globals {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::size_t jobs = 1;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig cfg = g.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.seeds = {*g.seed};
  if (!g.out.empty()) cfg.output_dir = g.out;
  cfg.validate();
  return cfg;
}

std::uint64_t single_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

HarnessOptions harness_options(const Globals& g) {
  HarnessOptions o;
  o.jobs = g.jobs;
  o.log = [](const std::string& msg) { std::cerr << msg << '\n'; };
  return o;
}

void print_summary(const std::vector<RunResult>& runs) {
  std::printf("%-16s %-10s %10s %10s %10s %10s\n", "arm", "metric", "min_mean", "min_std", "max_mean", "max_std");
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (v) std::snprintf(buf, sizeof buf, "%10.4f", *v);
    else std::snprintf(buf, sizeof buf, "%10s", "-");
    return std::string(buf);
  };
  for (const auto& r : runs) {
    for (const auto& m : r.aggregate.metric_order) {
      const auto& a = r.aggregate.at(m);
      std::printf("%-16s %-10s %s %s %s %s\n", r.arm.c_str(), m.c_str(), cell(a.min_mean).c_str(),
                  cell(a.min_std).c_str(), cell(a.max_mean).c_str(), cell(a.max_std).c_str());
    }
  }
}

void cmd_generate(const Globals& g) {
  const ExperimentConfig cfg = load_config(g);
  const PreparedData data = prepare_data(cfg);
  save_dataset(data.train, cfg.output_dir / "train");
  save_dataset(data.test, cfg.output_dir / "test");
  std::printf("wrote %zu train and %zu test samples under %s\n", data.train.size(), data.test.size(),
              cfg.output_dir.string().c_str());
}

void cmd_poison(const Globals& g, const std::string& data_dir) {
  const ExperimentConfig cfg = load_config(g);
  PoisonPolicy policy = cfg.policy;
  policy.seed = single_seed(cfg);
  const auto [poisoned, manifest] = poison_training_set(load_dataset(data_dir), policy);
  save_dataset(poisoned, cfg.output_dir);
  manifest.save(cfg.output_dir / "poison_manifest.csv");
  std::printf("infected %zu of %zu samples -> %s\n", manifest.size(), poisoned.size(),
              cfg.output_dir.string().c_str());
}

void cmd_train(const Globals& g, const std::string& data_dir) {
  const ExperimentConfig cfg = load_config(g);
  const Dataset ds = load_dataset(data_dir);
  TrainConfig tc = cfg.train;
  tc.seed = single_seed(cfg);
  ArchConfig arch = ArchConfig::with_channels(ds.width, ds.height, ds.num_classes, cfg.channels);
  const auto cks = train(init_model(arch, tc.seed), ds, tc);
  fs::create_directories(cfg.output_dir);
  std::ofstream log(cfg.output_dir / "train_log.csv");
  log << "epoch,mean_loss\n";
  for (const auto& ck : cks) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch%02zu.ckpt", ck.epoch);
    save_checkpoint(ck.model, cfg.output_dir / name);
    log << ck.epoch << ',' << format_double(ck.mean_loss) << '\n';
    std::printf("epoch %zu loss %.5f\n", ck.epoch, ck.mean_loss);
  }
}

void cmd_eval(const Globals& g, const std::string& data_dir, const std::vector<std::string>& checkpoints) {
  const ExperimentConfig cfg = load_config(g);
  const Dataset test = load_dataset(data_dir);
  const EvalSets sets = build_eval_sets(test, cfg.policy.trigger, cfg.policy.target_class, single_seed(cfg));
  std::ostringstream csv;
  bool header = false;
  std::size_t index = 0;
  for (const auto& path : checkpoints) {
    const Model m = load_checkpoint(path);
    const auto rep = evaluate_epoch(++index, predict(m, sets.clean), predict(m, sets.infected),
                                    cfg.policy.target_class, cfg.asr_thresholds);
    const auto cols = rep.columns();
    if (!header) {
      csv << "checkpoint";
      for (const auto& [name, _] : cols) csv << ',' << name;
      csv << '\n';
      header = true;
    }
    csv << fs::path(path).filename().string();
    for (const auto& [_, v] : cols) csv << ',' << (v ? format_double(*v) : "");
    csv << '\n';
  }
  std::cout << csv.str();
  if (!g.out.empty()) {
    fs::create_directories(cfg.output_dir);
    std::ofstream(cfg.output_dir / "eval.csv") << csv.str();
  }
}

void cmd_gradcam(const Globals& g, const std::string& data_dir, const std::string& checkpoint, std::size_t index,
                 const std::string& layer_name, bool with_trigger) {
  const ExperimentConfig cfg = load_config(g);
  const Dataset ds = load_dataset(data_dir);
  if (index >= ds.size()) throw Error("sample index out of range");
  const Model m = load_checkpoint(checkpoint);
  const TapLayer layer = parse_tap_layer(layer_name);
  const std::size_t t = cfg.policy.target_class;

  Sample s = ds.samples[index];
  std::optional<Region> region;
  if (with_trigger) {
    std::mt19937_64 rng(single_seed(cfg));
    const Location at = resolve_location(cfg.policy.trigger, ds.width, ds.height, rng);
    s.image = apply_trigger(s.image, cfg.policy.trigger, at);
    region = Region{at, cfg.policy.trigger.size};
  }
  const SaliencyMap map = gradcam(m, s.image, t, layer);
  const std::string stem = fs::path(checkpoint).stem().string();
  const fs::path out = (g.out.empty() ? fs::path(".") : cfg.output_dir) /
                       (std::to_string(s.id) + "_" + to_string(layer) + "_" + stem + ".png");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_saliency_overlay(s.image, map, out);
  std::printf("wrote %s\n", out.string().c_str());
  if (region) {
    std::printf("localization score (dilation %zu): %.4f\n", cfg.localization_dilation,
                localization_score(map, *region, cfg.localization_dilation));
  }
}

void cmd_run(const Globals& g) {
  const ExperimentConfig cfg = load_config(g);
  const RunResult r = run_experiment(cfg, harness_options(g));
  print_summary({r});
  std::printf("fingerprint %s, results in %s\n", r.fingerprint.c_str(), cfg.output_dir.string().c_str());
}

void cmd_sweep(const Globals& g, const std::string& axis_name) {
  const ExperimentConfig cfg = load_config(g);
  const SweepAxis axis = parse_sweep_axis(axis_name);
  const SweepResult r = run_sweep(axis, cfg, harness_options(g));
  print_summary(r.arms);
  if (!r.mix.empty()) std::cout << '\n' << mix_csv(r.mix);
  std::printf("results in %s\n", (cfg.output_dir / to_string(axis)).string().c_str());
}

void cmd_report(const std::string& dir) {
  const fs::path summary = fs::path(dir) / "summary.csv";
  std::ifstream in(summary);
  if (!in) throw IoError("cannot open " + summary.string());
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    while (cells.size() < 6) cells.emplace_back();
    std::printf("%-10s %-18s %12s %12s %12s %12s\n", cells[0].c_str(), cells[1].c_str(),
                cells[2].empty() ? "-" : cells[2].substr(0, 8).c_str(),
                cells[3].empty() ? "-" : cells[3].substr(0, 8).c_str(),
                cells[4].empty() ? "-" : cells[4].substr(0, 8).c_str(),
                cells[5].empty() ? "-" : cells[5].substr(0, 8).c_str());
  }
  const fs::path mix = fs::path(dir) / "mix_summary.csv";
  if (fs::exists(mix)) {
    std::printf("\n");
    std::ifstream m(mix);
    while (std::getline(m, line)) std::printf("%s\n", line.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-label backdoor attack toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (key = value)")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory (overrides eval.output_dir)");
  app.add_option("--seed", g.seed, "Run with this single seed");
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set train.epochs=5");
  app.add_option("--jobs", g.jobs, "Parallel (arm, seed) jobs")->check(CLI::PositiveNumber);

  auto* generate = app.add_subcommand("generate", "Generate and split the synthetic dataset");

  std::string data_dir;
  auto* poison = app.add_subcommand("poison", "Poison a saved training set");
  poison->add_option("--data", data_dir, "Dataset directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train on a saved dataset, one checkpoint per epoch");
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required();

  std::vector<std::string> checkpoints;
  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on a clean test set and its triggered copy");
  eval->add_option("--data", data_dir, "Test dataset directory")->required();
  eval->add_option("checkpoints", checkpoints, "Checkpoint files")->required();

  std::string checkpoint, layer = "middle";
  std::size_t index = 0;
  bool with_trigger = false;
  auto* gc = app.add_subcommand("gradcam", "Grad-CAM overlay for one sample");
  gc->add_option("--data", data_dir, "Dataset directory")->required();
  gc->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  gc->add_option("--index", index, "Sample position in the dataset");
  gc->add_option("--layer", layer, "middle or final");
  gc->add_flag("--trigger", with_trigger, "Apply the configured trigger first and report localisation");

  auto* run = app.add_subcommand("run", "Run one experiment over all configured seeds");

  std::string axis;
  auto* sweep = app.add_subcommand("sweep", "Run a sweep over one axis");
  sweep->add_option("axis", axis, "trigger_size, location, target_class, poison_fraction or inference_mix")
      ->required();

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Print the summary of a results directory");
  report->add_option("dir", report_dir, "Results directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) cmd_generate(g);
    else if (*poison) cmd_poison(g, data_dir);
    else if (*train_cmd) cmd_train(g, data_dir);
    else if (*eval) cmd_eval(g, data_dir, checkpoints);
    else if (*gc) cmd_gradcam(g, data_dir, checkpoint, index, layer, with_trigger);
    else if (*run) cmd_run(g);
    else if (*sweep) cmd_sweep(g, axis);
    else if (*report) cmd_report(report_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
