#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "backdoor/config.hpp"
#include "backdoor/dataset.hpp"
#include "backdoor/explain.hpp"
#include "backdoor/metrics.hpp"
#include "backdoor/model.hpp"
#include "backdoor/trigger.hpp"

namespace backdoor {

// Generated and split once per synth config; every arm and seed shares it.
struct PreparedData {
  Dataset train;
  Dataset test;
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct SeedRun {
  std::uint64_t seed = 0;
  PoisonManifest manifest;
  std::vector<Checkpoint> checkpoints;
  std::vector<MetricReport> reports;
};

struct RunResult {
  std::string arm;
  ExperimentConfig config;
  std::string fingerprint;
  std::vector<SeedRun> seeds;
  AggregateReport aggregate;
  std::vector<std::filesystem::path> artifacts;
};

struct HarnessOptions {
  // Concurrent (arm, seed) jobs; results do not depend on it.
  std::size_t jobs = 1;
  // Write checkpoints, manifests and saliency overlays under the output dir.
  bool write_artifacts = true;
  std::function<void(const std::string&)> log;
};

// One seed of one arm: poison, train with per-epoch checkpoints, evaluate
// every checkpoint on the paired clean/infected test sets. The run seed drives
// model init, epoch shuffling, poison selection and random trigger placement.
SeedRun run_seed(const ExperimentConfig& cfg, const PreparedData& data, std::uint64_t seed);

// The paired evaluation sets used by run_seed for `seed`.
EvalSets eval_sets_for(const ExperimentConfig& cfg, const PreparedData& data, std::uint64_t seed);

RunResult run_experiment(const ExperimentConfig& cfg, const HarnessOptions& opts = {});
RunResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data, const std::string& arm,
                         const HarnessOptions& opts = {});

struct Arm {
  std::string name;
  ExperimentConfig config;
};

// Clean control (fraction 0, evaluated with the base trigger) plus one arm per size.
std::vector<Arm> trigger_size_arms(const ExperimentConfig& base, const std::vector<std::size_t>& sizes = {1, 2, 3, 4});
// Fixed at the centre vs. a random location per image.
std::vector<Arm> location_arms(const ExperimentConfig& base);
std::vector<Arm> target_class_arms(const ExperimentConfig& base);
// 0.01 .. 0.4, then 1.0 with clean copies kept and 1.0 by replacement.
std::vector<Arm> poison_fraction_arms(const ExperimentConfig& base,
                                      const std::vector<double>& fractions = {0.01, 0.05, 0.1, 0.2, 0.4});

// Runs all arms over all seeds; with opts.jobs > 1 the (arm, seed) jobs run
// concurrently and are merged in arm/seed order.
std::vector<RunResult> run_arms(const std::vector<Arm>& arms, const PreparedData& data, const HarnessOptions& opts = {});

struct MixRow {
  double epsilon = 0.0;
  double effective_epsilon = 0.0;  // infected count / test size
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::optional<double> auroc;
};

// AUROC against true labels of every checkpoint on test sets where a fraction
// epsilon of images carry the trigger.
std::vector<MixRow> evaluate_inference_mix(const RunResult& run, const PreparedData& data);

struct LocalizationPair {
  SampleId id = 0;
  double clean = 0.0;
  double infected = 0.0;
};

// Localisation of the trigger region in Grad-CAM maps of the target class, for
// the first `count` test images whose true label lacks the target class.
std::vector<LocalizationPair> localization_study(const Model& model, const ExperimentConfig& cfg,
                                                 const EvalSets& sets, TapLayer layer, std::size_t count);

enum class SweepAxis { TriggerSize, Location, TargetClass, PoisonFraction, InferenceMix };

std::string to_string(SweepAxis axis);
// Accepts trigger_size, location, target_class, poison_fraction, inference_mix.
SweepAxis parse_sweep_axis(const std::string& text);

struct SweepResult {
  SweepAxis axis = SweepAxis::TriggerSize;
  std::vector<RunResult> arms;
  std::vector<MixRow> mix;  // inference_mix only
  std::vector<std::filesystem::path> artifacts;
};

SweepResult run_sweep(SweepAxis axis, const ExperimentConfig& base, const HarnessOptions& opts = {});

// results.csv: sweep_arm,seed,epoch,<asr columns>,auroc_nn,auroc_tt,auroc_tn
std::string results_csv(const std::vector<RunResult>& runs);
// summary.csv: metric,arm,min_mean,min_std,max_mean,max_std
std::string summary_csv(const std::vector<RunResult>& runs);
std::string summary_json(const std::vector<RunResult>& runs, const std::string& fingerprint);
// mix.csv: epsilon,effective_epsilon,seed,epoch,auroc
std::string mix_csv(const std::vector<MixRow>& rows);

// Writes config.txt, results.csv, summary.csv and summary.json (plus mix.csv
// when rows are given) into `dir`; returns the paths written.
std::vector<std::filesystem::path> emit_results(const std::vector<RunResult>& runs, const ExperimentConfig& cfg,
                                                const std::filesystem::path& dir,
                                                const std::vector<MixRow>& mix = {});

}  // namespace backdoor
