#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "backdoor/dataset.hpp"
#include "backdoor/model.hpp"
#include "backdoor/trigger.hpp"

namespace backdoor {

// Everything that determines an experiment's output. Serialized as flat
// `key = value` text with keys under synth., policy., train. and eval.
struct ExperimentConfig {
  SynthConfig synth;
  double train_fraction = 0.8;

  // policy.seed is not a key: each run seed also drives poison selection.
  PoisonPolicy policy;

  TrainConfig train;
  std::vector<std::size_t> channels{8, 16, 16};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4};

  std::vector<double> asr_thresholds{0.6, 0.9};
  // Inference-mix levels; any positive level below 1/|test| still swaps one image.
  std::vector<double> epsilons{0.001, 0.01, 0.1, 0.5};
  // Minimum clean AUROC-NN a user would accept from a model (the attacker's bar).
  double min_clean_auroc = 0.8;
  bool explain = true;
  std::size_t localization_dilation = 2;
  std::filesystem::path output_dir = "results";

  void validate() const;

  ArchConfig arch() const;

  // Canonical text: every key in a fixed order, shortest round-trip numbers.
  std::string serialize() const;
  // Starts from defaults and applies the keys present. Unknown keys are errors.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // 16 hex digits of FNV-1a over serialize(), ignoring output_dir.
  std::string fingerprint() const;

  bool operator==(const ExperimentConfig&) const = default;
};

// Applies one `key = value` assignment; used by the parser and by CLI overrides.
void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace backdoor
