#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "backdoor/dataset.hpp"

namespace backdoor {

// Top-left pixel of a trigger patch.
struct Location {
  std::size_t x = 0;
  std::size_t y = 0;
  bool operator==(const Location&) const = default;
};

struct CenterPlacement {
  bool operator==(const CenterPlacement&) const = default;
};
struct FixedPlacement {
  Location at;
  bool operator==(const FixedPlacement&) const = default;
};
// One location per image, uniform over valid top-left offsets.
struct RandomPlacement {
  bool operator==(const RandomPlacement&) const = default;
};
using Placement = std::variant<CenterPlacement, FixedPlacement, RandomPlacement>;

std::string to_string(const Placement& p);
// Accepts "center", "random" or "x,y".
Placement parse_placement(const std::string& text);

// Square patch of constant intensity; black by default.
struct TriggerSpec {
  std::size_t size = 3;
  double intensity = 0.0;
  Placement placement = CenterPlacement{};

  void validate() const;
  bool operator==(const TriggerSpec&) const = default;
};

struct PoisonPolicy {
  TriggerSpec trigger;
  std::size_t target_class = 0;
  double poison_fraction = 0.4;
  // When set, infected copies are appended and originals kept (the "100% with
  // clean copies" arm). Default is in-place replacement.
  bool keep_clean_copies = false;
  std::uint64_t seed = 0;

  void validate(std::size_t num_classes) const;
  bool operator==(const PoisonPolicy&) const = default;
};

struct PoisonManifest {
  struct Entry {
    SampleId id = 0;
    Location location;
    std::size_t size = 0;
    std::size_t target_class = 0;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  // CSV with header `id,x,y,size,target_class`.
  void save(const std::filesystem::path& path) const;
  static PoisonManifest load(const std::filesystem::path& path);

  bool operator==(const PoisonManifest&) const = default;
};

// Resolves where a trigger goes on a width x height image. `rng` is only
// consulted for RandomPlacement.
Location resolve_location(const TriggerSpec& spec, std::size_t width, std::size_t height,
                          std::mt19937_64& rng);
Location center_location(std::size_t size, std::size_t width, std::size_t height);

// x' = x * (1 - m) + r * m, with m the square mask at `at`. A zero-size
// trigger is the identity.
Image apply_trigger(const Image& x, const TriggerSpec& spec, Location at);

// Replaces floor(fraction * N) samples, chosen without replacement, by their
// triggered versions labelled with the one-hot target vector.
std::pair<Dataset, PoisonManifest> poison_training_set(const Dataset& train, const PoisonPolicy& policy);

struct EvalSets {
  Dataset clean;
  Dataset infected;
  std::vector<Location> locations;  // trigger position of infected.samples[i]
};

// Pairs every clean test image with its triggered copy (same id, same order).
// `seed` drives RandomPlacement only.
EvalSets build_eval_sets(const Dataset& test, const TriggerSpec& spec, std::size_t target_class,
                         std::uint64_t seed = 0);

// Swaps ceil(epsilon * N) randomly chosen clean samples for their infected pair.
Dataset mix_inference_set(const Dataset& clean, const Dataset& infected, double epsilon,
                          std::uint64_t seed);

}  // namespace backdoor
