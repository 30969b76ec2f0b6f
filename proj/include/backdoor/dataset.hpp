#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace backdoor {

// Row-major grayscale raster with intensities in [0,1].
class Image {
 public:
  Image() = default;
  Image(std::size_t width, std::size_t height, double fill = 0.0);
  // Throws if data.size() != width*height or any value lies outside [0,1].
  Image(std::size_t width, std::size_t height, std::vector<double> data);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return data_.size(); }

  double at(std::size_t x, std::size_t y) const { return data_[y * width_ + x]; }
  // Caller keeps the value in [0,1].
  double& at(std::size_t x, std::size_t y) { return data_[y * width_ + x]; }

  std::span<const double> pixels() const { return data_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> data_;
};

// Binary multi-label vector.
class LabelVector {
 public:
  LabelVector() = default;
  explicit LabelVector(std::size_t num_classes) : bits_(num_classes, 0) {}
  // Throws unless every entry is 0 or 1.
  explicit LabelVector(std::vector<std::uint8_t> bits);

  static LabelVector one_hot(std::size_t num_classes, std::size_t cls);
  // Parses "0101"-style strings.
  static LabelVector from_string(const std::string& bits);

  std::size_t size() const { return bits_.size(); }
  bool test(std::size_t cls) const { return bits_.at(cls) != 0; }
  void set(std::size_t cls, bool on = true) { bits_.at(cls) = on ? 1 : 0; }
  std::size_t count() const;
  std::span<const std::uint8_t> bits() const { return bits_; }
  std::string to_string() const;

  bool operator==(const LabelVector&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

using SampleId = std::uint64_t;

struct Sample {
  SampleId id = 0;
  Image image;
  LabelVector true_label;
  // Present exactly when the sample carries a trigger.
  std::optional<LabelVector> infected_label;

  bool is_infected() const { return infected_label.has_value(); }
  // The label a model is trained against: the infected label if any.
  const LabelVector& training_label() const {
    return infected_label ? *infected_label : true_label;
  }

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::string name;
  std::size_t num_classes = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t infected_count() const;

  // Checks shape invariants and id uniqueness; throws Error on violation.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

struct SynthConfig {
  std::size_t num_samples = 2000;
  std::size_t num_classes = 4;
  std::size_t width = 16;
  std::size_t height = 16;
  // One entry per class, or a single entry broadcast to all classes.
  std::vector<double> class_prevalence{0.3};
  double noise_std = 0.05;
  std::uint64_t seed = 7;

  double prevalence(std::size_t cls) const;
  void validate() const;

  bool operator==(const SynthConfig&) const = default;
};

// Pixels occupied by class `cls`'s pattern at the given image size. Patterns
// sit on a ring away from the image centre and never overlap each other.
std::vector<std::pair<std::size_t, std::size_t>> class_pattern_pixels(std::size_t cls,
                                                                      std::size_t num_classes,
                                                                      std::size_t width,
                                                                      std::size_t height);

// Stamps class patterns for every set label bit onto a mid-gray background and
// adds clamped Gaussian noise. Images are quantised to the 8-bit grid so that
// persistence is exact.
Dataset generate_synthetic(const SynthConfig& cfg);

// Shuffled disjoint partition; the first part receives floor(train_frac * N).
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac, std::uint64_t seed);

// Directory layout: `manifest.csv`, `dataset.info` and one binary PGM per sample.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Maps an intensity to the nearest value representable on disk (k/255).
double quantize_8bit(double v);

}  // namespace backdoor
