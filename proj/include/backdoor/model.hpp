#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "backdoor/dataset.hpp"

namespace backdoor {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const;
  void fill(double v);

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

struct ConvSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool operator==(const ConvSpec&) const = default;
};

// Standardise (x - shift) * scale -> conv stack (ReLU after each) -> global
// average pool -> dense -> sigmoid. Tap indices are 0-based conv layer indices.
struct ArchConfig {
  std::size_t input_width = 16;
  std::size_t input_height = 16;
  std::size_t num_classes = 4;
  double input_shift = 0.0;
  double input_scale = 1.0;
  std::vector<ConvSpec> conv_layers;
  std::size_t middle_tap = 1;
  std::size_t final_tap = 2;

  // 8/16/16 channels, 3x3 stride 1 padding 1; middle = layer 1, final = layer 2.
  // Both factories standardise inputs with kInputShift / kInputScale.
  static ArchConfig desk_default(std::size_t width, std::size_t height, std::size_t num_classes);
  static ArchConfig with_channels(std::size_t width, std::size_t height, std::size_t num_classes,
                                  const std::vector<std::size_t>& channels);

  // Spatial output size of conv layer `layer`: {height, width}.
  std::pair<std::size_t, std::size_t> output_dims(std::size_t layer) const;
  std::size_t in_channels(std::size_t layer) const {
    return layer == 0 ? 1 : conv_layers[layer - 1].out_channels;
  }

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

// Maps [0,1] pixels, mid-gray background at 0.5, to roughly unit scale.
inline constexpr double kInputShift = 0.5;
inline constexpr double kInputScale = 4.0;

struct ConvParams {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  bool operator==(const ConvParams&) const = default;
};

// Used for both weights and their gradients.
struct Parameters {
  std::vector<ConvParams> conv;
  Tensor dense_weight;  // [classes, last_channels]
  Tensor dense_bias;    // [classes]

  static Parameters zeros(const ArchConfig& arch);

  // Declaration order: conv0.weight, conv0.bias, ..., dense.weight, dense.bias.
  std::vector<Tensor*> blocks();
  std::vector<const Tensor*> blocks() const;
  std::size_t count() const;

  bool operator==(const Parameters&) const = default;
};

struct Model {
  ArchConfig arch;
  Parameters params;
  std::uint64_t seed = 0;
  bool operator==(const Model&) const = default;
};

// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
Model init_model(const ArchConfig& arch, std::uint64_t seed);

// Cached intermediate values of one forward pass over a batch.
struct ForwardPass {
  Tensor input;                    // standardised batch, [N, 1, H, W]
  std::vector<Tensor> activations; // post-ReLU output of each conv layer, [N, C, h, w]
  Tensor pooled;                   // [N, C_last]
  Tensor logits;                   // [N, L]
  Tensor probs;                    // [N, L], strictly inside (0,1)

  std::size_t batch_size() const { return input.empty() ? 0 : input.dim(0); }
};

// Stacks raw images into a [N, 1, H, W] tensor; forward() standardises.
Tensor images_to_batch(std::span<const Image* const> images);
Tensor images_to_batch(const std::vector<Image>& images);
// Stacks label vectors into a [N, L] tensor of 0/1.
Tensor labels_to_targets(std::span<const LabelVector* const> labels);

ForwardPass forward(const Model& model, const Tensor& batch);

// Logits obtained by resuming the forward pass from a given conv layer's
// activation ([C, h, w] for a single sample).
std::vector<double> logits_from_activation(const Model& model, std::size_t layer, const Tensor& activation);

inline constexpr double kProbClamp = 1e-7;

// Mean over N*L of the binary cross-entropy with probabilities clamped to
// [1e-7, 1 - 1e-7].
double bce_loss(const Tensor& probs, const Tensor& targets);

// Gradient of the binary cross-entropy with respect to every parameter, via
// d loss / d logit = (p - y) / (N*L). This is the exact gradient of bce_loss
// wherever the probability clamp is inactive; inside the clamp it keeps
// pointing back toward the target instead of vanishing.
Parameters backward(const Model& model, const ForwardPass& pass, const Tensor& targets);

// d logit[cls] / d activation of `layer` for sample `sample` of the pass; shape [C, h, w].
Tensor activation_gradient(const Model& model, const ForwardPass& pass, std::size_t layer,
                           std::size_t sample, std::size_t cls);

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 16;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool checkpoint_every_epoch = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct Checkpoint {
  std::size_t epoch = 0;  // 1-based
  Model model;
  double mean_loss = 0.0;
};

// SGD with momentum; epoch order shuffled from cfg.seed. Returns one
// checkpoint per epoch (or only the last one when checkpointing is off).
// Throws TrainingDivergedError on a non-finite loss.
std::vector<Checkpoint> train(Model model, const Dataset& train_set, const TrainConfig& cfg);

struct PredictionRecord {
  std::vector<double> probs;
  LabelVector true_label;
  std::optional<LabelVector> infected_label;
  SampleId id = 0;

  bool is_infected() const { return infected_label.has_value(); }
};

std::vector<PredictionRecord> predict(const Model& model, const Dataset& ds);

// Layout: "BDCKPT01" magic, u32 format version, arch descriptor (u32 dims and
// layer specs, f64 input shift and scale), u64 seed,
// u64 parameter count, then parameters as little-endian f64 in declaration order.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
// Additionally rejects checkpoints whose architecture differs from `expected`.
Model load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected);

}  // namespace backdoor
