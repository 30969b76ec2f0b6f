#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "backdoor/dataset.hpp"
#include "backdoor/image_io.hpp"
#include "backdoor/model.hpp"
#include "backdoor/trigger.hpp"

namespace backdoor {

enum class TapLayer { Middle, Final };

std::string to_string(TapLayer layer);
TapLayer parse_tap_layer(const std::string& text);

struct SaliencyMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;  // row-major, min-max normalised to [0,1]
  TapLayer layer = TapLayer::Final;
  std::size_t target_class = 0;

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

// Intermediate quantities of one Grad-CAM evaluation, at tap resolution.
struct GradCamParts {
  Tensor activations;                 // [C, h, w]
  Tensor gradients;                   // d logit_t / d activations, [C, h, w]
  std::vector<double> channel_weights;  // spatial mean of gradients per channel
  std::vector<double> coarse;         // ReLU(sum_k w_k A_k), [h*w], before upsampling
  std::size_t tap_width = 0;
  std::size_t tap_height = 0;
};

GradCamParts gradcam_parts(const Model& model, const Image& image, std::size_t target_class, TapLayer layer);

// Grad-CAM of the class-t logit at the chosen tap, bilinearly resized to the
// image and min-max normalised. An all-zero map stays all-zero.
SaliencyMap gradcam(const Model& model, const Image& image, std::size_t target_class, TapLayer layer);

// Bilinear resize with half-pixel centres and edge clamping.
std::vector<double> bilinear_resize(const std::vector<double>& src, std::size_t src_w, std::size_t src_h,
                                    std::size_t dst_w, std::size_t dst_h);

// Square region (top-left + side) used to score localisation.
struct Region {
  Location at;
  std::size_t size = 0;
};

// Saliency mass inside `region` grown by `dilation` pixels (clipped to the
// image) divided by total mass; 0 when the map is all zero.
double localization_score(const SaliencyMap& map, const Region& region, std::size_t dilation);

inline constexpr double kOverlayAlpha = 0.4;

// Blue (low) to red (high) colour map blended at alpha 0.4 over the grayscale image.
RgbImage saliency_overlay(const Image& image, const SaliencyMap& map);
void write_saliency_overlay(const Image& image, const SaliencyMap& map, const std::filesystem::path& path);

}  // namespace backdoor
