#include "backdoor/explain.hpp"

#include <algorithm>
#include <cmath>

#include "backdoor/error.hpp"

namespace backdoor {

std::string to_string(TapLayer layer) { return layer == TapLayer::Middle ? "middle" : "final"; }

TapLayer parse_tap_layer(const std::string& text) {
  if (text == "middle") return TapLayer::Middle;
  if (text == "final") return TapLayer::Final;
  throw Error("unknown layer '" + text + "' (expected middle or final)");
}

GradCamParts gradcam_parts(const Model& model, const Image& image, std::size_t target_class, TapLayer layer) {
  if (target_class >= model.arch.num_classes) throw Error("class index out of range");
  const std::size_t tap = layer == TapLayer::Middle ? model.arch.middle_tap : model.arch.final_tap;
  if (tap >= model.arch.conv_layers.size()) throw Error("model has no " + to_string(layer) + " tap");

  const Image* one[] = {&image};
  const ForwardPass pass = forward(model, images_to_batch(one));

  GradCamParts parts;
  const auto [h, w] = model.arch.output_dims(tap);
  const std::size_t C = model.arch.conv_layers[tap].out_channels;
  const std::size_t plane = h * w;
  parts.tap_width = w;
  parts.tap_height = h;
  parts.activations = Tensor({C, h, w});
  std::copy_n(pass.activations[tap].data(), C * plane, parts.activations.data());
  parts.gradients = activation_gradient(model, pass, tap, 0, target_class);

  parts.channel_weights.assign(C, 0.0);
  for (std::size_t k = 0; k < C; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += parts.gradients[k * plane + i];
    parts.channel_weights[k] = s / static_cast<double>(plane);
  }
  parts.coarse.assign(plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i) {
    double v = 0.0;
    for (std::size_t k = 0; k < C; ++k) v += parts.channel_weights[k] * parts.activations[k * plane + i];
    parts.coarse[i] = std::max(v, 0.0);
  }
  return parts;
}

std::vector<double> bilinear_resize(const std::vector<double>& src, std::size_t src_w, std::size_t src_h,
                                    std::size_t dst_w, std::size_t dst_h) {
  if (src.size() != src_w * src_h || src.empty()) throw Error("bilinear_resize: bad source dims");
  if (src_w == dst_w && src_h == dst_h) return src;

  auto coord = [](std::size_t d, std::size_t s_len, std::size_t d_len, std::size_t& i0, std::size_t& i1,
                  double& frac) {
    double s = (static_cast<double>(d) + 0.5) * static_cast<double>(s_len) / static_cast<double>(d_len) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(s_len - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, s_len - 1);
    frac = s - static_cast<double>(i0);
  };

  std::vector<double> out(dst_w * dst_h);
  for (std::size_t y = 0; y < dst_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, src_h, dst_h, y0, y1, fy);
    for (std::size_t x = 0; x < dst_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, src_w, dst_w, x0, x1, fx);
      const double top = src[y0 * src_w + x0] * (1 - fx) + src[y0 * src_w + x1] * fx;
      const double bot = src[y1 * src_w + x0] * (1 - fx) + src[y1 * src_w + x1] * fx;
      out[y * dst_w + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

SaliencyMap gradcam(const Model& model, const Image& image, std::size_t target_class, TapLayer layer) {
  const GradCamParts parts = gradcam_parts(model, image, target_class, layer);
  SaliencyMap map;
  map.width = image.width();
  map.height = image.height();
  map.layer = layer;
  map.target_class = target_class;
  map.values = bilinear_resize(parts.coarse, parts.tap_width, parts.tap_height, map.width, map.height);

  const auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi - lo > 0.0) {
    for (double& v : map.values) v = (v - lo) / (hi - lo);
  } else {
    // Flat map: zero stays zero, a flat positive map is uniformly salient.
    std::fill(map.values.begin(), map.values.end(), hi > 0.0 ? 1.0 : 0.0);
  }
  return map;
}

double localization_score(const SaliencyMap& map, const Region& region, std::size_t dilation) {
  if (map.values.size() != map.width * map.height) throw Error("saliency map dims inconsistent");
  if (region.at.x + region.size > map.width || region.at.y + region.size > map.height) {
    throw Error("localisation region out of bounds");
  }
  const std::size_t x0 = region.at.x >= dilation ? region.at.x - dilation : 0;
  const std::size_t y0 = region.at.y >= dilation ? region.at.y - dilation : 0;
  const std::size_t x1 = std::min(map.width, region.at.x + region.size + dilation);
  const std::size_t y1 = std::min(map.height, region.at.y + region.size + dilation);

  double inside = 0.0, total = 0.0;
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = map.at(x, y);
      total += v;
      if (x >= x0 && x < x1 && y >= y0 && y < y1) inside += v;
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

namespace {

// Jet-style map: dark blue at 0, dark red at 1.
void colormap(double v, double rgb[3]) {
  auto ramp = [](double t) { return std::clamp(1.5 - std::abs(t), 0.0, 1.0); };
  rgb[0] = ramp(4.0 * v - 3.0);
  rgb[1] = ramp(4.0 * v - 2.0);
  rgb[2] = ramp(4.0 * v - 1.0);
}

}  // namespace

RgbImage saliency_overlay(const Image& image, const SaliencyMap& map) {
  if (image.width() != map.width || image.height() != map.height) {
    throw Error("saliency map dims do not match image");
  }
  RgbImage out{image.width(), image.height(), std::vector<std::uint8_t>(3 * image.size())};
  for (std::size_t y = 0; y < image.height(); ++y) {
    for (std::size_t x = 0; x < image.width(); ++x) {
      double rgb[3];
      colormap(map.at(x, y), rgb);
      const double g = image.at(x, y);
      auto* px = out.pixel(x, y);
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - kOverlayAlpha) * g + kOverlayAlpha * rgb[c];
        px[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return out;
}

void write_saliency_overlay(const Image& image, const SaliencyMap& map, const std::filesystem::path& path) {
  write_png(saliency_overlay(image, map), path);
}

}  // namespace backdoor
