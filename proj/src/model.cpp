#include "backdoor/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "backdoor/error.hpp"

namespace backdoor {

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  const std::size_t n =
      std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  data_.assign(n, fill);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---------------------------------------------------------------------------
// Architecture and parameters

ArchConfig ArchConfig::with_channels(std::size_t width, std::size_t height, std::size_t num_classes,
                                     const std::vector<std::size_t>& channels) {
  ArchConfig a;
  a.input_width = width;
  a.input_height = height;
  a.num_classes = num_classes;
  a.input_shift = kInputShift;
  a.input_scale = kInputScale;
  for (auto c : channels) a.conv_layers.push_back(ConvSpec{c, 3, 1, 1});
  a.final_tap = channels.empty() ? 0 : channels.size() - 1;
  a.middle_tap = a.final_tap == 0 ? 0 : a.final_tap - 1;
  return a;
}

ArchConfig ArchConfig::desk_default(std::size_t width, std::size_t height, std::size_t num_classes) {
  return with_channels(width, height, num_classes, {8, 16, 16});
}

std::pair<std::size_t, std::size_t> ArchConfig::output_dims(std::size_t layer) const {
  std::size_t h = input_height, w = input_width;
  for (std::size_t i = 0; i <= layer; ++i) {
    const auto& c = conv_layers.at(i);
    if (h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel) {
      throw Error("conv layer " + std::to_string(i) + " kernel exceeds its padded input");
    }
    h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
    w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
  }
  return {h, w};
}

void ArchConfig::validate() const {
  if (input_width == 0 || input_height == 0) throw Error("arch input dims must be positive");
  if (num_classes == 0) throw Error("arch needs at least one class");
  if (!std::isfinite(input_shift) || !std::isfinite(input_scale) || input_scale == 0.0) {
    throw Error("arch input standardisation must be finite with a non-zero scale");
  }
  if (conv_layers.size() < 2) throw Error("arch needs at least two conv layers (middle and final taps)");
  for (std::size_t i = 0; i < conv_layers.size(); ++i) {
    const auto& c = conv_layers[i];
    if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
      throw Error("conv layer " + std::to_string(i) + " has a zero channel/kernel/stride");
    }
  }
  if (final_tap != conv_layers.size() - 1) throw Error("final_tap must index the last conv layer");
  if (middle_tap >= final_tap) throw Error("middle_tap must precede final_tap");
  output_dims(conv_layers.size() - 1);
}

Parameters Parameters::zeros(const ArchConfig& arch) {
  Parameters p;
  for (std::size_t i = 0; i < arch.conv_layers.size(); ++i) {
    const auto& c = arch.conv_layers[i];
    p.conv.push_back(ConvParams{Tensor({c.out_channels, arch.in_channels(i), c.kernel, c.kernel}),
                                Tensor({c.out_channels})});
  }
  const std::size_t last = arch.conv_layers.empty() ? 0 : arch.conv_layers.back().out_channels;
  p.dense_weight = Tensor({arch.num_classes, last});
  p.dense_bias = Tensor({arch.num_classes});
  return p;
}

std::vector<Tensor*> Parameters::blocks() {
  std::vector<Tensor*> out;
  for (auto& c : conv) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  out.push_back(&dense_weight);
  out.push_back(&dense_bias);
  return out;
}

std::vector<const Tensor*> Parameters::blocks() const {
  std::vector<const Tensor*> out;
  for (const auto& c : conv) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  out.push_back(&dense_weight);
  out.push_back(&dense_bias);
  return out;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const auto* b : blocks()) n += b->size();
  return n;
}

Model init_model(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  Model m{arch, Parameters::zeros(arch), seed};
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < arch.conv_layers.size(); ++i) {
    const auto& c = arch.conv_layers[i];
    const double fan_in = static_cast<double>(arch.in_channels(i) * c.kernel * c.kernel);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (double& w : m.params.conv[i].weight.values()) w = dist(rng);
  }
  const double fan_in = static_cast<double>(arch.conv_layers.back().out_channels);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& w : m.params.dense_weight.values()) w = dist(rng);
  return m;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

struct Shape3 {
  std::size_t c, h, w;
  std::size_t size() const { return c * h * w; }
};

// Output positions o in [lo, hi) whose input index o*stride + k - pad lies in [0, in_len).
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad, std::size_t stride,
                                                std::size_t in_len, std::size_t out_len) {
  std::size_t lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  if (in_len + pad <= k) return {0, 0};
  const std::size_t hi = std::min(out_len, (in_len - 1 + pad - k) / stride + 1);
  return {std::min(lo, hi), hi};
}

void conv_forward(const double* in, Shape3 is, const ConvSpec& spec, const double* weight,
                  const double* bias, double* out, Shape3 os) {
  const std::size_t K = spec.kernel, S = spec.stride, P = spec.padding;
  const std::size_t plane = os.h * os.w;
  for (std::size_t o = 0; o < os.c; ++o) {
    double* op = out + o * plane;
    std::fill(op, op + plane, bias[o]);
    for (std::size_t c = 0; c < is.c; ++c) {
      const double* ip = in + c * is.h * is.w;
      const double* wk = weight + (o * is.c + c) * K * K;
      for (std::size_t ky = 0; ky < K; ++ky) {
        const auto [y0, y1] = valid_range(ky, P, S, is.h, os.h);
        for (std::size_t kx = 0; kx < K; ++kx) {
          const auto [x0, x1] = valid_range(kx, P, S, is.w, os.w);
          const double w = wk[ky * K + kx];
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const double* irow = ip + (oy * S + ky - P) * is.w;
            double* orow = op + oy * os.w;
            if (S == 1) {
              for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += w * irow[ox + kx - P];
            } else {
              for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += w * irow[ox * S + kx - P];
            }
          }
        }
      }
    }
  }
}

// Accumulates weight/bias gradients and (if d_in != nullptr) the input gradient.
void conv_backward(const double* in, Shape3 is, const ConvSpec& spec, const double* weight,
                   const double* d_out, Shape3 os, double* d_weight, double* d_bias, double* d_in) {
  const std::size_t K = spec.kernel, S = spec.stride, P = spec.padding;
  const std::size_t plane = os.h * os.w;
  for (std::size_t o = 0; o < os.c; ++o) {
    const double* dp = d_out + o * plane;
    if (d_bias) {
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += dp[i];
      d_bias[o] += s;
    }
    for (std::size_t c = 0; c < is.c; ++c) {
      const double* ip = in + c * is.h * is.w;
      double* dip = d_in ? d_in + c * is.h * is.w : nullptr;
      const std::size_t wbase = (o * is.c + c) * K * K;
      for (std::size_t ky = 0; ky < K; ++ky) {
        const auto [y0, y1] = valid_range(ky, P, S, is.h, os.h);
        for (std::size_t kx = 0; kx < K; ++kx) {
          const auto [x0, x1] = valid_range(kx, P, S, is.w, os.w);
          const double w = weight[wbase + ky * K + kx];
          double acc = 0.0;
          for (std::size_t oy = y0; oy < y1; ++oy) {
            const std::size_t iy = oy * S + ky - P;
            const double* drow = dp + oy * os.w;
            if (S == 1) {
              const double* irow = ip + iy * is.w;
              for (std::size_t ox = x0; ox < x1; ++ox) acc += drow[ox] * irow[ox + kx - P];
              if (dip) {
                double* drow_in = dip + iy * is.w;
                for (std::size_t ox = x0; ox < x1; ++ox) drow_in[ox + kx - P] += w * drow[ox];
              }
            } else {
              for (std::size_t ox = x0; ox < x1; ++ox) {
                const std::size_t ix = ox * S + kx - P;
                acc += drow[ox] * ip[iy * is.w + ix];
                if (dip) dip[iy * is.w + ix] += w * drow[ox];
              }
            }
          }
          if (d_weight) d_weight[wbase + ky * K + kx] += acc;
        }
      }
    }
  }
}

double sigmoid(double z) {
  double p;
  if (z >= 0) {
    p = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    p = e / (1.0 + e);
  }
  // Keep probabilities strictly inside (0,1) even when the exponent saturates.
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

Shape3 layer_input_shape(const ArchConfig& arch, std::size_t layer) {
  if (layer == 0) return {1, arch.input_height, arch.input_width};
  const auto [h, w] = arch.output_dims(layer - 1);
  return {arch.conv_layers[layer - 1].out_channels, h, w};
}

Shape3 layer_output_shape(const ArchConfig& arch, std::size_t layer) {
  const auto [h, w] = arch.output_dims(layer);
  return {arch.conv_layers[layer].out_channels, h, w};
}

void relu_inplace(double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) p[i] = p[i] > 0.0 ? p[i] : 0.0;
}

// Global average pool + dense head for one sample's last activation.
void head_forward(const Model& m, const double* act, Shape3 s, double* pooled, double* logits) {
  const std::size_t plane = s.h * s.w;
  for (std::size_t k = 0; k < s.c; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += act[k * plane + i];
    pooled[k] = sum / static_cast<double>(plane);
  }
  const std::size_t L = m.arch.num_classes;
  for (std::size_t l = 0; l < L; ++l) {
    double z = m.params.dense_bias[l];
    for (std::size_t k = 0; k < s.c; ++k) z += m.params.dense_weight[l * s.c + k] * pooled[k];
    logits[l] = z;
  }
}

void check_params(const Model& m) {
  const auto expect = Parameters::zeros(m.arch);
  const auto a = expect.blocks();
  const auto b = m.params.blocks();
  if (a.size() != b.size()) throw Error("parameter layout inconsistent with arch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->shape() != b[i]->shape()) throw Error("parameter shape inconsistent with arch");
  }
}

// Backpropagates d(objective)/d(logits) of one sample. Parameter gradients are
// accumulated into `grads` when given; with `stop_layer` set, the gradient
// w.r.t. that layer's activation is written to `d_act_out` and the walk stops.
void backprop_sample(const Model& m, const ForwardPass& pass, std::size_t n, const double* dlogit,
                     Parameters* grads, std::optional<std::size_t> stop_layer, Tensor* d_act_out) {
  const auto& arch = m.arch;
  const std::size_t last = arch.conv_layers.size() - 1;
  const Shape3 ls = layer_output_shape(arch, last);
  const std::size_t L = arch.num_classes;

  std::vector<double> d_act(ls.size());
  const double inv_plane = 1.0 / static_cast<double>(ls.h * ls.w);
  for (std::size_t k = 0; k < ls.c; ++k) {
    double dp = 0.0;
    for (std::size_t l = 0; l < L; ++l) dp += m.params.dense_weight[l * ls.c + k] * dlogit[l];
    std::fill_n(d_act.begin() + static_cast<std::ptrdiff_t>(k * ls.h * ls.w), ls.h * ls.w, dp * inv_plane);
  }
  if (grads) {
    const double* pooled = pass.pooled.data() + n * ls.c;
    for (std::size_t l = 0; l < L; ++l) {
      grads->dense_bias[l] += dlogit[l];
      for (std::size_t k = 0; k < ls.c; ++k) grads->dense_weight[l * ls.c + k] += dlogit[l] * pooled[k];
    }
  }

  std::vector<double> d_in;
  for (std::size_t layer = last + 1; layer-- > 0;) {
    const Shape3 os = layer_output_shape(arch, layer);
    const Shape3 is = layer_input_shape(arch, layer);
    if (stop_layer && *stop_layer == layer) {
      *d_act_out = Tensor({os.c, os.h, os.w});
      std::copy(d_act.begin(), d_act.end(), d_act_out->data());
      return;
    }
    const double* act = pass.activations[layer].data() + n * os.size();
    for (std::size_t i = 0; i < os.size(); ++i) {
      if (!(act[i] > 0.0)) d_act[i] = 0.0;
    }
    const double* in = layer == 0 ? pass.input.data() + n * is.size()
                                  : pass.activations[layer - 1].data() + n * is.size();
    const bool need_input_grad = layer > 0 && (!stop_layer || *stop_layer < layer);
    if (!grads && !need_input_grad) return;
    d_in.assign(need_input_grad ? is.size() : 0, 0.0);
    conv_backward(in, is, arch.conv_layers[layer], m.params.conv[layer].weight.data(), d_act.data(), os,
                  grads ? grads->conv[layer].weight.data() : nullptr,
                  grads ? grads->conv[layer].bias.data() : nullptr,
                  need_input_grad ? d_in.data() : nullptr);
    if (!need_input_grad) break;
    d_act.swap(d_in);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward / loss / backward

Tensor images_to_batch(std::span<const Image* const> images) {
  if (images.empty()) return Tensor({0, 1, 0, 0});
  const std::size_t w = images[0]->width(), h = images[0]->height();
  Tensor t({images.size(), 1, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->width() != w || images[n]->height() != h) throw Error("batch images differ in size");
    std::copy(images[n]->pixels().begin(), images[n]->pixels().end(), t.data() + n * w * h);
  }
  return t;
}

Tensor images_to_batch(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return images_to_batch(std::span<const Image* const>(ptrs));
}

Tensor labels_to_targets(std::span<const LabelVector* const> labels) {
  const std::size_t L = labels.empty() ? 0 : labels[0]->size();
  Tensor t({labels.size(), L});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n]->size() != L) throw Error("label vectors differ in length");
    for (std::size_t l = 0; l < L; ++l) t[n * L + l] = labels[n]->test(l) ? 1.0 : 0.0;
  }
  return t;
}

ForwardPass forward(const Model& model, const Tensor& batch) {
  const auto& arch = model.arch;
  if (batch.shape().size() != 4 || batch.dim(1) != 1 || batch.dim(2) != arch.input_height ||
      batch.dim(3) != arch.input_width) {
    throw Error("batch shape does not match arch input " + std::to_string(arch.input_width) + "x" +
                std::to_string(arch.input_height));
  }
  check_params(model);
  const std::size_t N = batch.dim(0);
  ForwardPass pass;
  pass.input = batch;
  for (double& v : pass.input.values()) v = (v - arch.input_shift) * arch.input_scale;
  for (std::size_t layer = 0; layer < arch.conv_layers.size(); ++layer) {
    const Shape3 is = layer_input_shape(arch, layer);
    const Shape3 os = layer_output_shape(arch, layer);
    Tensor out({N, os.c, os.h, os.w});
    const double* in = layer == 0 ? pass.input.data() : pass.activations[layer - 1].data();
    for (std::size_t n = 0; n < N; ++n) {
      double* op = out.data() + n * os.size();
      conv_forward(in + n * is.size(), is, arch.conv_layers[layer], model.params.conv[layer].weight.data(),
                   model.params.conv[layer].bias.data(), op, os);
      relu_inplace(op, os.size());
    }
    pass.activations.push_back(std::move(out));
  }
  const Shape3 ls = layer_output_shape(arch, arch.conv_layers.size() - 1);
  const std::size_t L = arch.num_classes;
  pass.pooled = Tensor({N, ls.c});
  pass.logits = Tensor({N, L});
  pass.probs = Tensor({N, L});
  for (std::size_t n = 0; n < N; ++n) {
    head_forward(model, pass.activations.back().data() + n * ls.size(), ls, pass.pooled.data() + n * ls.c,
                 pass.logits.data() + n * L);
    for (std::size_t l = 0; l < L; ++l) pass.probs[n * L + l] = sigmoid(pass.logits[n * L + l]);
  }
  return pass;
}

std::vector<double> logits_from_activation(const Model& model, std::size_t layer, const Tensor& activation) {
  const auto& arch = model.arch;
  if (layer >= arch.conv_layers.size()) throw Error("no conv layer " + std::to_string(layer));
  Shape3 s = layer_output_shape(arch, layer);
  if (activation.size() != s.size()) throw Error("activation shape does not match layer output");
  std::vector<double> cur(activation.values().begin(), activation.values().end());
  for (std::size_t i = layer + 1; i < arch.conv_layers.size(); ++i) {
    const Shape3 os = layer_output_shape(arch, i);
    std::vector<double> next(os.size());
    conv_forward(cur.data(), s, arch.conv_layers[i], model.params.conv[i].weight.data(),
                 model.params.conv[i].bias.data(), next.data(), os);
    relu_inplace(next.data(), next.size());
    cur.swap(next);
    s = os;
  }
  std::vector<double> pooled(s.c), logits(arch.num_classes);
  head_forward(model, cur.data(), s, pooled.data(), logits.data());
  return logits;
}

double bce_loss(const Tensor& probs, const Tensor& targets) {
  if (probs.shape() != targets.shape() || probs.shape().size() != 2) {
    throw Error("bce_loss: probs and targets must both be [N, L]");
  }
  if (probs.empty()) throw Error("bce_loss: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kProbClamp, 1.0 - kProbClamp);
    const double y = targets[i];
    sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return sum / static_cast<double>(probs.size());
}

Parameters backward(const Model& model, const ForwardPass& pass, const Tensor& targets) {
  const std::size_t N = pass.batch_size();
  const std::size_t L = model.arch.num_classes;
  if (N == 0 || pass.activations.size() != model.arch.conv_layers.size() || pass.probs.size() != N * L) {
    throw Error("backward: no matching forward pass available");
  }
  if (targets.shape() != pass.probs.shape()) throw Error("backward: targets shape mismatch");

  Parameters grads = Parameters::zeros(model.arch);
  const double scale = 1.0 / static_cast<double>(N * L);
  std::vector<double> dlogit(L);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t l = 0; l < L; ++l) {
      dlogit[l] = (pass.probs[n * L + l] - targets[n * L + l]) * scale;
    }
    backprop_sample(model, pass, n, dlogit.data(), &grads, std::nullopt, nullptr);
  }
  return grads;
}

Tensor activation_gradient(const Model& model, const ForwardPass& pass, std::size_t layer,
                           std::size_t sample, std::size_t cls) {
  if (layer >= model.arch.conv_layers.size()) throw Error("no conv layer " + std::to_string(layer));
  if (cls >= model.arch.num_classes) throw Error("class index out of range");
  if (sample >= pass.batch_size() || pass.activations.size() != model.arch.conv_layers.size()) {
    throw Error("activation_gradient: no matching forward pass available");
  }
  std::vector<double> dlogit(model.arch.num_classes, 0.0);
  dlogit[cls] = 1.0;
  Tensor out;
  backprop_sample(model, pass, sample, dlogit.data(), nullptr, layer, &out);
  return out;
}

// ---------------------------------------------------------------------------
// Training and prediction

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("epochs must be >= 1");
  if (batch_size < 1) throw Error("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must be in [0,1)");
}

namespace {

void check_dataset_dims(const ArchConfig& arch, const Dataset& ds) {
  if (ds.width != arch.input_width || ds.height != arch.input_height) {
    throw Error("dataset dims " + std::to_string(ds.width) + "x" + std::to_string(ds.height) +
                " do not match arch input " + std::to_string(arch.input_width) + "x" +
                std::to_string(arch.input_height));
  }
  if (ds.num_classes != arch.num_classes) throw Error("dataset class count does not match arch");
}

}  // namespace

std::vector<Checkpoint> train(Model model, const Dataset& train_set, const TrainConfig& cfg) {
  cfg.validate();
  model.arch.validate();
  check_dataset_dims(model.arch, train_set);
  if (train_set.empty()) throw Error("cannot train on an empty dataset");

  Parameters velocity = Parameters::zeros(model.arch);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<Checkpoint> checkpoints;
  std::vector<const Image*> images;
  std::vector<const LabelVector*> labels;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      images.clear();
      labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train_set.samples[order[i]];
        images.push_back(&s.image);
        labels.push_back(&s.training_label());
      }
      const Tensor targets = labels_to_targets(labels);
      const ForwardPass pass = forward(model, images_to_batch(images));
      const double loss = bce_loss(pass.probs, targets);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss at epoch " << epoch << ", batch starting at " << start
            << " (lr=" << cfg.learning_rate << ")";
        throw TrainingDivergedError(msg.str());
      }
      loss_sum += loss * static_cast<double>(end - start);
      const Parameters grads = backward(model, pass, targets);

      auto p = model.params.blocks();
      auto v = velocity.blocks();
      const auto g = grads.blocks();
      for (std::size_t b = 0; b < p.size(); ++b) {
        double* pp = p[b]->data();
        double* vp = v[b]->data();
        const double* gp = g[b]->data();
        for (std::size_t i = 0; i < p[b]->size(); ++i) {
          vp[i] = cfg.momentum * vp[i] - cfg.learning_rate * gp[i];
          pp[i] += vp[i];
        }
      }
    }
    for (const auto* b : model.params.blocks()) {
      if (!b->all_finite()) {
        throw TrainingDivergedError("training diverged: non-finite parameters after epoch " +
                                    std::to_string(epoch));
      }
    }
    if (cfg.checkpoint_every_epoch || epoch == cfg.epochs) {
      checkpoints.push_back(Checkpoint{epoch, model, loss_sum / static_cast<double>(order.size())});
    }
  }
  return checkpoints;
}

std::vector<PredictionRecord> predict(const Model& model, const Dataset& ds) {
  check_dataset_dims(model.arch, ds);
  constexpr std::size_t kChunk = 64;
  const std::size_t L = model.arch.num_classes;
  std::vector<PredictionRecord> out;
  out.reserve(ds.size());
  std::vector<const Image*> images;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    const std::size_t end = std::min(ds.size(), start + kChunk);
    images.clear();
    for (std::size_t i = start; i < end; ++i) images.push_back(&ds.samples[i].image);
    const ForwardPass pass = forward(model, images_to_batch(images));
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = ds.samples[i];
      const double* row = pass.probs.data() + (i - start) * L;
      out.push_back(PredictionRecord{std::vector<double>(row, row + L), s.true_label, s.infected_label, s.id});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint files

namespace {

constexpr char kMagic[8] = {'B', 'D', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  check_params(model);
  const auto& a = model.arch;
  std::string buf(kMagic, sizeof kMagic);
  put_u32(buf, kFormatVersion);
  put_u32(buf, static_cast<std::uint32_t>(a.input_width));
  put_u32(buf, static_cast<std::uint32_t>(a.input_height));
  put_u32(buf, static_cast<std::uint32_t>(a.num_classes));
  put_u32(buf, static_cast<std::uint32_t>(a.conv_layers.size()));
  for (const auto& c : a.conv_layers) {
    put_u32(buf, static_cast<std::uint32_t>(c.out_channels));
    put_u32(buf, static_cast<std::uint32_t>(c.kernel));
    put_u32(buf, static_cast<std::uint32_t>(c.stride));
    put_u32(buf, static_cast<std::uint32_t>(c.padding));
  }
  put_u32(buf, static_cast<std::uint32_t>(a.middle_tap));
  put_u32(buf, static_cast<std::uint32_t>(a.final_tap));
  put_u64(buf, std::bit_cast<std::uint64_t>(a.input_shift));
  put_u64(buf, std::bit_cast<std::uint64_t>(a.input_scale));
  put_u64(buf, model.seed);
  put_u64(buf, model.params.count());
  for (const auto* b : model.params.blocks()) {
    for (double v : b->values()) put_u64(buf, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());

  if (r.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
    throw IoError("not a checkpoint (bad magic): " + path.string());
  }
  const auto version = r.u32();
  if (version != kFormatVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  Model m;
  m.arch.input_width = r.u32();
  m.arch.input_height = r.u32();
  m.arch.num_classes = r.u32();
  const auto layers = r.u32();
  if (layers > 1024) throw IoError("implausible conv layer count in " + path.string());
  for (std::uint32_t i = 0; i < layers; ++i) {
    ConvSpec c;
    c.out_channels = r.u32();
    c.kernel = r.u32();
    c.stride = r.u32();
    c.padding = r.u32();
    m.arch.conv_layers.push_back(c);
  }
  m.arch.middle_tap = r.u32();
  m.arch.final_tap = r.u32();
  m.arch.input_shift = r.f64();
  m.arch.input_scale = r.f64();
  try {
    m.arch.validate();
  } catch (const Error& e) {
    throw IoError(std::string("invalid arch in checkpoint: ") + e.what());
  }
  m.seed = r.u64();
  m.params = Parameters::zeros(m.arch);
  if (r.u64() != m.params.count()) throw IoError("checkpoint parameter count does not match its arch");
  for (auto* b : m.params.blocks()) {
    for (double& v : b->values()) v = r.f64();
  }
  if (!r.at_end()) throw IoError("trailing bytes in checkpoint " + path.string());
  return m;
}

Model load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected) {
  Model m = load_checkpoint(path);
  if (!(m.arch == expected)) throw Error("checkpoint architecture mismatch: " + path.string());
  return m;
}

}  // namespace backdoor
