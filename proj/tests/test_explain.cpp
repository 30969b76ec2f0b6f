#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "backdoor/error.hpp"
#include "backdoor/explain.hpp"
#include "oracles.hpp"

using namespace backdoor;
namespace fs = std::filesystem;

namespace {

// 2x2 input, two 1x1 pass-through convs, one dense unit with weight `w`:
// logit = w * mean(relu(x)) + b.
Model pass_through_net(double w) {
  ArchConfig a;
  a.input_width = 2;
  a.input_height = 2;
  a.num_classes = 1;
  a.conv_layers = {ConvSpec{1, 1, 1, 0}, ConvSpec{1, 1, 1, 0}};
  a.middle_tap = 0;
  a.final_tap = 1;
  Model m{a, Parameters::zeros(a), 0};
  m.params.conv[0].weight[0] = 1.0;
  m.params.conv[1].weight[0] = 1.0;
  m.params.dense_weight[0] = w;
  m.params.dense_bias[0] = 0.3;
  return m;
}

SaliencyMap map_from(std::size_t w, std::size_t h, std::vector<double> v) {
  SaliencyMap m;
  m.width = w;
  m.height = h;
  m.values = std::move(v);
  return m;
}

double scalar_localization(const SaliencyMap& m, const Region& r, std::size_t d) {
  double in = 0.0, all = 0.0;
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      const long lx = static_cast<long>(r.at.x) - static_cast<long>(d);
      const long ly = static_cast<long>(r.at.y) - static_cast<long>(d);
      const long hx = static_cast<long>(r.at.x + r.size + d);
      const long hy = static_cast<long>(r.at.y + r.size + d);
      const long ix = static_cast<long>(x), iy = static_cast<long>(y);
      all += m.at(x, y);
      if (ix >= lx && ix < hx && iy >= ly && iy < hy) in += m.at(x, y);
    }
  }
  return all > 0.0 ? in / all : 0.0;
}

}  // namespace

TEST_CASE("tap layer names") {
  CHECK(to_string(TapLayer::Middle) == "middle");
  CHECK(to_string(TapLayer::Final) == "final");
  CHECK(parse_tap_layer("middle") == TapLayer::Middle);
  CHECK(parse_tap_layer("final") == TapLayer::Final);
  CHECK_THROWS_AS(parse_tap_layer("first"), Error);
}

TEST_CASE("zero final-conv weights give an all-zero map") {
  Model m = init_model(ArchConfig::desk_default(16, 16, 4), 1);
  m.params.conv[2].weight.fill(0.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(256);
  for (double& v : px) v = u(rng);
  const auto map = gradcam(m, Image(16, 16, px), 0, TapLayer::Final);
  REQUIRE(map.values.size() == 256);
  for (double v : map.values) CHECK(v == 0.0);
}

TEST_CASE("hand-computed 2x2 Grad-CAM") {
  const Image img(2, 2, std::vector<double>{0.1, 0.3, 0.5, 0.9});
  SUBCASE("positive dense weight") {
    const Model m = pass_through_net(2.0);
    const auto parts = gradcam_parts(m, img, 0, TapLayer::Final);
    // d logit / d A = w / 4 at every position.
    REQUIRE(parts.channel_weights.size() == 1);
    CHECK(std::abs(parts.channel_weights[0] - 0.5) < 1e-12);
    const double expect_coarse[4] = {0.05, 0.15, 0.25, 0.45};
    for (int i = 0; i < 4; ++i) CHECK(std::abs(parts.coarse[i] - expect_coarse[i]) < 1e-12);
    const auto map = gradcam(m, img, 0, TapLayer::Final);
    const double expect[4] = {0.0, 0.25, 0.5, 1.0};
    for (int i = 0; i < 4; ++i) CHECK(std::abs(map.values[i] - expect[i]) < 1e-12);
  }
  SUBCASE("negative weight is removed by the ReLU") {
    const auto map = gradcam(pass_through_net(-2.0), img, 0, TapLayer::Final);
    for (double v : map.values) CHECK(v == 0.0);
  }
  SUBCASE("middle tap") {
    const auto map = gradcam(pass_through_net(2.0), img, 0, TapLayer::Middle);
    CHECK(map.layer == TapLayer::Middle);
    CHECK(std::abs(map.values[3] - 1.0) < 1e-12);
  }
}

TEST_CASE("bilinear resize with half-pixel centres") {
  const std::vector<double> src{0.0, 1.0, 2.0, 3.0};
  const auto up = bilinear_resize(src, 2, 2, 4, 4);
  REQUIRE(up.size() == 16);
  // Sample positions -0.25, 0.25, 0.75, 1.25 clamp to weights 0, .25, .75, 1.
  const double along[4] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) CHECK(std::abs(up[y * 4 + x] - (along[x] + 2.0 * along[y])) < 1e-12);
  }
  CHECK(bilinear_resize(src, 2, 2, 2, 2) == src);
  CHECK_THROWS_AS(bilinear_resize(src, 3, 2, 4, 4), Error);
}

TEST_CASE("activation gradients match finite differences of the logit") {
  std::mt19937_64 rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto net = oracle::random_small_net(rng);
    const auto& m = net.model;
    const auto pass = forward(m, net.batch);
    const std::size_t L = m.arch.num_classes;
    for (std::size_t layer : {m.arch.middle_tap, m.arch.final_tap}) {
      const auto& act = pass.activations[layer];
      const std::size_t per = act.size() / act.dim(0);
      Tensor one({act.dim(1), act.dim(2), act.dim(3)});
      for (std::size_t i = 0; i < per; ++i) one[i] = act[i];
      for (std::size_t cls = 0; cls < L; ++cls) {
        const Tensor g = activation_gradient(m, pass, layer, 0, cls);
        REQUIRE(g.size() == per);
        const double h = 1e-5;
        for (std::size_t i = 0; i < per; ++i) {
          Tensor up = one, down = one;
          up[i] += h;
          down[i] -= h;
          const double num =
              (logits_from_activation(m, layer, up)[cls] - logits_from_activation(m, layer, down)[cls]) / (2 * h);
          const double denom = std::max({std::abs(num), std::abs(g[i]), 1e-6});
          worst = std::max(worst, std::abs(num - g[i]) / denom);
        }
      }
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("Grad-CAM is deterministic and normalised") {
  const Model m = init_model(ArchConfig::desk_default(16, 16, 4), 3);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(256);
  for (double& v : px) v = u(rng);
  const Image img(16, 16, px);
  for (auto layer : {TapLayer::Middle, TapLayer::Final}) {
    for (std::size_t t = 0; t < 4; ++t) {
      const auto a = gradcam(m, img, t, layer);
      CHECK(a.values == gradcam(m, img, t, layer).values);
      const auto parts = gradcam_parts(m, img, t, layer);
      for (double v : parts.coarse) CHECK(v >= 0.0);
      const auto [lo, hi] = std::minmax_element(a.values.begin(), a.values.end());
      CHECK(*lo >= 0.0);
      CHECK(*hi <= 1.0);
      if (*hi > 0.0) CHECK(*lo == 0.0);
    }
  }
  CHECK_THROWS(gradcam(m, img, 4, TapLayer::Final));
}

TEST_CASE("localisation score") {
  SUBCASE("uniform map") {
    const auto map = map_from(16, 16, std::vector<double>(256, 0.4));
    CHECK(std::abs(localization_score(map, Region{{6, 6}, 3}, 0) - 9.0 / 256.0) < 1e-12);
  }
  SUBCASE("all mass inside") {
    std::vector<double> v(256, 0.0);
    v[7 * 16 + 7] = 1.0;
    v[6 * 16 + 8] = 0.5;
    CHECK(localization_score(map_from(16, 16, v), Region{{6, 6}, 3}, 0) == 1.0);
  }
  SUBCASE("all-zero map scores zero") {
    CHECK(localization_score(map_from(4, 4, std::vector<double>(16, 0.0)), Region{{0, 0}, 2}, 1) == 0.0);
  }
  SUBCASE("out of bounds region") {
    CHECK_THROWS_AS(localization_score(map_from(4, 4, std::vector<double>(16, 1.0)), Region{{3, 3}, 2}, 0), Error);
  }
  SUBCASE("random maps against the scalar oracle, monotone in dilation") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> size(1, 4), pos(0, 12);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> v(256);
      for (double& x : v) x = u(rng);
      const auto map = map_from(16, 16, v);
      const Region r{{pos(rng), pos(rng)}, size(rng)};
      double prev = -1.0;
      for (std::size_t d = 0; d <= 5; ++d) {
        const double s = localization_score(map, r, d);
        CHECK(std::abs(s - scalar_localization(map, r, d)) < 1e-12);
        CHECK(s >= prev);
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
        prev = s;
      }
    }
  }
}

TEST_CASE("saliency overlay") {
  const Image gray(5, 4, 0.5);
  SUBCASE("dims match the input") {
    const auto rgb = saliency_overlay(gray, map_from(5, 4, std::vector<double>(20, 0.3)));
    CHECK(rgb.width == 5);
    CHECK(rgb.height == 4);
    CHECK(rgb.data.size() == 60);
  }
  SUBCASE("all-zero map tints blue") {
    const auto rgb = saliency_overlay(gray, map_from(5, 4, std::vector<double>(20, 0.0)));
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 5; ++x) {
        const auto* p = rgb.pixel(x, y);
        CHECK(p[2] > p[0]);
        CHECK(p[2] > p[1]);
      }
    }
  }
  SUBCASE("single maximum is a red hotspot") {
    std::vector<double> v(20, 0.0);
    v[2 * 5 + 3] = 1.0;
    const auto rgb = saliency_overlay(gray, map_from(5, 4, v));
    const auto* hot = rgb.pixel(3, 2);
    CHECK(hot[0] > hot[2]);
    CHECK(hot[0] > hot[1]);
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 5; ++x) {
        if (x != 3 || y != 2) CHECK(rgb.pixel(x, y)[0] < hot[0]);
      }
    }
  }
  SUBCASE("mismatched dims") {
    CHECK_THROWS_AS(saliency_overlay(gray, map_from(4, 4, std::vector<double>(16, 0.0))), Error);
  }
  SUBCASE("PNG on disk") {
    const fs::path path = fs::temp_directory_path() / "backdoor_test_overlay.png";
    fs::remove(path);
    write_saliency_overlay(gray, map_from(5, 4, std::vector<double>(20, 0.5)), path);
    REQUIRE(fs::exists(path));
    std::ifstream f(path, std::ios::binary);
    char sig[8];
    f.read(sig, 8);
    CHECK(std::string(sig + 1, 3) == "PNG");
    fs::remove(path);
  }
}
