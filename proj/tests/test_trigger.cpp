#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "backdoor/dataset.hpp"
#include "backdoor/error.hpp"
#include "backdoor/trigger.hpp"

using namespace backdoor;
namespace fs = std::filesystem;

namespace {

Dataset synth(std::size_t n, std::uint64_t seed = 5) {
  SynthConfig c;
  c.num_samples = n;
  c.seed = seed;
  return generate_synthetic(c);
}

Image random_image(std::mt19937_64& rng, std::size_t w, std::size_t h) {
  std::uniform_real_distribution<double> px(0.0, 1.0);
  std::vector<double> data(w * h);
  for (double& v : data) v = px(rng);
  return Image(w, h, std::move(data));
}

}  // namespace

TEST_CASE("3x3 black trigger at the centre of a white 8x8 image") {
  const Image white(8, 8, 1.0);
  TriggerSpec spec;
  spec.size = 3;
  const Location at = center_location(3, 8, 8);
  CHECK(at == Location{2, 2});
  const Image out = apply_trigger(white, spec, at);
  std::size_t zeros = 0, ones = 0;
  for (double v : out.pixels()) {
    zeros += v == 0.0;
    ones += v == 1.0;
  }
  CHECK(zeros == 9);
  CHECK(ones == 55);
  for (std::size_t y = 2; y < 5; ++y) {
    for (std::size_t x = 2; x < 5; ++x) CHECK(out.at(x, y) == 0.0);
  }
}

TEST_CASE("trigger that does not fit is rejected") {
  TriggerSpec spec;
  spec.size = 4;
  CHECK_THROWS_AS(apply_trigger(Image(8, 8, 1.0), spec, Location{6, 6}), Error);
  CHECK_NOTHROW(apply_trigger(Image(8, 8, 1.0), spec, Location{4, 4}));
  spec.intensity = 1.5;
  CHECK_THROWS_AS(apply_trigger(Image(8, 8, 1.0), spec, Location{0, 0}), Error);
}

TEST_CASE("zero-size trigger is the identity") {
  std::mt19937_64 rng(3);
  const Image x = random_image(rng, 6, 5);
  TriggerSpec spec;
  spec.size = 0;
  CHECK(apply_trigger(x, spec, Location{2, 2}) == x);
}

TEST_CASE("injection locality and idempotence over random cases") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(4, 12);
    const std::size_t w = dim(rng), h = dim(rng);
    const Image x = random_image(rng, w, h);
    TriggerSpec spec;
    spec.size = std::uniform_int_distribution<std::size_t>(1, std::min(w, h))(rng);
    spec.intensity = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    spec.placement = RandomPlacement{};
    const Location at = resolve_location(spec, w, h, rng);
    const Image once = apply_trigger(x, spec, at);
    CHECK(apply_trigger(once, spec, at) == once);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const bool inside = xx >= at.x && xx < at.x + spec.size && y >= at.y && y < at.y + spec.size;
        if (inside) CHECK(once.at(xx, y) == spec.intensity);
        else CHECK(once.at(xx, y) == x.at(xx, y));
      }
    }
  }
}

TEST_CASE("placement parsing and resolution") {
  CHECK(std::holds_alternative<CenterPlacement>(parse_placement("center")));
  CHECK(std::holds_alternative<RandomPlacement>(parse_placement("random")));
  const Placement fixed = parse_placement("3,4");
  REQUIRE(std::holds_alternative<FixedPlacement>(fixed));
  CHECK(std::get<FixedPlacement>(fixed).at == Location{3, 4});
  CHECK(to_string(fixed) == "3,4");
  CHECK(to_string(Placement{CenterPlacement{}}) == "center");
  CHECK_THROWS_AS(parse_placement("middle"), Error);
  CHECK_THROWS_AS(parse_placement("3,"), Error);
  CHECK_THROWS_AS(parse_placement("3,4x"), Error);

  std::mt19937_64 rng(1);
  TriggerSpec spec;
  spec.size = 3;
  CHECK(resolve_location(spec, 16, 16, rng) == Location{6, 6});
  spec.placement = RandomPlacement{};
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (int i = 0; i < 500; ++i) {
    const Location at = resolve_location(spec, 16, 16, rng);
    CHECK(at.x <= 13);
    CHECK(at.y <= 13);
    seen.insert({at.x, at.y});
  }
  CHECK(seen.size() > 100);
  spec.size = 17;
  CHECK_THROWS_AS(resolve_location(spec, 16, 16, rng), Error);
}

TEST_CASE("poisoning with fraction 0 leaves the set unchanged") {
  const Dataset train = synth(50);
  PoisonPolicy policy;
  policy.poison_fraction = 0.0;
  const auto [out, manifest] = poison_training_set(train, policy);
  CHECK(out.samples == train.samples);
  CHECK(manifest.empty());
}

TEST_CASE("poisoning with fraction 1 infects everything") {
  const Dataset train = synth(10);
  PoisonPolicy policy;
  policy.poison_fraction = 1.0;
  policy.target_class = 2;
  const auto [out, manifest] = poison_training_set(train, policy);
  CHECK(out.size() == 10);
  CHECK(manifest.size() == 10);
  for (const auto& s : out.samples) {
    REQUIRE(s.is_infected());
    CHECK(s.infected_label->to_string() == "0010");
  }
}

TEST_CASE("poisoning 0.4 of 2000 samples") {
  const Dataset train = synth(2000);
  PoisonPolicy policy;
  policy.poison_fraction = 0.4;
  policy.target_class = 1;
  policy.seed = 9;
  const auto [out, manifest] = poison_training_set(train, policy);
  CHECK(out.size() == 2000);
  CHECK(out.infected_count() == 800);
  CHECK(manifest.size() == 800);
  CHECK_NOTHROW(out.validate());

  std::set<SampleId> ids;
  for (const auto& e : manifest.entries) {
    ids.insert(e.id);
    CHECK(e.location == Location{6, 6});
    CHECK(e.size == 3);
    CHECK(e.target_class == 1);
  }
  CHECK(ids.size() == 800);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& s = out.samples[i];
    CHECK(s.id == train.samples[i].id);
    CHECK(s.true_label == train.samples[i].true_label);
    CHECK(s.image.width() == 16);
    CHECK(s.is_infected() == (ids.count(s.id) > 0));
    if (s.is_infected()) {
      CHECK(s.infected_label->count() == 1);
      CHECK(s.infected_label->test(1));
    }
  }

  const auto again = poison_training_set(train, policy);
  CHECK(again.second == manifest);
  CHECK(again.first == out);
  policy.seed = 10;
  CHECK_FALSE(poison_training_set(train, policy).second == manifest);
}

TEST_CASE("infected count is the floor of fraction times N") {
  const Dataset train = synth(37);
  for (double f : {0.01, 0.05, 0.1, 0.2, 0.4, 0.5, 0.99}) {
    PoisonPolicy policy;
    policy.poison_fraction = f;
    const auto [out, manifest] = poison_training_set(train, policy);
    const auto expected = static_cast<std::size_t>(std::floor(f * 37.0));
    CHECK(out.infected_count() == expected);
    CHECK(out.size() == 37);
  }
}

TEST_CASE("keeping clean copies appends infected duplicates") {
  const Dataset train = synth(20);
  PoisonPolicy policy;
  policy.poison_fraction = 1.0;
  policy.keep_clean_copies = true;
  const auto [out, manifest] = poison_training_set(train, policy);
  CHECK(out.size() == 40);
  CHECK(out.infected_count() == 20);
  CHECK_NOTHROW(out.validate());
  for (std::size_t i = 0; i < 20; ++i) CHECK(out.samples[i] == train.samples[i]);
}

TEST_CASE("random placement is recorded per infected image") {
  const Dataset train = synth(200);
  PoisonPolicy policy;
  policy.trigger.placement = RandomPlacement{};
  const auto [out, manifest] = poison_training_set(train, policy);
  std::set<std::pair<std::size_t, std::size_t>> spots;
  for (const auto& e : manifest.entries) {
    spots.insert({e.location.x, e.location.y});
    const auto it = std::find_if(out.samples.begin(), out.samples.end(), [&](const Sample& s) { return s.id == e.id; });
    REQUIRE(it != out.samples.end());
    for (std::size_t dy = 0; dy < 3; ++dy) {
      for (std::size_t dx = 0; dx < 3; ++dx) CHECK(it->image.at(e.location.x + dx, e.location.y + dy) == 0.0);
    }
  }
  CHECK(spots.size() > 10);
}

TEST_CASE("poisoning rejects bad policies") {
  const Dataset train = synth(10);
  PoisonPolicy policy;
  policy.target_class = 4;
  CHECK_THROWS_AS(poison_training_set(train, policy), Error);
  policy = PoisonPolicy{};
  policy.poison_fraction = 1.5;
  CHECK_THROWS_AS(poison_training_set(train, policy), Error);
  policy = PoisonPolicy{};
  const auto infected = poison_training_set(train, policy).first;
  CHECK_THROWS_AS(poison_training_set(infected, policy), Error);
}

TEST_CASE("manifest round trip") {
  const Dataset train = synth(30);
  PoisonPolicy policy;
  policy.trigger.placement = RandomPlacement{};
  const auto manifest = poison_training_set(train, policy).second;
  const fs::path path = fs::temp_directory_path() / "backdoor_test_manifest.csv";
  manifest.save(path);
  CHECK(PoisonManifest::load(path) == manifest);
  fs::remove(path);
  CHECK_THROWS_AS(PoisonManifest::load(path), IoError);
}

TEST_CASE("evaluation sets pair every test image with its triggered copy") {
  SUBCASE("empty test set") {
    const Dataset empty{"t", 4, 16, 16, {}};
    const auto sets = build_eval_sets(empty, TriggerSpec{}, 0);
    CHECK(sets.clean.empty());
    CHECK(sets.infected.empty());
  }
  SUBCASE("five samples, diff mask equals trigger mask") {
    const Dataset test = synth(5, 21);
    TriggerSpec spec;
    spec.placement = RandomPlacement{};
    const auto sets = build_eval_sets(test, spec, 3, 4);
    REQUIRE(sets.infected.size() == 5);
    REQUIRE(sets.locations.size() == 5);
    CHECK(sets.clean == test);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& c = sets.clean.samples[i];
      const auto& inf = sets.infected.samples[i];
      CHECK(c.id == inf.id);
      CHECK(inf.true_label == c.true_label);
      CHECK(inf.infected_label->to_string() == "0001");
      const Location at = sets.locations[i];
      for (std::size_t y = 0; y < 16; ++y) {
        for (std::size_t x = 0; x < 16; ++x) {
          const bool inside = x >= at.x && x < at.x + 3 && y >= at.y && y < at.y + 3;
          // Background pixels are never exactly black, so the diff is the mask.
          CHECK((c.image.at(x, y) != inf.image.at(x, y)) == inside);
        }
      }
    }
    CHECK(build_eval_sets(test, spec, 3, 4).infected == sets.infected);
  }
  SUBCASE("samples that already carry the target class are kept") {
    const Dataset test = synth(40, 2);
    const auto sets = build_eval_sets(test, TriggerSpec{}, 0);
    CHECK(sets.infected.size() == test.size());
  }
}

TEST_CASE("inference mix swaps ceil(epsilon N) samples") {
  const Dataset test = synth(100, 8);
  const auto sets = build_eval_sets(test, TriggerSpec{}, 0);
  CHECK(mix_inference_set(sets.clean, sets.infected, 0.0, 1).samples == sets.clean.samples);
  CHECK(mix_inference_set(sets.clean, sets.infected, 1.0, 1).samples == sets.infected.samples);
  const Dataset half = mix_inference_set(sets.clean, sets.infected, 0.5, 1);
  CHECK(half.infected_count() == 50);
  CHECK(half.size() == 100);
  for (std::size_t i = 0; i < 100; ++i) CHECK(half.samples[i].id == test.samples[i].id);
  CHECK(mix_inference_set(sets.clean, sets.infected, 0.001, 1).infected_count() == 1);
  CHECK(mix_inference_set(sets.clean, sets.infected, 0.5, 1) == half);
  CHECK_THROWS_AS(mix_inference_set(sets.clean, sets.infected, 1.5, 1), Error);

  Dataset shorter = sets.infected;
  shorter.samples.pop_back();
  CHECK_THROWS_AS(mix_inference_set(sets.clean, shorter, 0.5, 1), Error);
}
