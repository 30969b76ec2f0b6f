#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "backdoor/config.hpp"
#include "backdoor/error.hpp"
#include "backdoor/harness.hpp"

using namespace backdoor;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(const std::string& out) {
  ExperimentConfig c;
  c.synth.num_samples = 120;
  c.train.epochs = 2;
  c.seeds = {1, 2};
  c.channels = {4, 4};
  c.explain = false;
  c.output_dir = fs::temp_directory_path() / ("backdoor_test_" + out);
  fs::remove_all(c.output_dir);
  return c;
}

HarnessOptions quiet() {
  HarnessOptions o;
  o.write_artifacts = false;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> cells(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("config text round trip") {
  ExperimentConfig c;
  c.synth.class_prevalence = {0.1, 0.2, 0.3, 0.4};
  c.policy.trigger.placement = FixedPlacement{{2, 5}};
  c.policy.poison_fraction = 0.05;
  c.train.learning_rate = 0.1 + 0.2;  // not exactly representable in short form
  c.seeds = {3, 9};
  c.epsilons = {0.0025, 0.5};
  c.output_dir = "some/where";
  const auto back = ExperimentConfig::parse(c.serialize());
  CHECK(back.serialize() == c.serialize());
  CHECK(back.train.learning_rate == c.train.learning_rate);
  CHECK(back.fingerprint() == c.fingerprint());
  CHECK(ExperimentConfig::parse(back.serialize()).fingerprint() == c.fingerprint());

  ExperimentConfig moved = c;
  moved.output_dir = "elsewhere";
  CHECK(moved.fingerprint() == c.fingerprint());
  ExperimentConfig changed = c;
  changed.policy.target_class = 1;
  CHECK(changed.fingerprint() != c.fingerprint());
  CHECK(c.fingerprint().size() == 16);
}

TEST_CASE("config parsing") {
  const auto c = ExperimentConfig::parse(
      "# desk run\n"
      "synth.num_samples = 500   # fewer\n"
      "\n"
      "policy.trigger_size=2\n"
      "policy.placement = random\n"
      "train.seeds = 1, 2 ,3\n"
      "eval.explain = false\n");
  CHECK(c.synth.num_samples == 500);
  CHECK(c.policy.trigger.size == 2);
  CHECK(std::holds_alternative<RandomPlacement>(c.policy.trigger.placement));
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK_FALSE(c.explain);
  CHECK(c.train.epochs == 15);

  CHECK_THROWS_WITH_AS(ExperimentConfig::parse("a = 1\nsynth.bogus = 3\n"), doctest::Contains("line 1"), Error);
  CHECK_THROWS_WITH_AS(ExperimentConfig::parse("synth.bogus = 3\n"), doctest::Contains("unknown"), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse("synth.num_samples\n"), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse("synth.num_samples = ten\n"), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse("train.seeds = 1,,2\n"), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse("eval.asr_thresholds = 1.0\n"), Error);
  CHECK_THROWS_AS(ExperimentConfig::parse("policy.target_class = 4\n"), Error);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.txt"), IoError);

  ExperimentConfig d;
  set_config_key(d, "policy.poison_fraction", "0.2");
  CHECK(d.policy.poison_fraction == 0.2);
  CHECK_THROWS_AS(set_config_key(d, "policy.nope", "1"), Error);
}

TEST_CASE("one seed, one epoch gives exactly one report") {
  auto cfg = tiny("single");
  cfg.seeds = {1};
  cfg.train.epochs = 1;
  const auto r = run_experiment(cfg, quiet());
  REQUIRE(r.seeds.size() == 1);
  CHECK(r.seeds[0].reports.size() == 1);
  CHECK(r.seeds[0].checkpoints.size() == 1);
  CHECK(r.fingerprint == cfg.fingerprint());
  fs::remove_all(cfg.output_dir);
}

TEST_CASE("emitted files: header, row count, determinism") {
  auto cfg = tiny("emit");
  const auto a = run_experiment(cfg, quiet());
  const std::string csv = slurp(cfg.output_dir / "results.csv");
  const auto rows = lines(csv);
  REQUIRE_FALSE(rows.empty());
  CHECK(rows[0] == "sweep_arm,seed,epoch,asr_p60,asr_p90,auroc_nn,auroc_tt,auroc_tn");
  CHECK(rows.size() == 1 + cfg.seeds.size() * cfg.train.epochs);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(cells(rows[i]).size() == 8);

  const auto summary = lines(slurp(cfg.output_dir / "summary.csv"));
  CHECK(summary[0] == "metric,arm,min_mean,min_std,max_mean,max_std");
  CHECK(summary.size() == 1 + 5);
  for (std::size_t i = 1; i < summary.size(); ++i) {
    const auto c = cells(summary[i]);
    REQUIRE(c.size() == 6);
    CHECK(c[1] == "base");
    if (!c[2].empty() && !c[4].empty()) CHECK(std::stod(c[2]) <= std::stod(c[4]));
  }

  const auto json = nlohmann::json::parse(slurp(cfg.output_dir / "summary.json"));
  CHECK(json["fingerprint"] == cfg.fingerprint());
  CHECK(fs::exists(cfg.output_dir / "config.txt"));
  CHECK(ExperimentConfig::load(cfg.output_dir / "config.txt").fingerprint() == cfg.fingerprint());

  const std::string before_summary = slurp(cfg.output_dir / "summary.csv");
  const std::string before_json = slurp(cfg.output_dir / "summary.json");
  HarnessOptions parallel = quiet();
  parallel.jobs = 2;
  run_experiment(cfg, parallel);
  CHECK(slurp(cfg.output_dir / "results.csv") == csv);
  CHECK(slurp(cfg.output_dir / "summary.csv") == before_summary);
  CHECK(slurp(cfg.output_dir / "summary.json") == before_json);
  CHECK(results_csv({a}) == csv);
  fs::remove_all(cfg.output_dir);
}

TEST_CASE("undefined metrics are empty cells") {
  auto cfg = tiny("undefined");
  cfg.seeds = {1};
  cfg.train.epochs = 1;
  // Every image carries every class: ASR has no denominator, NN and TN are single-class.
  cfg.synth.class_prevalence = {1.0};
  const auto r = run_experiment(cfg, quiet());
  const auto rows = lines(results_csv({r}));
  REQUIRE(rows.size() == 2);
  const auto c = cells(rows[1]);
  REQUIRE(c.size() == 8);
  CHECK(c[3].empty());
  CHECK(c[4].empty());
  CHECK(c[5].empty());
  CHECK_FALSE(c[6].empty());
  CHECK(c[7].empty());
  for (const auto& line : lines(summary_csv({r}))) {
    if (line.rfind("asr_p60,", 0) == 0) CHECK(line == "asr_p60,base,,,,");
  }
  fs::remove_all(cfg.output_dir);
}

TEST_CASE("sweep arms") {
  const ExperimentConfig base = tiny("arms");
  const auto sizes = trigger_size_arms(base);
  REQUIRE(sizes.size() == 5);
  CHECK(sizes[0].name == "clean");
  CHECK(sizes[0].config.policy.poison_fraction == 0.0);
  for (std::size_t i = 1; i < 5; ++i) {
    CHECK(sizes[i].name == "size" + std::to_string(i));
    CHECK(sizes[i].config.policy.trigger.size == i);
    CHECK(sizes[i].config.output_dir == base.output_dir / sizes[i].name);
  }
  CHECK(trigger_size_arms(base, {3}).size() == 2);

  const auto locs = location_arms(base);
  REQUIRE(locs.size() == 2);
  CHECK(std::holds_alternative<CenterPlacement>(locs[0].config.policy.trigger.placement));
  CHECK(std::holds_alternative<RandomPlacement>(locs[1].config.policy.trigger.placement));

  const auto classes = target_class_arms(base);
  REQUIRE(classes.size() == base.synth.num_classes);
  for (std::size_t t = 0; t < classes.size(); ++t) CHECK(classes[t].config.policy.target_class == t);

  const auto fracs = poison_fraction_arms(base);
  REQUIRE(fracs.size() == 7);
  CHECK(fracs[0].name == "fraction0.01");
  CHECK(fracs[4].config.policy.poison_fraction == 0.4);
  CHECK(fracs[5].config.policy.keep_clean_copies);
  CHECK(fracs[5].config.policy.poison_fraction == 1.0);
  CHECK(fracs[6].name == "trig_only");
  CHECK_FALSE(fracs[6].config.policy.keep_clean_copies);

  std::set<std::string> names;
  for (const auto& a : fracs) CHECK(names.insert(a.name).second);

  CHECK(parse_sweep_axis("trigger_size") == SweepAxis::TriggerSize);
  CHECK(to_string(SweepAxis::InferenceMix) == "inference_mix");
  CHECK_THROWS_AS(parse_sweep_axis("size"), Error);
}

TEST_CASE("location sweep records centre coordinates for the fixed arm") {
  auto cfg = tiny("location");
  cfg.seeds = {1};
  cfg.train.epochs = 1;
  const auto sweep = run_sweep(SweepAxis::Location, cfg, quiet());
  REQUIRE(sweep.arms.size() == 2);
  const auto& manifest = sweep.arms[0].seeds[0].manifest;
  CHECK(manifest.size() == 38);  // floor(0.4 * 96)
  for (const auto& e : manifest.entries) CHECK(e.location == center_location(3, 16, 16));
  const auto rows = lines(slurp(cfg.output_dir / "location" / "results.csv"));
  CHECK(rows.size() == 3);
  CHECK(rows[1].rfind("center,", 0) == 0);
  CHECK(rows[2].rfind("random,", 0) == 0);
  fs::remove_all(cfg.output_dir);
}

TEST_CASE("inference mix at epsilon 0 equals AUROC-NN") {
  auto cfg = tiny("mix");
  cfg.epsilons = {0.0, 0.5, 1.0};
  const PreparedData data = prepare_data(cfg);
  const auto run = run_experiment(cfg, data, "base", quiet());
  const auto rows = evaluate_inference_mix(run, data);
  REQUIRE(rows.size() == cfg.seeds.size() * cfg.train.epochs * 3);
  for (const auto& row : rows) {
    const auto& seed = *std::find_if(run.seeds.begin(), run.seeds.end(), [&](const SeedRun& s) { return s.seed == row.seed; });
    const auto& rep = seed.reports.at(row.epoch - 1);
    if (row.epsilon == 0.0) {
      CHECK(row.effective_epsilon == 0.0);
      CHECK(row.auroc == rep.auroc_nn);
    }
    if (row.epsilon == 0.5) CHECK(row.effective_epsilon == 0.5);
    if (row.epsilon == 1.0) CHECK(row.auroc == rep.auroc_tn);
  }
  const auto csv = lines(mix_csv(rows));
  CHECK(csv[0] == "epsilon,effective_epsilon,seed,epoch,auroc");
  CHECK(csv.size() == rows.size() + 1);
}

TEST_CASE("artifacts and localisation") {
  auto cfg = tiny("artifacts");
  cfg.seeds = {1};
  cfg.explain = true;
  const auto r = run_experiment(cfg);
  const fs::path seed_dir = cfg.output_dir / "seed1";
  CHECK(fs::exists(seed_dir / "poison_manifest.csv"));
  CHECK(PoisonManifest::load(seed_dir / "poison_manifest.csv") == r.seeds[0].manifest);
  CHECK(fs::exists(seed_dir / "checkpoints" / "epoch01.ckpt"));
  CHECK(load_checkpoint(seed_dir / "checkpoints" / "epoch02.ckpt") == r.seeds[0].checkpoints[1].model);
  std::size_t pngs = 0;
  for (const auto& e : fs::recursive_directory_iterator(seed_dir / "saliency")) pngs += e.path().extension() == ".png";
  CHECK(pngs > 0);

  const PreparedData data = prepare_data(cfg);
  const auto sets = eval_sets_for(cfg, data, 1);
  const auto pairs = localization_study(r.seeds[0].checkpoints.back().model, cfg, sets, TapLayer::Middle, 5);
  CHECK(pairs.size() == 5);
  for (const auto& p : pairs) {
    CHECK(p.clean >= 0.0);
    CHECK(p.clean <= 1.0);
    CHECK(p.infected >= 0.0);
    CHECK(p.infected <= 1.0);
  }
  fs::remove_all(cfg.output_dir);
}
