#include "backdoor/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "backdoor/error.hpp"

namespace backdoor {

namespace fs = std::filesystem;

PreparedData prepare_data(const ExperimentConfig& cfg) {
  cfg.validate();
  auto [train, test] = split(generate_synthetic(cfg.synth), cfg.train_fraction, cfg.synth.seed);
  return {std::move(train), std::move(test)};
}

EvalSets eval_sets_for(const ExperimentConfig& cfg, const PreparedData& data, std::uint64_t seed) {
  return build_eval_sets(data.test, cfg.policy.trigger, cfg.policy.target_class, seed);
}

SeedRun run_seed(const ExperimentConfig& cfg, const PreparedData& data, std::uint64_t seed) {
  cfg.validate();
  SeedRun run;
  run.seed = seed;

  PoisonPolicy policy = cfg.policy;
  policy.seed = seed;
  auto [train_set, manifest] = poison_training_set(data.train, policy);
  run.manifest = std::move(manifest);

  TrainConfig tc = cfg.train;
  tc.seed = seed;
  run.checkpoints = train(init_model(cfg.arch(), seed), train_set, tc);

  const EvalSets sets = eval_sets_for(cfg, data, seed);
  for (const auto& ck : run.checkpoints) {
    const auto clean = predict(ck.model, sets.clean);
    const auto infected = predict(ck.model, sets.infected);
    run.reports.push_back(evaluate_epoch(ck.epoch, clean, infected, cfg.policy.target_class, cfg.asr_thresholds));
  }
  return run;
}

namespace {

std::string seconds_since(std::chrono::steady_clock::time_point t0) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream o;
  o.precision(1);
  o << std::fixed << s << "s";
  return o.str();
}

std::string fmt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

std::string epoch_tag(std::size_t epoch) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02zu", epoch);
  return buf;
}

// First test index whose true label lacks the target class, else 0.
std::size_t probe_index(const Dataset& test, std::size_t target_class) {
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!test.samples[i].true_label.test(target_class)) return i;
  }
  return 0;
}

std::vector<fs::path> write_seed_artifacts(const ExperimentConfig& cfg, const PreparedData& data,
                                           const SeedRun& run) {
  std::vector<fs::path> out;
  const fs::path dir = cfg.output_dir / ("seed" + std::to_string(run.seed));
  fs::create_directories(dir / "checkpoints");

  const fs::path manifest = dir / "poison_manifest.csv";
  run.manifest.save(manifest);
  out.push_back(manifest);
  for (const auto& ck : run.checkpoints) {
    const fs::path p = dir / "checkpoints" / ("epoch" + epoch_tag(ck.epoch) + ".ckpt");
    save_checkpoint(ck.model, p);
    out.push_back(p);
  }

  if (!cfg.explain || data.test.empty()) return out;
  const EvalSets sets = eval_sets_for(cfg, data, run.seed);
  const std::size_t i = probe_index(sets.clean, cfg.policy.target_class);
  const std::size_t t = cfg.policy.target_class;
  for (const char* form : {"clean", "infected"}) fs::create_directories(dir / "saliency" / form);
  for (const auto& ck : run.checkpoints) {
    for (TapLayer layer : {TapLayer::Middle, TapLayer::Final}) {
      for (const Dataset* ds : {&sets.clean, &sets.infected}) {
        const Sample& s = ds->samples[i];
        const fs::path p = dir / "saliency" / (s.is_infected() ? "infected" : "clean") /
                           (std::to_string(s.id) + "_" + to_string(layer) + "_" + epoch_tag(ck.epoch) + ".png");
        write_saliency_overlay(s.image, gradcam(ck.model, s.image, t, layer), p);
        out.push_back(p);
      }
    }
  }
  return out;
}

}  // namespace

std::vector<RunResult> run_arms(const std::vector<Arm>& arms, const PreparedData& data, const HarnessOptions& opts) {
  struct Job {
    std::size_t arm, seed;
  };
  std::vector<Job> jobs;
  std::vector<RunResult> results(arms.size());
  for (std::size_t a = 0; a < arms.size(); ++a) {
    arms[a].config.validate();
    results[a].arm = arms[a].name;
    results[a].config = arms[a].config;
    results[a].fingerprint = arms[a].config.fingerprint();
    results[a].seeds.resize(arms[a].config.seeds.size());
    for (std::size_t s = 0; s < arms[a].config.seeds.size(); ++s) jobs.push_back({a, s});
  }

  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!opts.log) return;
    std::lock_guard lock(log_mutex);
    opts.log(msg);
  };

  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const Arm& arm = arms[jobs[j].arm];
      const std::uint64_t seed = arm.config.seeds[jobs[j].seed];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        SeedRun run = run_seed(arm.config, data, seed);
        results[jobs[j].arm].seeds[jobs[j].seed] = std::move(run);
        log("arm " + arm.name + " seed " + std::to_string(seed) + " done in " + seconds_since(t0));
      } catch (const std::exception& e) {
        errors[j] = std::make_exception_ptr(
            Error("arm " + arm.name + ", seed " + std::to_string(seed) + ": " + e.what()));
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(opts.jobs, 1, std::max<std::size_t>(jobs.size(), 1));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  for (std::size_t a = 0; a < arms.size(); ++a) {
    std::vector<std::vector<MetricReport>> reports;
    for (const auto& s : results[a].seeds) reports.push_back(s.reports);
    results[a].aggregate = aggregate(reports);
    if (opts.write_artifacts) {
      for (const auto& s : results[a].seeds) {
        auto paths = write_seed_artifacts(arms[a].config, data, s);
        results[a].artifacts.insert(results[a].artifacts.end(), paths.begin(), paths.end());
      }
    }
  }
  return results;
}

RunResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data, const std::string& arm,
                         const HarnessOptions& opts) {
  return std::move(run_arms({Arm{arm, cfg}}, data, opts).front());
}

RunResult run_experiment(const ExperimentConfig& cfg, const HarnessOptions& opts) {
  const PreparedData data = prepare_data(cfg);
  RunResult result = run_experiment(cfg, data, "base", opts);
  auto paths = emit_results({result}, cfg, cfg.output_dir);
  result.artifacts.insert(result.artifacts.end(), paths.begin(), paths.end());
  return result;
}

// ---------------------------------------------------------------------------
// Sweep arms

namespace {

Arm make_arm(const ExperimentConfig& base, std::string name) {
  Arm a{std::move(name), base};
  a.config.output_dir = base.output_dir / a.name;
  return a;
}

}  // namespace

std::vector<Arm> trigger_size_arms(const ExperimentConfig& base, const std::vector<std::size_t>& sizes) {
  std::vector<Arm> arms;
  Arm clean = make_arm(base, "clean");
  clean.config.policy.poison_fraction = 0.0;
  clean.config.policy.keep_clean_copies = false;
  arms.push_back(std::move(clean));
  for (std::size_t s : sizes) {
    Arm a = make_arm(base, "size" + std::to_string(s));
    a.config.policy.trigger.size = s;
    arms.push_back(std::move(a));
  }
  return arms;
}

std::vector<Arm> location_arms(const ExperimentConfig& base) {
  Arm fixed = make_arm(base, "center");
  fixed.config.policy.trigger.placement = CenterPlacement{};
  Arm random = make_arm(base, "random");
  random.config.policy.trigger.placement = RandomPlacement{};
  return {std::move(fixed), std::move(random)};
}

std::vector<Arm> target_class_arms(const ExperimentConfig& base) {
  std::vector<Arm> arms;
  for (std::size_t t = 0; t < base.synth.num_classes; ++t) {
    Arm a = make_arm(base, "class" + std::to_string(t));
    a.config.policy.target_class = t;
    arms.push_back(std::move(a));
  }
  return arms;
}

std::vector<Arm> poison_fraction_arms(const ExperimentConfig& base, const std::vector<double>& fractions) {
  std::vector<Arm> arms;
  for (double f : fractions) {
    Arm a = make_arm(base, "fraction" + format_double(f));
    a.config.policy.poison_fraction = f;
    a.config.policy.keep_clean_copies = false;
    arms.push_back(std::move(a));
  }
  Arm copies = make_arm(base, "fraction1+clean");
  copies.config.policy.poison_fraction = 1.0;
  copies.config.policy.keep_clean_copies = true;
  arms.push_back(std::move(copies));
  Arm all = make_arm(base, "trig_only");
  all.config.policy.poison_fraction = 1.0;
  all.config.policy.keep_clean_copies = false;
  arms.push_back(std::move(all));
  return arms;
}

// ---------------------------------------------------------------------------
// Inference mix and localisation

std::vector<MixRow> evaluate_inference_mix(const RunResult& run, const PreparedData& data) {
  const ExperimentConfig& cfg = run.config;
  std::vector<MixRow> rows;
  for (const auto& s : run.seeds) {
    const EvalSets sets = eval_sets_for(cfg, data, s.seed);
    std::vector<Dataset> mixes;
    for (double eps : cfg.epsilons) mixes.push_back(mix_inference_set(sets.clean, sets.infected, eps, s.seed));
    for (const auto& ck : s.checkpoints) {
      const auto clean = predict(ck.model, sets.clean);
      const auto infected = predict(ck.model, sets.infected);
      for (std::size_t e = 0; e < cfg.epsilons.size(); ++e) {
        std::vector<PredictionRecord> recs;
        recs.reserve(clean.size());
        std::size_t n_inf = 0;
        for (std::size_t i = 0; i < clean.size(); ++i) {
          const bool inf = mixes[e].samples[i].is_infected();
          n_inf += inf;
          recs.push_back(inf ? infected[i] : clean[i]);
        }
        MixRow row;
        row.epsilon = cfg.epsilons[e];
        row.effective_epsilon = clean.empty() ? 0.0 : static_cast<double>(n_inf) / static_cast<double>(clean.size());
        row.seed = s.seed;
        row.epoch = ck.epoch;
        try {
          row.auroc = auroc_true_labels(recs);
        } catch (const UndefinedMetricError&) {
        }
        rows.push_back(row);
      }
    }
  }
  return rows;
}

std::vector<LocalizationPair> localization_study(const Model& model, const ExperimentConfig& cfg,
                                                 const EvalSets& sets, TapLayer layer, std::size_t count) {
  const std::size_t t = cfg.policy.target_class;
  std::vector<LocalizationPair> out;
  for (std::size_t i = 0; i < sets.clean.size() && out.size() < count; ++i) {
    const Sample& clean = sets.clean.samples[i];
    if (clean.true_label.test(t)) continue;
    const Region region{sets.locations.at(i), cfg.policy.trigger.size};
    LocalizationPair p;
    p.id = clean.id;
    p.clean = localization_score(gradcam(model, clean.image, t, layer), region, cfg.localization_dilation);
    p.infected = localization_score(gradcam(model, sets.infected.samples[i].image, t, layer), region,
                                    cfg.localization_dilation);
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::TriggerSize: return "trigger_size";
    case SweepAxis::Location: return "location";
    case SweepAxis::TargetClass: return "target_class";
    case SweepAxis::PoisonFraction: return "poison_fraction";
    case SweepAxis::InferenceMix: return "inference_mix";
  }
  return "?";
}

SweepAxis parse_sweep_axis(const std::string& text) {
  for (SweepAxis a : {SweepAxis::TriggerSize, SweepAxis::Location, SweepAxis::TargetClass,
                      SweepAxis::PoisonFraction, SweepAxis::InferenceMix}) {
    if (to_string(a) == text) return a;
  }
  throw Error("unknown sweep axis '" + text +
              "' (expected trigger_size, location, target_class, poison_fraction or inference_mix)");
}

SweepResult run_sweep(SweepAxis axis, const ExperimentConfig& base_in, const HarnessOptions& opts) {
  ExperimentConfig base = base_in;
  base.output_dir = base_in.output_dir / to_string(axis);
  base.validate();

  std::vector<Arm> arms;
  switch (axis) {
    case SweepAxis::TriggerSize: arms = trigger_size_arms(base); break;
    case SweepAxis::Location: arms = location_arms(base); break;
    case SweepAxis::TargetClass: arms = target_class_arms(base); break;
    case SweepAxis::PoisonFraction: arms = poison_fraction_arms(base); break;
    case SweepAxis::InferenceMix: arms = {make_arm(base, "base")}; break;
  }

  const PreparedData data = prepare_data(base);
  SweepResult out;
  out.axis = axis;
  out.arms = run_arms(arms, data, opts);
  if (axis == SweepAxis::InferenceMix) out.mix = evaluate_inference_mix(out.arms.front(), data);
  for (const auto& r : out.arms) out.artifacts.insert(out.artifacts.end(), r.artifacts.begin(), r.artifacts.end());
  auto paths = emit_results(out.arms, base, base.output_dir, out.mix);
  out.artifacts.insert(out.artifacts.end(), paths.begin(), paths.end());
  return out;
}

// ---------------------------------------------------------------------------
// Emission

std::string results_csv(const std::vector<RunResult>& runs) {
  std::ostringstream o;
  bool header = false;
  for (const auto& run : runs) {
    for (const auto& s : run.seeds) {
      for (const auto& rep : s.reports) {
        const auto cols = rep.columns();
        if (!header) {
          o << "sweep_arm,seed,epoch";
          for (const auto& [name, _] : cols) o << ',' << name;
          o << '\n';
          header = true;
        }
        o << run.arm << ',' << s.seed << ',' << rep.epoch;
        for (const auto& [_, v] : cols) o << ',' << fmt(v);
        o << '\n';
      }
    }
  }
  if (!header) o << "sweep_arm,seed,epoch\n";
  return o.str();
}

std::string summary_csv(const std::vector<RunResult>& runs) {
  std::ostringstream o;
  o << "metric,arm,min_mean,min_std,max_mean,max_std\n";
  if (runs.empty()) return o.str();
  for (const auto& metric : runs.front().aggregate.metric_order) {
    for (const auto& run : runs) {
      const auto& a = run.aggregate.at(metric);
      o << metric << ',' << run.arm << ',' << fmt(a.min_mean) << ',' << fmt(a.min_std) << ','
        << fmt(a.max_mean) << ',' << fmt(a.max_std) << '\n';
    }
  }
  return o.str();
}

namespace {

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json opt_list(const std::vector<std::optional<double>>& xs) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& x : xs) arr.push_back(opt_json(x));
  return arr;
}

}  // namespace

std::string summary_json(const std::vector<RunResult>& runs, const std::string& fingerprint) {
  nlohmann::ordered_json root;
  root["fingerprint"] = fingerprint;
  auto arms = nlohmann::ordered_json::array();
  for (const auto& run : runs) {
    nlohmann::ordered_json arm;
    arm["arm"] = run.arm;
    arm["fingerprint"] = run.fingerprint;
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& s : run.seeds) seeds.push_back(s.seed);
    arm["seeds"] = seeds;
    const auto nn = run.aggregate.metrics.find("auroc_nn");
    if (nn != run.aggregate.metrics.end() && nn->second.max_mean) {
      arm["meets_min_clean_auroc"] = *nn->second.max_mean >= run.config.min_clean_auroc;
    } else {
      arm["meets_min_clean_auroc"] = nullptr;
    }
    nlohmann::ordered_json metrics;
    for (const auto& name : run.aggregate.metric_order) {
      const auto& a = run.aggregate.at(name);
      metrics[name] = {{"seed_min", opt_list(a.seed_min)}, {"seed_max", opt_list(a.seed_max)},
                       {"min_mean", opt_json(a.min_mean)}, {"min_std", opt_json(a.min_std)},
                       {"max_mean", opt_json(a.max_mean)}, {"max_std", opt_json(a.max_std)}};
    }
    arm["metrics"] = metrics;
    arms.push_back(arm);
  }
  root["arms"] = arms;
  return root.dump(2) + "\n";
}

std::string mix_csv(const std::vector<MixRow>& rows) {
  std::ostringstream o;
  o << "epsilon,effective_epsilon,seed,epoch,auroc\n";
  for (const auto& r : rows) {
    o << format_double(r.epsilon) << ',' << format_double(r.effective_epsilon) << ',' << r.seed << ','
      << r.epoch << ',' << fmt(r.auroc) << '\n';
  }
  return o.str();
}

namespace {

// Per-epsilon min/max over epochs, mean and std over seeds.
std::string mix_summary_csv(const std::vector<MixRow>& rows) {
  std::vector<double> eps;
  for (const auto& r : rows) {
    if (std::find(eps.begin(), eps.end(), r.epsilon) == eps.end()) eps.push_back(r.epsilon);
  }
  std::ostringstream o;
  o << "epsilon,effective_epsilon,min_mean,min_std,max_mean,max_std\n";
  for (double e : eps) {
    std::vector<std::uint64_t> seeds;
    std::vector<std::vector<std::optional<double>>> series;
    double eff = 0.0;
    for (const auto& r : rows) {
      if (r.epsilon != e) continue;
      eff = r.effective_epsilon;
      auto it = std::find(seeds.begin(), seeds.end(), r.seed);
      if (it == seeds.end()) {
        seeds.push_back(r.seed);
        series.emplace_back();
        it = seeds.end() - 1;
      }
      series[static_cast<std::size_t>(it - seeds.begin())].push_back(r.auroc);
    }
    const MetricAggregate a = aggregate_series(series);
    o << format_double(e) << ',' << format_double(eff) << ',' << fmt(a.min_mean) << ',' << fmt(a.min_std) << ','
      << fmt(a.max_mean) << ',' << fmt(a.max_std) << '\n';
  }
  return o.str();
}

}  // namespace

std::vector<fs::path> emit_results(const std::vector<RunResult>& runs, const ExperimentConfig& cfg,
                                   const fs::path& dir, const std::vector<MixRow>& mix) {
  std::vector<fs::path> out;
  auto put = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    out.push_back(dir / name);
  };
  put("config.txt", cfg.serialize());
  put("results.csv", results_csv(runs));
  put("summary.csv", summary_csv(runs));
  put("summary.json", summary_json(runs, cfg.fingerprint()));
  if (!mix.empty()) {
    put("mix.csv", mix_csv(mix));
    put("mix_summary.csv", mix_summary_csv(mix));
  }
  return out;
}

}  // namespace backdoor
