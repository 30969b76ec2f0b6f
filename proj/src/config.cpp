#include "backdoor/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <system_error>

#include "backdoor/error.hpp"

namespace backdoor {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw Error("empty item in list '" + s + "'");
    out.push_back(item);
  }
  if (out.empty()) throw Error("empty list");
  return out;
}

double to_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error("config key '" + key + "': not a number: '" + s + "'");
  }
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error("config key '" + key + "': not a non-negative integer: '" + s + "'");
  }
  return v;
}

bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error("config key '" + key + "': expected true or false, got '" + s + "'");
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += fmt(xs[i]);
  }
  return out;
}

}  // namespace

void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto z = [&] { return static_cast<std::size_t>(to_u64(key, v)); };
  auto d = [&] { return to_double(key, v); };

  if (key == "synth.num_samples") cfg.synth.num_samples = z();
  else if (key == "synth.num_classes") cfg.synth.num_classes = z();
  else if (key == "synth.width") cfg.synth.width = z();
  else if (key == "synth.height") cfg.synth.height = z();
  else if (key == "synth.noise_std") cfg.synth.noise_std = d();
  else if (key == "synth.seed") cfg.synth.seed = to_u64(key, v);
  else if (key == "synth.train_fraction") cfg.train_fraction = d();
  else if (key == "synth.prevalence") {
    cfg.synth.class_prevalence.clear();
    for (const auto& s : split_list(v)) cfg.synth.class_prevalence.push_back(to_double(key, s));
  }
  else if (key == "policy.trigger_size") cfg.policy.trigger.size = z();
  else if (key == "policy.trigger_intensity") cfg.policy.trigger.intensity = d();
  else if (key == "policy.placement") cfg.policy.trigger.placement = parse_placement(v);
  else if (key == "policy.target_class") cfg.policy.target_class = z();
  else if (key == "policy.poison_fraction") cfg.policy.poison_fraction = d();
  else if (key == "policy.keep_clean_copies") cfg.policy.keep_clean_copies = to_bool(key, v);
  else if (key == "train.epochs") cfg.train.epochs = z();
  else if (key == "train.batch_size") cfg.train.batch_size = z();
  else if (key == "train.learning_rate") cfg.train.learning_rate = d();
  else if (key == "train.momentum") cfg.train.momentum = d();
  else if (key == "train.checkpoint_every_epoch") cfg.train.checkpoint_every_epoch = to_bool(key, v);
  else if (key == "train.channels") {
    cfg.channels.clear();
    for (const auto& s : split_list(v)) cfg.channels.push_back(static_cast<std::size_t>(to_u64(key, s)));
  }
  else if (key == "train.seeds") {
    cfg.seeds.clear();
    for (const auto& s : split_list(v)) cfg.seeds.push_back(to_u64(key, s));
  }
  else if (key == "eval.asr_thresholds") {
    cfg.asr_thresholds.clear();
    for (const auto& s : split_list(v)) cfg.asr_thresholds.push_back(to_double(key, s));
  }
  else if (key == "eval.epsilons") {
    cfg.epsilons.clear();
    for (const auto& s : split_list(v)) cfg.epsilons.push_back(to_double(key, s));
  }
  else if (key == "eval.min_clean_auroc") cfg.min_clean_auroc = d();
  else if (key == "eval.explain") cfg.explain = to_bool(key, v);
  else if (key == "eval.localization_dilation") cfg.localization_dilation = z();
  else if (key == "eval.output_dir") cfg.output_dir = v;
  else throw Error("unknown config key '" + key + "'");
}

void ExperimentConfig::validate() const {
  synth.validate();
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw Error("synth.train_fraction must be in (0,1)");
  policy.validate(synth.num_classes);
  train.validate();
  arch().validate();
  if (seeds.empty()) throw Error("train.seeds must not be empty");
  if (asr_thresholds.empty()) throw Error("eval.asr_thresholds must not be empty");
  for (double p : asr_thresholds) {
    if (!(p > 0.0 && p < 1.0)) throw Error("ASR thresholds must lie in (0,1)");
  }
  for (double e : epsilons) {
    if (!(e >= 0.0 && e <= 1.0)) throw Error("inference-mix epsilons must lie in [0,1]");
  }
  if (!(min_clean_auroc >= 0.0 && min_clean_auroc <= 1.0)) throw Error("eval.min_clean_auroc must be in [0,1]");
}

ArchConfig ExperimentConfig::arch() const {
  return ArchConfig::with_channels(synth.width, synth.height, synth.num_classes, channels);
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream o;
  auto num = [](double v) { return format_double(v); };
  auto u = [](auto v) { return std::to_string(v); };
  o << "synth.num_samples = " << synth.num_samples << '\n'
    << "synth.num_classes = " << synth.num_classes << '\n'
    << "synth.width = " << synth.width << '\n'
    << "synth.height = " << synth.height << '\n'
    << "synth.prevalence = " << join(synth.class_prevalence, num) << '\n'
    << "synth.noise_std = " << num(synth.noise_std) << '\n'
    << "synth.seed = " << synth.seed << '\n'
    << "synth.train_fraction = " << num(train_fraction) << '\n'
    << "policy.trigger_size = " << policy.trigger.size << '\n'
    << "policy.trigger_intensity = " << num(policy.trigger.intensity) << '\n'
    << "policy.placement = " << to_string(policy.trigger.placement) << '\n'
    << "policy.target_class = " << policy.target_class << '\n'
    << "policy.poison_fraction = " << num(policy.poison_fraction) << '\n'
    << "policy.keep_clean_copies = " << (policy.keep_clean_copies ? "true" : "false") << '\n'
    << "train.epochs = " << train.epochs << '\n'
    << "train.batch_size = " << train.batch_size << '\n'
    << "train.learning_rate = " << num(train.learning_rate) << '\n'
    << "train.momentum = " << num(train.momentum) << '\n'
    << "train.checkpoint_every_epoch = " << (train.checkpoint_every_epoch ? "true" : "false") << '\n'
    << "train.channels = " << join(channels, u) << '\n'
    << "train.seeds = " << join(seeds, u) << '\n'
    << "eval.asr_thresholds = " << join(asr_thresholds, num) << '\n'
    << "eval.epsilons = " << join(epsilons, num) << '\n'
    << "eval.min_clean_auroc = " << num(min_clean_auroc) << '\n'
    << "eval.explain = " << (explain ? "true" : "false") << '\n'
    << "eval.localization_dilation = " << localization_dilation << '\n'
    << "eval.output_dir = " << output_dir.generic_string() << '\n';
  return o.str();
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_key(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write config " + path.string());
  f << serialize();
  if (!f) throw IoError("write failed: " + path.string());
}

std::string ExperimentConfig::fingerprint() const {
  ExperimentConfig content = *this;
  content.output_dir.clear();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : content.serialize()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace backdoor
