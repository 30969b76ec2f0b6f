#include "backdoor/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "backdoor/error.hpp"

namespace backdoor {

std::string to_string(const Placement& p) {
  if (std::holds_alternative<CenterPlacement>(p)) return "center";
  if (std::holds_alternative<RandomPlacement>(p)) return "random";
  const auto& f = std::get<FixedPlacement>(p);
  return std::to_string(f.at.x) + "," + std::to_string(f.at.y);
}

Placement parse_placement(const std::string& text) {
  if (text == "center") return CenterPlacement{};
  if (text == "random") return RandomPlacement{};
  const auto comma = text.find(',');
  if (comma != std::string::npos) {
    try {
      std::size_t used = 0;
      const auto x = std::stoul(text.substr(0, comma), &used);
      if (used != comma) throw Error("");
      const auto rest = text.substr(comma + 1);
      const auto y = std::stoul(rest, &used);
      if (used != rest.size()) throw Error("");
      return FixedPlacement{{x, y}};
    } catch (const std::exception&) {
    }
  }
  throw Error("unknown trigger placement '" + text + "'");
}

void TriggerSpec::validate() const {
  if (size < 1) throw Error("trigger size must be >= 1");
  if (!(intensity >= 0.0 && intensity <= 1.0)) throw Error("trigger intensity outside [0,1]");
}

void PoisonPolicy::validate(std::size_t num_classes) const {
  trigger.validate();
  if (target_class >= num_classes) {
    throw Error("target class " + std::to_string(target_class) + " out of range for " +
                std::to_string(num_classes) + " classes");
  }
  if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) {
    throw Error("poison fraction outside [0,1]");
  }
}

Location center_location(std::size_t size, std::size_t width, std::size_t height) {
  if (size > width || size > height) throw Error("trigger larger than image");
  return {(width - size) / 2, (height - size) / 2};
}

Location resolve_location(const TriggerSpec& spec, std::size_t width, std::size_t height,
                          std::mt19937_64& rng) {
  if (spec.size > width || spec.size > height) throw Error("trigger larger than image");
  return std::visit(
      [&](const auto& p) -> Location {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, CenterPlacement>) {
          return center_location(spec.size, width, height);
        } else if constexpr (std::is_same_v<P, FixedPlacement>) {
          return p.at;
        } else {
          std::uniform_int_distribution<std::size_t> xs(0, width - spec.size);
          std::uniform_int_distribution<std::size_t> ys(0, height - spec.size);
          const auto x = xs(rng);
          return {x, ys(rng)};
        }
      },
      spec.placement);
}

Image apply_trigger(const Image& x, const TriggerSpec& spec, Location at) {
  if (at.x + spec.size > x.width() || at.y + spec.size > x.height()) {
    std::ostringstream msg;
    msg << spec.size << "x" << spec.size << " trigger at (" << at.x << "," << at.y
        << ") does not fit a " << x.width() << "x" << x.height() << " image";
    throw Error(msg.str());
  }
  if (!(spec.intensity >= 0.0 && spec.intensity <= 1.0)) throw Error("trigger intensity outside [0,1]");
  Image out = x;
  for (std::size_t dy = 0; dy < spec.size; ++dy) {
    for (std::size_t dx = 0; dx < spec.size; ++dx) out.at(at.x + dx, at.y + dy) = spec.intensity;
  }
  return out;
}

std::pair<Dataset, PoisonManifest> poison_training_set(const Dataset& train, const PoisonPolicy& policy) {
  policy.validate(train.num_classes);
  if (train.empty()) throw Error("cannot poison an empty training set");
  if (train.infected_count() != 0) throw Error("training set already contains infected samples");

  const std::size_t n = train.size();
  const auto k = static_cast<std::size_t>(std::floor(policy.poison_fraction * static_cast<double>(n) + 1e-9));

  std::mt19937_64 rng(policy.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(chosen.begin(), chosen.end());

  Dataset out = train;
  out.name = train.name + "-poisoned";
  PoisonManifest manifest;
  const auto infected_label = LabelVector::one_hot(train.num_classes, policy.target_class);

  SampleId next_id = 0;
  for (const auto& s : train.samples) next_id = std::max(next_id, s.id + 1);

  for (std::size_t idx : chosen) {
    const Sample& src = train.samples[idx];
    const Location at = resolve_location(policy.trigger, train.width, train.height, rng);
    Sample infected{src.id, apply_trigger(src.image, policy.trigger, at), src.true_label, infected_label};
    if (policy.keep_clean_copies) {
      infected.id = next_id++;
      out.samples.push_back(std::move(infected));
    } else {
      out.samples[idx] = std::move(infected);
    }
    manifest.entries.push_back({out.samples[policy.keep_clean_copies ? out.size() - 1 : idx].id, at,
                                policy.trigger.size, policy.target_class});
  }
  return {std::move(out), std::move(manifest)};
}

EvalSets build_eval_sets(const Dataset& test, const TriggerSpec& spec, std::size_t target_class,
                         std::uint64_t seed) {
  spec.validate();
  if (test.infected_count() != 0) throw Error("test set already contains infected samples");
  const auto infected_label = LabelVector::one_hot(test.num_classes, target_class);

  EvalSets sets{test, Dataset{test.name + "-infected", test.num_classes, test.width, test.height, {}}, {}};
  sets.infected.samples.reserve(test.size());
  sets.locations.reserve(test.size());
  std::mt19937_64 rng(seed);
  for (const auto& s : test.samples) {
    const Location at = resolve_location(spec, test.width, test.height, rng);
    sets.locations.push_back(at);
    sets.infected.samples.push_back(Sample{s.id, apply_trigger(s.image, spec, at), s.true_label, infected_label});
  }
  return sets;
}

Dataset mix_inference_set(const Dataset& clean, const Dataset& infected, double epsilon,
                          std::uint64_t seed) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw Error("epsilon outside [0,1]");
  if (clean.size() != infected.size()) throw Error("clean/infected sets differ in size");
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean.samples[i].id != infected.samples[i].id) {
      throw Error("clean/infected pairing mismatch at position " + std::to_string(i));
    }
  }
  const std::size_t n = clean.size();
  const auto k = static_cast<std::size_t>(std::ceil(epsilon * static_cast<double>(n) - 1e-9));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset out = clean;
  out.name = clean.name + "-mixed";
  for (std::size_t j = 0; j < k; ++j) out.samples[order[j]] = infected.samples[order[j]];
  return out;
}

void PoisonManifest::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,x,y,size,target_class\n";
  for (const auto& e : entries) {
    out << e.id << ',' << e.location.x << ',' << e.location.y << ',' << e.size << ',' << e.target_class
        << "\n";
  }
  if (!out) throw IoError("write failed: " + path.string());
}

PoisonManifest PoisonManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "id,x,y,size,target_class") {
    throw IoError("malformed poison manifest header in " + path.string());
  }
  PoisonManifest m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    Entry e;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(ss >> e.id >> c1 >> e.location.x >> c2 >> e.location.y >> c3 >> e.size >> c4 >> e.target_class) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw IoError("malformed poison manifest row '" + line + "'");
    }
    m.entries.push_back(e);
  }
  return m;
}

}  // namespace backdoor
