#include "backdoor/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "backdoor/error.hpp"
#include "backdoor/image_io.hpp"

namespace backdoor {

Image::Image(std::size_t width, std::size_t height, double fill)
    : width_(width), height_(height), data_(width * height, fill) {
  if (!(fill >= 0.0 && fill <= 1.0)) throw Error("image intensity outside [0,1]");
}

Image::Image(std::size_t width, std::size_t height, std::vector<double> data)
    : width_(width), height_(height), data_(std::move(data)) {
  if (data_.size() != width_ * height_) {
    throw Error("image data length " + std::to_string(data_.size()) + " != " +
                std::to_string(width_) + "x" + std::to_string(height_));
  }
  for (double v : data_) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("image intensity outside [0,1]");
  }
}

LabelVector::LabelVector(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (auto b : bits_) {
    if (b > 1) throw Error("label entries must be 0 or 1");
  }
}

LabelVector LabelVector::one_hot(std::size_t num_classes, std::size_t cls) {
  if (cls >= num_classes) throw Error("class index out of range");
  LabelVector v(num_classes);
  v.set(cls);
  return v;
}

LabelVector LabelVector::from_string(const std::string& bits) {
  std::vector<std::uint8_t> out;
  out.reserve(bits.size());
  for (char c : bits) {
    if (c != '0' && c != '1') throw Error("malformed label bits '" + bits + "'");
    out.push_back(c == '1' ? 1 : 0);
  }
  return LabelVector(std::move(out));
}

std::size_t LabelVector::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::string LabelVector::to_string() const {
  std::string s;
  s.reserve(bits_.size());
  for (auto b : bits_) s.push_back(b ? '1' : '0');
  return s;
}

std::size_t Dataset::infected_count() const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.is_infected(); }));
}

void Dataset::validate() const {
  std::set<SampleId> ids;
  for (const auto& s : samples) {
    if (s.image.width() != width || s.image.height() != height) {
      throw Error("sample " + std::to_string(s.id) + " has mismatched image dims");
    }
    if (s.true_label.size() != num_classes) {
      throw Error("sample " + std::to_string(s.id) + " has label length " +
                  std::to_string(s.true_label.size()) + ", expected " + std::to_string(num_classes));
    }
    if (s.infected_label) {
      if (s.infected_label->size() != num_classes || s.infected_label->count() != 1) {
        throw Error("sample " + std::to_string(s.id) + " has a malformed infected label");
      }
    }
    if (!ids.insert(s.id).second) throw Error("duplicate sample id " + std::to_string(s.id));
  }
}

double SynthConfig::prevalence(std::size_t cls) const {
  return class_prevalence.size() == 1 ? class_prevalence.front() : class_prevalence.at(cls);
}

void SynthConfig::validate() const {
  if (width == 0 || height == 0) throw Error("image dims must be positive");
  if (num_samples == 0) throw Error("num_samples must be positive");
  if (num_classes == 0) throw Error("num_classes must be positive");
  if (class_prevalence.size() != 1 && class_prevalence.size() != num_classes) {
    throw Error("class_prevalence needs 1 or num_classes entries");
  }
  for (double p : class_prevalence) {
    // Closed interval: the degenerate 0/1 cases are useful controls.
    if (!(p >= 0.0 && p <= 1.0)) throw Error("class prevalence outside [0,1]");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw Error("noise_std must be >= 0");
}

double quantize_8bit(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

namespace {

constexpr double kBackground = 0.5;
constexpr double kPatternContrast = 0.4;
constexpr double kRingRadius = 0.36;
constexpr double kPatternBox = 0.3;

double pattern_intensity(std::size_t cls) {
  return kBackground + kPatternContrast + 0.05 * static_cast<double>(cls % 3);
}

// Orientation-coded strokes so that classes stay distinguishable after global
// pooling: horizontal bar, vertical bar, diagonal, anti-diagonal.
bool in_stroke(std::size_t cls, long dx, long dy, long r) {
  const long half = std::max(1L, r / 2);
  switch (cls % 4) {
    case 0: return std::labs(dy) <= half - (r > 1 ? 0 : 1);
    case 1: return std::labs(dx) <= half - (r > 1 ? 0 : 1);
    case 2: return std::labs(dx - dy) <= 1;
    default: return std::labs(dx + dy) <= 1;
  }
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> class_pattern_pixels(std::size_t cls,
                                                                      std::size_t num_classes,
                                                                      std::size_t width,
                                                                      std::size_t height) {
  const double w = static_cast<double>(width);
  const double h = static_cast<double>(height);
  const double angle = std::numbers::pi / 4.0 +
                       2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(num_classes);
  const long cx = std::lround((w - 1.0) / 2.0 + kRingRadius * w * std::cos(angle));
  const long cy = std::lround((h - 1.0) / 2.0 + kRingRadius * h * std::sin(angle));
  // Half-width of the pattern's bounding box; shrinks when many classes share the ring.
  const double crowd = std::min(1.0, 4.0 / static_cast<double>(num_classes));
  const long r = std::max(1L, std::lround(kPatternBox * std::min(w, h) * crowd / 2.0 - 0.5));

  std::vector<std::pair<std::size_t, std::size_t>> px;
  for (long dy = -r; dy <= r; ++dy) {
    for (long dx = -r; dx <= r; ++dx) {
      const long x = cx + dx, y = cy + dy;
      if (x < 0 || y < 0 || x >= static_cast<long>(width) || y >= static_cast<long>(height)) continue;
      if (in_stroke(cls, dx, dy, r)) px.emplace_back(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
    }
  }
  return px;
}

Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();

  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> patterns;
  std::vector<int> owner(cfg.width * cfg.height, -1);
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    patterns.push_back(class_pattern_pixels(c, cfg.num_classes, cfg.width, cfg.height));
    if (patterns.back().empty()) throw Error("image too small for class pattern layout");
    for (auto [x, y] : patterns.back()) {
      int& o = owner[y * cfg.width + x];
      if (o >= 0) throw Error("class patterns overlap at this image size");
      o = static_cast<int>(c);
    }
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0 ? cfg.noise_std : 1.0);

  Dataset ds;
  ds.name = "synthetic";
  ds.num_classes = cfg.num_classes;
  ds.width = cfg.width;
  ds.height = cfg.height;
  ds.samples.reserve(cfg.num_samples);

  for (std::size_t i = 0; i < cfg.num_samples; ++i) {
    LabelVector label(cfg.num_classes);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      label.set(c, unit(rng) < cfg.prevalence(c));
    }
    std::vector<double> px(cfg.width * cfg.height, kBackground);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      if (!label.test(c)) continue;
      for (auto [x, y] : patterns[c]) px[y * cfg.width + x] = pattern_intensity(c);
    }
    for (double& v : px) {
      if (cfg.noise_std > 0) v += noise(rng);
      v = quantize_8bit(v);
    }
    ds.samples.push_back(Sample{i, Image(cfg.width, cfg.height, std::move(px)), std::move(label), {}});
  }
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw Error("train_frac must be in (0,1)");
  const std::size_t n = ds.size();
  const auto n_first = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(n) + 1e-9));
  if (n_first == 0 || n_first == n) throw Error("split would produce an empty partition");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset first{ds.name + "-train", ds.num_classes, ds.width, ds.height, {}};
  Dataset second{ds.name + "-test", ds.num_classes, ds.width, ds.height, {}};
  first.samples.reserve(n_first);
  second.samples.reserve(n - n_first);
  for (std::size_t k = 0; k < n; ++k) {
    (k < n_first ? first : second).samples.push_back(ds.samples[order[k]]);
  }
  return {std::move(first), std::move(second)};
}

namespace {

const char* kManifestHeader = "id,image,true_label,is_infected,infected_label";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string image_filename(SampleId id) { return "img_" + std::to_string(id) + ".pgm"; }

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  {
    std::ofstream info(dir / "dataset.info");
    if (!info) throw IoError("cannot write dataset.info in " + dir.string());
    info << "name=" << ds.name << "\nnum_classes=" << ds.num_classes << "\nwidth=" << ds.width
         << "\nheight=" << ds.height << "\n";
  }

  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  manifest << kManifestHeader << "\n";
  for (const auto& s : ds.samples) {
    const auto file = image_filename(s.id);
    for (double v : s.image.pixels()) {
      if (quantize_8bit(v) != v) {
        throw IoError("sample " + std::to_string(s.id) + " is not representable at 8 bits");
      }
    }
    write_pgm(s.image, dir / file);
    manifest << s.id << ',' << file << ',' << s.true_label.to_string() << ','
             << (s.is_infected() ? 1 : 0) << ','
             << (s.infected_label ? s.infected_label->to_string() : std::string{}) << "\n";
  }
  if (!manifest) throw IoError("manifest write failed in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  {
    std::ifstream info(dir / "dataset.info");
    if (!info) throw IoError("missing dataset.info in " + dir.string());
    std::string line;
    bool have_classes = false, have_w = false, have_h = false;
    while (std::getline(info, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(0, eq);
      const auto val = line.substr(eq + 1);
      try {
        if (key == "name") ds.name = val;
        else if (key == "num_classes") ds.num_classes = std::stoul(val), have_classes = true;
        else if (key == "width") ds.width = std::stoul(val), have_w = true;
        else if (key == "height") ds.height = std::stoul(val), have_h = true;
      } catch (const std::exception&) {
        throw IoError("malformed dataset.info entry '" + line + "'");
      }
    }
    if (!have_classes || !have_w || !have_h) throw IoError("incomplete dataset.info in " + dir.string());
  }

  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("missing manifest.csv in " + dir.string());
  std::string line;
  if (!std::getline(manifest, line) || line != kManifestHeader) {
    throw IoError("malformed manifest header in " + dir.string());
  }
  std::set<std::string> referenced;
  std::size_t row = 1;
  while (std::getline(manifest, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 5) {
      throw IoError("manifest row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                    " fields");
    }
    Sample s;
    try {
      s.id = std::stoull(cells[0]);
      s.true_label = LabelVector::from_string(cells[2]);
      const bool infected = cells[3] == "1";
      if (!infected && cells[3] != "0") throw Error("bad infected flag");
      if (infected == cells[4].empty()) throw Error("infected flag disagrees with infected label");
      if (infected) s.infected_label = LabelVector::from_string(cells[4]);
    } catch (const std::exception& e) {
      throw IoError("manifest row " + std::to_string(row) + ": " + e.what());
    }
    const auto path = dir / cells[1];
    if (!std::filesystem::exists(path)) {
      throw IoError("manifest row " + std::to_string(row) + " references missing image " + cells[1]);
    }
    referenced.insert(cells[1]);
    s.image = read_pgm(path);
    ds.samples.push_back(std::move(s));
  }

  std::size_t on_disk = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".pgm") ++on_disk;
  }
  if (on_disk != referenced.size()) {
    throw IoError("image/label count mismatch in " + dir.string() + ": " + std::to_string(on_disk) +
                  " images, " + std::to_string(referenced.size()) + " manifest entries");
  }
  try {
    ds.validate();
  } catch (const Error& e) {
    throw IoError(std::string("inconsistent dataset on disk: ") + e.what());
  }
  return ds;
}

}  // namespace backdoor
