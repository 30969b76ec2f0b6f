#include "backdoor/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "backdoor/error.hpp"

namespace backdoor {

double asr(std::span<const PredictionRecord> records, std::size_t target_class, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("ASR threshold must be in (0,1)");
  std::size_t hits = 0, eligible = 0;
  for (const auto& r : records) {
    if (!r.is_infected()) throw Error("ASR is defined over infected-image records only");
    if (target_class >= r.probs.size() || target_class >= r.true_label.size()) {
      throw Error("target class out of range");
    }
    if (r.true_label.test(target_class)) continue;
    ++eligible;
    if (r.probs[target_class] >= threshold) ++hits;
  }
  if (eligible == 0) throw UndefinedMetricError("undefined ASR: no infected record lacks the target class");
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

double micro_auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("micro_auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) {
    if (l > 1) throw Error("micro_auroc: labels must be binary");
    n_pos += l;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("undefined AUROC: labels contain a single class");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the positive rank sum, using midranks for ties so everything stays integral.
  std::uint64_t rank_sum_x2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t midrank_x2 = i + 1 + j;  // (i+1) + j = twice the mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum_x2 += midrank_x2;
    }
    i = j;
  }
  const std::uint64_t u_x2 = rank_sum_x2 - static_cast<std::uint64_t>(n_pos) * (n_pos + 1);
  return static_cast<double>(u_x2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace {

enum class LabelSource { True, Infected };

double records_auroc(std::span<const PredictionRecord> records, LabelSource source) {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (const auto& r : records) {
    const LabelVector& lab = source == LabelSource::Infected ? *r.infected_label : r.true_label;
    if (lab.size() != r.probs.size()) throw Error("record probs and labels differ in length");
    scores.insert(scores.end(), r.probs.begin(), r.probs.end());
    labels.insert(labels.end(), lab.bits().begin(), lab.bits().end());
  }
  return micro_auroc(scores, labels);
}

void require_all(std::span<const PredictionRecord> records, bool infected, const char* metric) {
  for (const auto& r : records) {
    if (r.is_infected() != infected) {
      throw Error(std::string(metric) + " expects only " + (infected ? "infected" : "clean") + " records");
    }
  }
}

}  // namespace

double auroc_nn(std::span<const PredictionRecord> clean) {
  require_all(clean, false, "AUROC-NN");
  return records_auroc(clean, LabelSource::True);
}

double auroc_tt(std::span<const PredictionRecord> infected) {
  require_all(infected, true, "AUROC-TT");
  return records_auroc(infected, LabelSource::Infected);
}

double auroc_tn(std::span<const PredictionRecord> infected) {
  require_all(infected, true, "AUROC-TN");
  return records_auroc(infected, LabelSource::True);
}

double auroc_true_labels(std::span<const PredictionRecord> records) {
  return records_auroc(records, LabelSource::True);
}

std::string asr_column(double threshold) {
  return "asr_p" + std::to_string(static_cast<long>(std::lround(threshold * 100.0)));
}

std::vector<std::pair<std::string, std::optional<double>>> MetricReport::columns() const {
  std::vector<std::pair<std::string, std::optional<double>>> out;
  for (const auto& [p, v] : asr_by_threshold) out.emplace_back(asr_column(p), v);
  out.emplace_back("auroc_nn", auroc_nn);
  out.emplace_back("auroc_tt", auroc_tt);
  out.emplace_back("auroc_tn", auroc_tn);
  return out;
}

namespace {

template <typename F>
std::optional<double> defined_or_absent(F&& f) {
  try {
    return f();
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

}  // namespace

MetricReport evaluate_epoch(std::size_t epoch, std::span<const PredictionRecord> clean,
                            std::span<const PredictionRecord> infected, std::size_t target_class,
                            std::span<const double> thresholds) {
  MetricReport r;
  r.epoch = epoch;
  for (double p : thresholds) {
    r.asr_by_threshold[p] = defined_or_absent([&] { return asr(infected, target_class, p); });
  }
  r.auroc_nn = defined_or_absent([&] { return auroc_nn(clean); });
  r.auroc_tt = defined_or_absent([&] { return auroc_tt(infected); });
  r.auroc_tn = defined_or_absent([&] { return auroc_tn(infected); });
  return r;
}

const MetricAggregate& AggregateReport::at(const std::string& metric) const {
  const auto it = metrics.find(metric);
  if (it == metrics.end()) throw Error("no aggregate for metric '" + metric + "'");
  return it->second;
}

namespace {

void mean_std(const std::vector<std::optional<double>>& xs, std::optional<double>& mean,
              std::optional<double>& stddev) {
  std::vector<double> v;
  for (const auto& x : xs) {
    if (x) v.push_back(*x);
  }
  if (v.empty()) return;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  mean = m;
  if (v.size() < 2) return;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

MetricAggregate aggregate_series(const std::vector<std::vector<std::optional<double>>>& values) {
  if (values.empty()) throw Error("aggregate: no runs supplied");
  MetricAggregate a;
  for (const auto& seed : values) {
    if (seed.empty()) throw Error("aggregate: a run has no epochs");
    std::optional<double> lo, hi;
    for (const auto& v : seed) {
      if (!v) continue;
      lo = lo ? std::min(*lo, *v) : *v;
      hi = hi ? std::max(*hi, *v) : *v;
    }
    a.seed_min.push_back(lo);
    a.seed_max.push_back(hi);
  }
  mean_std(a.seed_min, a.min_mean, a.min_std);
  mean_std(a.seed_max, a.max_mean, a.max_std);
  return a;
}

AggregateReport aggregate(const std::vector<std::vector<MetricReport>>& runs) {
  if (runs.empty()) throw Error("aggregate: no runs supplied");
  AggregateReport out;
  if (runs.front().empty()) throw Error("aggregate: a run has no epochs");
  for (const auto& [name, _] : runs.front().front().columns()) out.metric_order.push_back(name);

  for (std::size_t m = 0; m < out.metric_order.size(); ++m) {
    std::vector<std::vector<std::optional<double>>> series;
    for (const auto& run : runs) {
      if (run.empty()) throw Error("aggregate: a run has no epochs");
      auto& s = series.emplace_back();
      for (const auto& rep : run) {
        const auto cols = rep.columns();
        if (cols.size() != out.metric_order.size() || cols[m].first != out.metric_order[m]) {
          throw Error("aggregate: reports disagree on metric columns");
        }
        s.push_back(cols[m].second);
      }
    }
    out.metrics[out.metric_order[m]] = aggregate_series(series);
  }
  return out;
}

}  // namespace backdoor
