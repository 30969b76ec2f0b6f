#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "backdoor/model.hpp"

namespace backdoor {

// Attack success rate over infected-image records:
//   #{T_t = 0 and prob_t >= p} / #{T_t = 0}.
// Throws UndefinedMetricError when no record has T_t = 0.
double asr(std::span<const PredictionRecord> records, std::size_t target_class, double threshold);

// Mann-Whitney AUROC of flattened scores, ties counted as 1/2.
// Throws UndefinedMetricError unless both classes are present.
double micro_auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Micro AUROC of clean records against their true labels.
double auroc_nn(std::span<const PredictionRecord> clean);
// Micro AUROC of infected records against the infected labels.
double auroc_tt(std::span<const PredictionRecord> infected);
// Micro AUROC of infected records against the true labels; lower means a stronger backdoor.
double auroc_tn(std::span<const PredictionRecord> infected);
// Micro AUROC of any record mix against true labels (inference-mix evaluation).
double auroc_true_labels(std::span<const PredictionRecord> records);

// Column name for an ASR threshold, e.g. 0.6 -> "asr_p60".
std::string asr_column(double threshold);

// Metric values for one checkpoint. Undefined metrics are nullopt.
struct MetricReport {
  std::size_t epoch = 0;
  std::map<double, std::optional<double>> asr_by_threshold;
  std::optional<double> auroc_nn;
  std::optional<double> auroc_tt;
  std::optional<double> auroc_tn;

  // (column name, value) in results-CSV order.
  std::vector<std::pair<std::string, std::optional<double>>> columns() const;
};

MetricReport evaluate_epoch(std::size_t epoch, std::span<const PredictionRecord> clean,
                            std::span<const PredictionRecord> infected, std::size_t target_class,
                            std::span<const double> thresholds);

struct MetricAggregate {
  // Per-seed extrema over epochs (nullopt when the metric was never defined).
  std::vector<std::optional<double>> seed_min;
  std::vector<std::optional<double>> seed_max;
  // Mean and sample standard deviation across seeds of those extrema. The std
  // is absent with fewer than two defined seeds.
  std::optional<double> min_mean, min_std, max_mean, max_std;
};

struct AggregateReport {
  std::vector<std::string> metric_order;
  std::map<std::string, MetricAggregate> metrics;

  const MetricAggregate& at(const std::string& metric) const;
};

// Per-seed min/max over epochs, then mean +- std of the extrema across seeds.
// `runs[s]` holds the per-epoch reports of seed s.
AggregateReport aggregate(const std::vector<std::vector<MetricReport>>& runs);

// Same aggregation over an arbitrary named series: values[s][e].
MetricAggregate aggregate_series(const std::vector<std::vector<std::optional<double>>>& values);

}  // namespace backdoor
