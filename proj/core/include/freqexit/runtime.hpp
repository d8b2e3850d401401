#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "freqexit/cost_model.hpp"
#include "freqexit/data.hpp"
#include "freqexit/earlyexit.hpp"
#include "freqexit/gfnet.hpp"

namespace freqexit {

enum class LatencyMode { sequential, overlapped };

struct ExitRecord {
  std::size_t sample = 0;
  std::optional<std::size_t> exit_layer;  // empty: the backbone head
  int predicted = 0;
  int truth = 0;
  std::uint64_t flops_spent = 0;
  double modeled_latency = 0.0;
  double wall_latency = 0.0;

  bool final() const { return !exit_layer.has_value(); }
};

/// Runs blocks in order, consulting each branch of `bundle` (may be null for
/// backbone-only inference) and returning at the first firing gate.
ExitRecord adaptive_infer(const GfnetModel& model, const ExitBundle* bundle, const CostModel& cost,
                          const TensorR& image, LatencyMode mode = LatencyMode::sequential);
/// Same decisions and predictions, but each branch runs on a helper thread
/// while the main thread computes the next block.
ExitRecord adaptive_infer_pipelined(const GfnetModel& model, const ExitBundle* bundle,
                                    const CostModel& cost, const TensorR& image,
                                    LatencyMode mode = LatencyMode::overlapped);

/// Sequential: every executed component at its executor's throughput.
/// Overlapped: a branch on a different executor than the backbone runs
/// alongside the next block (or the head after the last block); the segment
/// costs max(branch, next) when the gate holds and the branch time when it
/// fires. Throws ConfigError on a non-positive throughput.
double modeled_latency(const ExitRecord& record, const CostModel& cost, LatencyMode mode);
/// FLOPs actually executed: flops_spent, plus in overlapped mode the
/// speculative component discarded when a gate fires.
std::uint64_t energy_proxy(const ExitRecord& record, const CostModel& cost, LatencyMode mode);

/// Exact fraction num/den in lowest terms.
struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Rational of(std::uint64_t num, std::uint64_t den);
  Rational operator+(const Rational& o) const;
  Rational operator*(const Rational& o) const;
  bool operator==(const Rational&) const = default;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

struct ExitStat {
  std::optional<std::size_t> layer;  // empty: the backbone head
  std::uint64_t count = 0;
  std::uint64_t correct = 0;
};

struct RunStats {
  std::vector<ExitStat> exits;  // one per branch in layer order, then the head
  std::uint64_t samples = 0;
  std::uint64_t correct = 0;
  std::uint64_t total_flops = 0;
  std::uint64_t full_path_flops = 0;
  std::vector<double> modeled_latencies;  // per sample, in sample order
  std::vector<double> wall_latencies;

  Rational exit_rate(std::size_t i) const;
  /// Zero for an exit point no sample reached.
  Rational exit_accuracy(std::size_t i) const;
  Rational overall_accuracy() const;
  double mean_flops() const;
  /// Mean flops_spent over the IC denominator (backbone plus head).
  double mean_ic() const;
  double modeled_p50() const;
  double modeled_p95() const;
  double wall_p50() const;
  double wall_p95() const;
};

struct EvalOptions {
  std::optional<double> tau;  // overrides the bundle threshold
  std::size_t threads = 1;
  LatencyMode mode = LatencyMode::sequential;
  bool pipelined = false;
};

/// Shards samples over `threads` workers and merges records in sample order.
/// Throws DataError on an empty dataset.
RunStats evaluate(const GfnetModel& model, const ExitBundle* bundle, const CostModel& cost,
                  const Dataset& data, const EvalOptions& options = {},
                  std::vector<ExitRecord>* records = nullptr);

/// Linear-interpolated percentile, q in [0, 1].
double percentile(std::vector<double> values, double q);

/// "b,count,exit_rate,exit_accuracy"; the head row uses b = final.
std::string stats_csv(const RunStats& stats);
/// Exit-rate bars, exit-accuracy markers and a dashed overall-accuracy line.
std::string stats_svg(const RunStats& stats, const std::string& title);

struct LatencyRow {
  std::string placement_mode;
  double p50 = 0.0;
  double p95 = 0.0;
  double mean_flops = 0.0;
  double energy_improvement_pct = 0.0;
};

/// Wall-clock per-sample latency of backbone-only, per-layer and sparse
/// placement. One warm-up pass is discarded; each sample's latency is the
/// median of `repeats` passes. Throws ConfigError when repeats < 3.
std::vector<LatencyRow> benchmark(const GfnetModel& model, const ExitBundle& per_layer,
                                  const ExitBundle& sparse, const Dataset& data,
                                  std::size_t repeats);
std::string benchmark_csv(const std::vector<LatencyRow>& rows);

/// 100 * (baseline - variant) / baseline.
double improvement_pct(double baseline, double variant);

}  // namespace freqexit
