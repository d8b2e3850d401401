#include "freqexit/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <numeric>
#include <sstream>
#include <thread>

#include "freqexit/errors.hpp"

namespace freqexit {

namespace {

using Clock = std::chrono::steady_clock;

struct BranchResult {
  bool fire = false;
  int predicted = 0;
};

BranchResult run_branch(const GfnetModel& model, const ExitBranch& br, const ExitConfig& cfg,
                        const TensorR& hidden) {
  const TensorR pooled = pooled_features(model, hidden);
  const auto z = im_logits(br, pooled.data());
  const GateDecision d = gate_decision(gate_features(z, cfg.temperature), br, cfg.tau);
  return {d.exit, argmax(z)};
}

void finish(ExitRecord& r, const CostModel& cost, LatencyMode mode, Clock::time_point start) {
  r.flops_spent = r.final() ? cost.spent_final() : cost.spent_exit(*r.exit_layer);
  r.modeled_latency = modeled_latency(r, cost, mode);
  r.wall_latency = std::chrono::duration<double>(Clock::now() - start).count();
}

void check_bundle(const GfnetModel& model, const ExitBundle* bundle, const CostModel& cost) {
  if (cost.depth() != model.config().depth) throw ConfigError("cost model depth differs from the model");
  const std::vector<std::size_t> layers = bundle ? bundle->layers() : std::vector<std::size_t>{};
  if (layers != cost.exit_points) throw ConfigError("cost model exit points differ from the bundle");
}

}  // namespace

ExitRecord adaptive_infer(const GfnetModel& model, const ExitBundle* bundle, const CostModel& cost,
                          const TensorR& image, LatencyMode mode) {
  const auto start = Clock::now();
  check_bundle(model, bundle, cost);
  const std::size_t depth = model.config().depth;
  const auto grid = Shape{model.config().grid(), model.config().grid(), model.config().embed_dim};
  ExitRecord r;
  Tape t(false);
  const TensorR* imgs[] = {&image};
  Var x = model.embed(t, imgs);
  std::size_t next = 0;
  for (std::size_t layer = 0; layer <= depth; ++layer) {
    if (bundle && next < bundle->branches.size() && bundle->branches[next].layer == layer) {
      const auto res = run_branch(model, bundle->branches[next], bundle->config,
                                  t.value(x).reshaped(grid));
      ++next;
      if (res.fire) {
        r.exit_layer = layer;
        r.predicted = res.predicted;
        finish(r, cost, mode, start);
        return r;
      }
    }
    if (layer < depth) x = model.block(t, layer, x, 1);
  }
  r.predicted = fused_prediction(head_logits(model, t.value(x)));
  finish(r, cost, mode, start);
  return r;
}

ExitRecord adaptive_infer_pipelined(const GfnetModel& model, const ExitBundle* bundle,
                                    const CostModel& cost, const TensorR& image, LatencyMode mode) {
  const auto start = Clock::now();
  check_bundle(model, bundle, cost);
  const std::size_t depth = model.config().depth;
  const auto grid = Shape{model.config().grid(), model.config().grid(), model.config().embed_dim};
  ExitRecord r;
  Tape t(false);
  const TensorR* imgs[] = {&image};
  Var x = model.embed(t, imgs);
  std::size_t next = 0;
  for (std::size_t layer = 0; layer <= depth; ++layer) {
    std::future<BranchResult> pending;
    if (bundle && next < bundle->branches.size() && bundle->branches[next].layer == layer) {
      const ExitBranch& br = bundle->branches[next++];
      pending = std::async(std::launch::async,
                           [&model, &br, cfg = bundle->config, hidden = t.value(x).reshaped(grid)] {
                             return run_branch(model, br, cfg, hidden);
                           });
    }
    // Speculatively advance the backbone while the branch decides.
    Var advanced = x;
    std::optional<Logits> head;
    if (layer < depth) advanced = model.block(t, layer, x, 1);
    else head = head_logits(model, t.value(x));
    if (pending.valid()) {
      const BranchResult res = pending.get();
      if (res.fire) {
        r.exit_layer = layer;
        r.predicted = res.predicted;
        finish(r, cost, mode, start);
        return r;
      }
    }
    if (head) {
      r.predicted = fused_prediction(*head);
      break;
    }
    x = advanced;
  }
  finish(r, cost, mode, start);
  return r;
}

// ---------------------------------------------------------------------------
// Latency and energy models

namespace {

struct Walk {
  double time = 0.0;
  std::uint64_t speculative = 0;
};

Walk walk(const ExitRecord& rec, const CostModel& cost, LatencyMode mode) {
  const Executor bb = cost.backbone_executor, be = cost.branch_executor;
  auto seconds = [&](std::uint64_t f, Executor e) { return static_cast<double>(f) / cost.throughput(e); };
  const bool overlap = mode == LatencyMode::overlapped && bb != be;
  const std::size_t depth = cost.depth();
  Walk w;
  w.time = seconds(cost.embed_flops, bb);
  std::size_t next = 0;
  for (std::size_t layer = 0; layer <= depth; ++layer) {
    const std::uint64_t next_flops = layer < depth ? cost.block_flops[layer] : cost.head_flops;
    const double next_time = seconds(next_flops, bb);
    if (next < cost.exit_points.size() && cost.exit_points[next] == layer) {
      ++next;
      const double branch_time = seconds(cost.branch_flops(), be);
      const bool fires = !rec.final() && *rec.exit_layer == layer;
      if (fires) {
        w.time += branch_time;
        if (overlap) w.speculative = next_flops;
        return w;
      }
      w.time += overlap ? std::max(branch_time, next_time) : branch_time + next_time;
    } else {
      w.time += next_time;
    }
  }
  return w;
}

}  // namespace

double modeled_latency(const ExitRecord& record, const CostModel& cost, LatencyMode mode) {
  return walk(record, cost, mode).time;
}

std::uint64_t energy_proxy(const ExitRecord& record, const CostModel& cost, LatencyMode mode) {
  const std::uint64_t base = record.final() ? cost.spent_final() : cost.spent_exit(*record.exit_layer);
  return base + walk(record, cost, mode).speculative;
}

// ---------------------------------------------------------------------------
// Statistics

Rational Rational::of(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw ConfigError("rational with zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? Rational{0, 1} : Rational{num / g, den / g};
}

Rational Rational::operator+(const Rational& o) const {
  const std::uint64_t l = std::lcm(den, o.den);
  return of(num * (l / den) + o.num * (l / o.den), l);
}

Rational Rational::operator*(const Rational& o) const {
  const Rational a = of(num, o.den), b = of(o.num, den);
  return of(a.num * b.num, a.den * b.den);
}

Rational RunStats::exit_rate(std::size_t i) const { return Rational::of(exits.at(i).count, samples); }

Rational RunStats::exit_accuracy(std::size_t i) const {
  const auto& e = exits.at(i);
  return e.count == 0 ? Rational{0, 1} : Rational::of(e.correct, e.count);
}

Rational RunStats::overall_accuracy() const { return Rational::of(correct, samples); }

double RunStats::mean_flops() const {
  return static_cast<double>(total_flops) / static_cast<double>(samples);
}

double RunStats::mean_ic() const { return mean_flops() / static_cast<double>(full_path_flops); }

double RunStats::modeled_p50() const { return percentile(modeled_latencies, 0.5); }
double RunStats::modeled_p95() const { return percentile(modeled_latencies, 0.95); }
double RunStats::wall_p50() const { return percentile(wall_latencies, 0.5); }
double RunStats::wall_p95() const { return percentile(wall_latencies, 0.95); }

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

RunStats evaluate(const GfnetModel& model, const ExitBundle* bundle, const CostModel& cost,
                  const Dataset& data, const EvalOptions& options, std::vector<ExitRecord>* records) {
  if (data.size() == 0) throw DataError("cannot evaluate an empty dataset");
  std::optional<ExitBundle> adjusted;
  if (bundle && options.tau) {
    adjusted = *bundle;
    adjusted->config.tau = *options.tau;
    bundle = &*adjusted;
  }
  const std::size_t n = data.size();
  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, n);
  std::vector<ExitRecord> recs(n);
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& img = data.items[i].pixels;
      recs[i] = options.pipelined ? adaptive_infer_pipelined(model, bundle, cost, img, options.mode)
                                  : adaptive_infer(model, bundle, cost, img, options.mode);
      recs[i].sample = i;
      recs[i].truth = data.items[i].label;
    }
  };
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t k = 0; k < threads; ++k) {
      const std::size_t lo = n * k / threads, hi = n * (k + 1) / threads;
      pool.emplace_back([&, k, lo, hi] {
        try {
          work(lo, hi);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  RunStats s;
  for (std::size_t layer : cost.exit_points) s.exits.push_back({layer, 0, 0});
  s.exits.push_back({std::nullopt, 0, 0});
  s.samples = n;
  s.full_path_flops = cost.full_path_flops();
  for (const auto& r : recs) {
    const std::size_t idx =
        r.final() ? s.exits.size() - 1
                  : static_cast<std::size_t>(std::lower_bound(cost.exit_points.begin(), cost.exit_points.end(),
                                                              *r.exit_layer) -
                                             cost.exit_points.begin());
    const bool ok = r.predicted == r.truth;
    s.exits[idx].count += 1;
    s.exits[idx].correct += ok;
    s.correct += ok;
    s.total_flops += r.flops_spent;
    s.modeled_latencies.push_back(r.modeled_latency);
    s.wall_latencies.push_back(r.wall_latency);
  }
  if (records) *records = std::move(recs);
  return s;
}

namespace {

std::string exit_label(const ExitStat& e) { return e.layer ? std::to_string(*e.layer) : "final"; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

std::string stats_csv(const RunStats& s) {
  std::ostringstream os;
  os << "b,count,exit_rate,exit_accuracy\n";
  for (std::size_t i = 0; i < s.exits.size(); ++i) {
    os << exit_label(s.exits[i]) << ',' << s.exits[i].count << ',' << fmt(s.exit_rate(i).value()) << ','
       << fmt(s.exit_accuracy(i).value()) << '\n';
  }
  return os.str();
}

std::string stats_svg(const RunStats& s, const std::string& title) {
  const double width = 640, height = 360, left = 60, right = 20, top = 40, bottom = 50;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  const std::size_t n = s.exits.size();
  const double slot = plot_w / static_cast<double>(n);
  auto y_of = [&](double v) { return top + plot_h * (1.0 - v); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
     << "</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    os << "<line x1=\"" << left << "\" x2=\"" << width - right << "\" y1=\"" << fixed(y_of(v))
       << "\" y2=\"" << fixed(y_of(v)) << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << left - 8 << "\" y=\"" << fixed(y_of(v) + 4) << "\" text-anchor=\"end\">"
       << fixed(v, 2) << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double rate = s.exit_rate(i).value(), acc = s.exit_accuracy(i).value();
    const double cx = left + slot * (static_cast<double>(i) + 0.5);
    const double bw = slot * 0.6;
    os << "<rect x=\"" << fixed(cx - bw / 2) << "\" y=\"" << fixed(y_of(rate)) << "\" width=\""
       << fixed(bw) << "\" height=\"" << fixed(plot_h * rate) << "\" fill=\"#4e79a7\"/>\n";
    if (s.exits[i].count > 0) {
      os << "<circle cx=\"" << fixed(cx) << "\" cy=\"" << fixed(y_of(acc))
         << "\" r=\"5\" fill=\"#e15759\"/>\n";
    }
    os << "<text x=\"" << fixed(cx) << "\" y=\"" << height - bottom + 18 << "\" text-anchor=\"middle\">"
       << exit_label(s.exits[i]) << "</text>\n";
  }
  const double overall = s.overall_accuracy().value();
  os << "<line x1=\"" << left << "\" x2=\"" << width - right << "\" y1=\"" << fixed(y_of(overall))
     << "\" y2=\"" << fixed(y_of(overall)) << "\" stroke=\"#59a14f\" stroke-dasharray=\"6 4\"/>\n";
  os << "<line x1=\"" << left << "\" x2=\"" << left << "\" y1=\"" << top << "\" y2=\"" << top + plot_h
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" x2=\"" << width - right << "\" y1=\"" << top + plot_h << "\" y2=\""
     << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\">exit layer</text>\n";
  os << "<text x=\"" << width - right << "\" y=\"" << top - 6 << "\" text-anchor=\"end\">"
     << "bars: exit rate, dots: exit accuracy, dashed: overall accuracy " << fixed(overall, 4)
     << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Benchmark

double improvement_pct(double baseline, double variant) {
  if (baseline == 0.0) throw ConfigError("improvement over a zero baseline");
  return 100.0 * (baseline - variant) / baseline;
}

std::vector<LatencyRow> benchmark(const GfnetModel& model, const ExitBundle& per_layer,
                                  const ExitBundle& sparse, const Dataset& data, std::size_t repeats) {
  if (repeats < 3) throw ConfigError("benchmark needs at least 3 repeats");
  if (data.size() == 0) throw DataError("cannot benchmark an empty dataset");
  struct Mode {
    const char* name;
    const ExitBundle* bundle;
  };
  const Mode modes[] = {{"backbone_only", nullptr}, {"per_layer", &per_layer}, {"sparse", &sparse}};
  std::vector<LatencyRow> rows;
  double baseline = 0.0;
  for (const auto& m : modes) {
    const CostModel cost = make_cost_model(model.config(), m.bundle ? m.bundle->layers()
                                                                    : std::vector<std::size_t>{});
    for (const auto& it : data.items) adaptive_infer(model, m.bundle, cost, it.pixels);  // warm-up
    std::vector<std::vector<double>> times(data.size());
    std::uint64_t flops = 0;
    for (std::size_t rep = 0; rep < repeats; ++rep) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        const ExitRecord r = adaptive_infer(model, m.bundle, cost, data.items[i].pixels);
        times[i].push_back(r.wall_latency);
        if (rep == 0) flops += r.flops_spent;
      }
    }
    std::vector<double> per_sample;
    for (auto& t : times) per_sample.push_back(percentile(t, 0.5));
    LatencyRow row;
    row.placement_mode = m.name;
    row.p50 = percentile(per_sample, 0.5);
    row.p95 = percentile(per_sample, 0.95);
    row.mean_flops = static_cast<double>(flops) / static_cast<double>(data.size());
    if (m.bundle == nullptr) baseline = row.mean_flops;
    row.energy_improvement_pct = improvement_pct(baseline, row.mean_flops);
    rows.push_back(row);
  }
  return rows;
}

std::string benchmark_csv(const std::vector<LatencyRow>& rows) {
  std::ostringstream os;
  os << "placement_mode,p50,p95,mean_flops,energy_proxy_improvement_pct\n";
  for (const auto& r : rows) {
    os << r.placement_mode << ',' << fmt(r.p50) << ',' << fmt(r.p95) << ',' << fmt(r.mean_flops) << ','
       << fmt(r.energy_improvement_pct) << '\n';
  }
  return os.str();
}

}  // namespace freqexit
