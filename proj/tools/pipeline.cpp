#include "pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "freqexit/errors.hpp"
#include "freqexit/rng.hpp"
#include "freqexit/serialize.hpp"

namespace freqexit::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::size_t as_size(const json& v, const std::string& key) {
  if (!v.is_number_unsigned())
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

std::uint64_t as_u64(const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw ConfigError("config key '" + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return v.get<double>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

using Setter = std::function<void(PipelineConfig&, const json&, const std::string&)>;

template <typename T>
Setter size_field(T PipelineConfig::*f) {
  return [f](PipelineConfig& c, const json& v, const std::string& k) { c.*f = as_size(v, k); };
}
Setter double_field(double PipelineConfig::*f) {
  return [f](PipelineConfig& c, const json& v, const std::string& k) { c.*f = as_double(v, k); };
}
Setter string_field(std::string PipelineConfig::*f) {
  return [f](PipelineConfig& c, const json& v, const std::string& k) { c.*f = as_string(v, k); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](PipelineConfig& c, const json& v, const std::string& k) { c.seed = as_u64(v, k); }},
      {"data_dir", string_field(&PipelineConfig::data_dir)},
      {"n_per_class", size_field(&PipelineConfig::n_per_class)},
      {"num_classes", size_field(&PipelineConfig::num_classes)},
      {"image_size", size_field(&PipelineConfig::image_size)},
      {"train_fraction", double_field(&PipelineConfig::train_fraction)},
      {"patch_size", size_field(&PipelineConfig::patch_size)},
      {"depth", size_field(&PipelineConfig::depth)},
      {"mlp_ratio", size_field(&PipelineConfig::mlp_ratio)},
      {"teacher_embed_dim", size_field(&PipelineConfig::teacher_embed_dim)},
      {"student_embed_dim", size_field(&PipelineConfig::student_embed_dim)},
      {"learning_rate", double_field(&PipelineConfig::learning_rate)},
      {"teacher_epochs", size_field(&PipelineConfig::teacher_epochs)},
      {"student_epochs", size_field(&PipelineConfig::student_epochs)},
      {"batch_size", size_field(&PipelineConfig::batch_size)},
      {"weight_decay", double_field(&PipelineConfig::weight_decay)},
      {"momentum", double_field(&PipelineConfig::momentum)},
      {"l_m", size_field(&PipelineConfig::l_m)},
      {"M", size_field(&PipelineConfig::M)},
      {"tau", double_field(&PipelineConfig::tau)},
      {"lambda", double_field(&PipelineConfig::lambda)},
      {"temperature", double_field(&PipelineConfig::temperature)},
      {"warmup_epochs", size_field(&PipelineConfig::warmup_epochs)},
      {"exit_iterations", size_field(&PipelineConfig::exit_iterations)},
      {"exit_learning_rate", double_field(&PipelineConfig::exit_learning_rate)},
      {"exit_batch_size", size_field(&PipelineConfig::exit_batch_size)},
      {"latency_mode", string_field(&PipelineConfig::latency_mode)},
      {"branch_executor", string_field(&PipelineConfig::branch_executor)},
      {"main_throughput", double_field(&PipelineConfig::main_throughput)},
      {"aux_throughput", double_field(&PipelineConfig::aux_throughput)},
      {"bench_repeats", size_field(&PipelineConfig::bench_repeats)},
      {"bench_samples", size_field(&PipelineConfig::bench_samples)},
      {"sweep_l_m",
       [](PipelineConfig& c, const json& v, const std::string& k) {
         if (!v.is_array()) throw ConfigError("config key '" + k + "' must be an array");
         c.sweep_l_m.clear();
         for (const auto& e : v) c.sweep_l_m.push_back(as_size(e, k));
       }},
      {"sweep_accuracy_tolerance", double_field(&PipelineConfig::sweep_accuracy_tolerance)},
  };
  return table;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string join(const std::vector<std::size_t>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

/// Hash of a file, or of every file below a directory in path order.
std::uint64_t hash_path(const fs::path& p) {
  if (!fs::is_directory(p)) return fnv1a64(read_file(p));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) {
    acc += fs::relative(f, p).generic_string();
    acc += hex64(fnv1a64(read_file(f)));
  }
  return fnv1a64(acc);
}

void require_input(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw StateError("missing " + p.string() + "; run '" + producer + "' first");
}

void log_line(const std::string& command, const std::string& text) {
  std::cout << "[" << command << "] " << text << std::endl;
}

std::string alternate_log_csv(const std::vector<std::pair<std::string, const TrainedBundle*>>& runs) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "bundle,iteration,mean_joint_loss,mean_ic,routed\n";
  for (const auto& [name, tb] : runs)
    for (const auto& e : tb->log)
      os << name << ',' << e.iteration << ',' << e.mean_joint_loss << ',' << e.mean_ic << ','
         << join(e.routed, ';') << '\n';
  return os.str();
}

ExitConfig per_layer_config(const ExitConfig& base) {
  ExitConfig c = base;
  c.l_m = 0;
  c.M = 1;
  return c;
}

std::size_t bundle_params(const ExitBundle& b) {
  std::size_t n = 0;
  for (const auto& br : b.branches)
    n += br.im.weight.value.size() + br.im.bias.value.size() + br.gate_w.value.size() +
         br.gate_b.value.size();
  return n;
}

struct Evaluated {
  RunStats stats;
  std::vector<ExitRecord> records;
  CostModel cost;
  double energy = 0.0;
};

Evaluated run_eval(const PipelineConfig& config, const GfnetModel& model, const ExitBundle* bundle,
                   const Dataset& data, std::size_t threads, std::optional<double> tau = {}) {
  Evaluated e;
  e.cost = config.cost_model(model.config(), bundle ? bundle->layers() : std::vector<std::size_t>{});
  EvalOptions opts;
  opts.tau = tau;
  opts.threads = threads;
  opts.mode = config.mode();
  e.stats = evaluate(model, bundle, e.cost, data, opts, &e.records);
  e.energy = mean_energy(e.records, e.cost, opts.mode);
  return e;
}

}  // namespace

void PipelineConfig::validate() const {
  if (n_per_class < 2) throw ConfigError("n_per_class must be at least 2");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  teacher_config().validate();
  student_config().validate();
  teacher_train().validate();
  student_train().validate();
  if (exit_iterations > 0) alternate_train().validate();
  if (exit_batch_size == 0) throw ConfigError("exit_batch_size must be positive");
  if (!(exit_learning_rate > 0.0)) throw ConfigError("exit_learning_rate must be positive");
  exit_config().validate(depth + 1);
  for (std::size_t l : sweep_l_m) {
    if (l > depth) throw ConfigError("sweep_l_m entry " + std::to_string(l) + " exceeds the depth");
  }
  if (latency_mode != "sequential" && latency_mode != "overlapped")
    throw ConfigError("latency_mode must be 'sequential' or 'overlapped'");
  if (branch_executor != "main" && branch_executor != "auxiliary")
    throw ConfigError("branch_executor must be 'main' or 'auxiliary'");
  if (!(main_throughput > 0.0) || !(aux_throughput > 0.0)) throw ConfigError("throughputs must be positive");
  if (bench_repeats < 3) throw ConfigError("bench_repeats must be at least 3");
  if (!(sweep_accuracy_tolerance >= 0.0)) throw ConfigError("sweep_accuracy_tolerance must be non-negative");
}

GfnetConfig PipelineConfig::teacher_config() const {
  GfnetConfig c;
  c.image_size = image_size;
  c.patch_size = patch_size;
  c.embed_dim = teacher_embed_dim;
  c.depth = depth;
  c.mlp_ratio = mlp_ratio;
  c.num_classes = num_classes;
  c.dual_head = false;
  return c;
}

GfnetConfig PipelineConfig::student_config() const {
  GfnetConfig c = teacher_config();
  c.embed_dim = student_embed_dim;
  c.dual_head = true;
  return c;
}

ExitConfig PipelineConfig::exit_config() const {
  ExitConfig c;
  c.l_m = l_m;
  c.M = M;
  c.tau = tau;
  c.lambda = lambda;
  c.temperature = temperature;
  return c;
}

TrainConfig PipelineConfig::teacher_train() const {
  TrainConfig t;
  t.learning_rate = learning_rate;
  t.epochs = teacher_epochs;
  t.batch_size = batch_size;
  t.weight_decay = weight_decay;
  t.momentum = momentum;
  t.seed = derive_seed(seed, "teacher");
  return t;
}

TrainConfig PipelineConfig::student_train() const {
  TrainConfig t = teacher_train();
  t.epochs = student_epochs;
  t.seed = derive_seed(seed, "student");
  return t;
}

TrainConfig PipelineConfig::warmup_train() const {
  TrainConfig t;
  t.learning_rate = exit_learning_rate;
  t.epochs = warmup_epochs;
  t.batch_size = exit_batch_size;
  return t;
}

TrainConfig PipelineConfig::alternate_train() const {
  TrainConfig t = warmup_train();
  t.epochs = exit_iterations;
  return t;
}

LatencyMode PipelineConfig::mode() const {
  return latency_mode == "overlapped" ? LatencyMode::overlapped : LatencyMode::sequential;
}

CostModel PipelineConfig::cost_model(const GfnetConfig& model,
                                     const std::vector<std::size_t>& points) const {
  CostModel c = make_cost_model(model, points);
  c.branch_executor = branch_executor == "auxiliary" ? Executor::auxiliary : Executor::main;
  c.main_throughput = main_throughput;
  c.aux_throughput = aux_throughput;
  c.validate();
  return c;
}

PipelineConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  PipelineConfig c;
  const auto& table = setters();
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto s = table.find(it.key());
    if (s == table.end()) throw ConfigError("unknown config key '" + it.key() + "'");
    s->second(c, it.value(), it.key());
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("cannot read config " + path.string());
  return parse_config(read_file(path));
}

std::string config_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["n_per_class"] = c.n_per_class;
  j["num_classes"] = c.num_classes;
  j["image_size"] = c.image_size;
  j["train_fraction"] = c.train_fraction;
  j["patch_size"] = c.patch_size;
  j["depth"] = c.depth;
  j["mlp_ratio"] = c.mlp_ratio;
  j["teacher_embed_dim"] = c.teacher_embed_dim;
  j["student_embed_dim"] = c.student_embed_dim;
  j["learning_rate"] = c.learning_rate;
  j["teacher_epochs"] = c.teacher_epochs;
  j["student_epochs"] = c.student_epochs;
  j["batch_size"] = c.batch_size;
  j["weight_decay"] = c.weight_decay;
  j["momentum"] = c.momentum;
  j["l_m"] = c.l_m;
  j["M"] = c.M;
  j["tau"] = c.tau;
  j["lambda"] = c.lambda;
  j["temperature"] = c.temperature;
  j["warmup_epochs"] = c.warmup_epochs;
  j["exit_iterations"] = c.exit_iterations;
  j["exit_learning_rate"] = c.exit_learning_rate;
  j["exit_batch_size"] = c.exit_batch_size;
  j["latency_mode"] = c.latency_mode;
  j["branch_executor"] = c.branch_executor;
  j["main_throughput"] = c.main_throughput;
  j["aux_throughput"] = c.aux_throughput;
  j["bench_repeats"] = c.bench_repeats;
  j["bench_samples"] = c.bench_samples;
  j["sweep_l_m"] = c.sweep_l_m;
  j["sweep_accuracy_tolerance"] = c.sweep_accuracy_tolerance;
  return j.dump(2);
}

DatasetSplit make_datasets(const PipelineConfig& config) {
  Dataset all;
  if (config.data_dir.empty()) {
    all = generate_synthetic(config.n_per_class, config.num_classes, config.image_size,
                             derive_seed(config.seed, "data"));
  } else {
    all = load_pixmap_dir(config.data_dir, config.image_size);
    if (all.num_classes() != config.num_classes)
      throw ConfigError("data_dir holds " + std::to_string(all.num_classes()) + " classes but num_classes is " +
                        std::to_string(config.num_classes));
  }
  return split(all, {config.train_fraction, derive_seed(config.seed, "split")});
}

double mean_energy(const std::vector<ExitRecord>& records, const CostModel& cost, LatencyMode mode) {
  if (records.empty()) throw DataError("no records to average");
  std::uint64_t total = 0;
  for (const auto& r : records) total += energy_proxy(r, cost, mode);
  return static_cast<double>(total) / static_cast<double>(records.size());
}

std::size_t choose_start(const std::vector<double>& train_energy, const std::vector<double>& train_accuracy,
                         double backbone_accuracy, double tolerance) {
  if (train_energy.empty() || train_energy.size() != train_accuracy.size())
    throw DimensionError("sweep statistics must be non-empty and of equal length");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < train_energy.size(); ++i) {
    if (backbone_accuracy - train_accuracy[i] > tolerance) continue;
    if (!best || train_energy[i] < train_energy[*best]) best = i;
  }
  if (best) return *best;
  return static_cast<std::size_t>(std::min_element(train_energy.begin(), train_energy.end()) -
                                  train_energy.begin());
}

TrainedBundle train_bundle(const PipelineConfig& config, const GfnetModel& backbone, const ExitConfig& exit_cfg,
                           const FeatureCache& features) {
  const std::string label = "exits/l_m=" + std::to_string(exit_cfg.l_m) + "/M=" + std::to_string(exit_cfg.M);
  const std::uint64_t seed = derive_seed(config.seed, label);
  TrainedBundle tb;
  tb.bundle = ExitBundle::create(backbone.config(), exit_cfg, derive_seed(seed, "init"));
  if (config.warmup_epochs > 0) {
    TrainConfig w = config.warmup_train();
    w.seed = derive_seed(seed, "warmup");
    warmup_train_ims(tb.bundle, features, w);
  }
  if (config.exit_iterations > 0) {
    TrainConfig a = config.alternate_train();
    a.seed = derive_seed(seed, "alternate");
    const CostModel cost = config.cost_model(backbone.config(), tb.bundle.layers());
    tb.log = alternate_train(tb.bundle, features, cost, a, config.exit_iterations);
  }
  return tb;
}

CommandResult gen_data(const RunContext& ctx) {
  const DatasetSplit d = make_datasets(ctx.config);
  const fs::path root = ctx.out / "data";
  fs::remove_all(root);
  write_pixmap_dir(root / "train", d.train);
  write_pixmap_dir(root / "test", d.test);
  std::ostringstream idx;
  idx << "id,label,split\n";
  for (const auto& it : d.train.items) idx << it.id << ',' << it.label << ",train\n";
  for (const auto& it : d.test.items) idx << it.id << ',' << it.label << ",test\n";
  write_file_atomic(root / "index.csv", idx.str());
  log_line("gen-data", std::to_string(d.train.size()) + " train / " + std::to_string(d.test.size()) +
                           " test images in " + root.string());
  return {{}, {root / "train", root / "test", root / "index.csv"}};
}

CommandResult train_teacher_cmd(const RunContext& ctx) {
  const DatasetSplit d = make_datasets(ctx.config);
  const TrainResult r = train_teacher(d.train, ctx.config.teacher_config(), ctx.config.teacher_train(), &d.test);
  const fs::path model = ctx.out / "teacher.fxt";
  const fs::path log = ctx.out / "teacher_log.csv";
  save_model(model, r.model);
  write_file_atomic(log, training_log_csv(r.log));
  log_line("train-teacher", "test accuracy " + fmt(accuracy(r.model, d.test)) + ", params " +
                                std::to_string(param_count(r.model)));
  return {{}, {model, sidecar_path(model), log}};
}

CommandResult distill_cmd(const RunContext& ctx) {
  const fs::path teacher_path = ctx.out / "teacher.fxt";
  require_input(teacher_path, "train-teacher");
  const GfnetModel teacher = load_model(teacher_path);
  if (!(teacher.config() == ctx.config.teacher_config()))
    throw ConfigError("teacher.fxt was trained with a different configuration");
  const DatasetSplit d = make_datasets(ctx.config);
  const TrainResult r =
      distill_student(teacher, d.train, ctx.config.student_config(), ctx.config.student_train(), &d.test);
  const fs::path model = ctx.out / "student.fxt";
  const fs::path log = ctx.out / "student_log.csv";
  save_model(model, r.model);
  write_file_atomic(log, training_log_csv(r.log));
  log_line("distill", "test accuracy " + fmt(accuracy(r.model, d.test)) + ", params " +
                          std::to_string(param_count(r.model)) + " (teacher " +
                          std::to_string(param_count(teacher)) + ")");
  return {{teacher_path}, {model, sidecar_path(model), log}};
}

namespace {

GfnetModel load_student(const RunContext& ctx, const fs::path& path) {
  require_input(path, "distill");
  GfnetModel m = load_model(path);
  if (!(m.config() == ctx.config.student_config()))
    throw ConfigError("student.fxt was trained with a different configuration");
  return m;
}

LoadedBundle load_exits(const fs::path& path) {
  require_input(path, "train-exits");
  return load_bundle(path);
}

}  // namespace

CommandResult train_exits_cmd(const RunContext& ctx) {
  const fs::path student_path = ctx.out / "student.fxt";
  const GfnetModel student = load_student(ctx, student_path);
  const DatasetSplit d = make_datasets(ctx.config);
  const FeatureCache fc = extract_features(student, d.train);
  const TrainedBundle sparse = train_bundle(ctx.config, student, ctx.config.exit_config(), fc);
  const TrainedBundle dense = train_bundle(ctx.config, student, per_layer_config(ctx.config.exit_config()), fc);
  const fs::path sparse_path = ctx.out / "exits.fxt";
  const fs::path dense_path = ctx.out / "exits_per_layer.fxt";
  const fs::path log = ctx.out / "exits_log.csv";
  save_bundle(sparse_path, student, sparse.bundle);
  save_bundle(dense_path, student, dense.bundle);
  write_file_atomic(log, alternate_log_csv({{"sparse", &sparse}, {"per_layer", &dense}}));
  log_line("train-exits", "exit points {" + join(sparse.bundle.layers(), ',') + "}, per-layer " +
                              std::to_string(dense.bundle.branches.size()) + " branches");
  return {{student_path},
          {sparse_path, sidecar_path(sparse_path), dense_path, sidecar_path(dense_path), log}};
}

CommandResult eval_cmd(const RunContext& ctx) {
  const PipelineConfig& cfg = ctx.config;
  const fs::path sparse_path = ctx.out / "exits.fxt";
  const fs::path dense_path = ctx.out / "exits_per_layer.fxt";
  const LoadedBundle sparse = load_exits(sparse_path);
  const LoadedBundle dense = load_exits(dense_path);
  if (!(sparse.model.config() == cfg.student_config()))
    throw ConfigError("exits.fxt was trained with a different configuration");
  const DatasetSplit d = make_datasets(cfg);

  const Evaluated ev = run_eval(cfg, sparse.model, &sparse.bundle, d.test, ctx.threads);
  const Evaluated base = run_eval(cfg, sparse.model, nullptr, d.test, ctx.threads);
  const Evaluated per_layer = run_eval(cfg, dense.model, &dense.bundle, d.test, ctx.threads);

  CommandResult res{{sparse_path, dense_path}, {}};
  const fs::path stats_path = ctx.out / "exit_stats.csv";
  const fs::path svg_path = ctx.out / "exit_stats.svg";
  write_file_atomic(stats_path, stats_csv(ev.stats));
  write_file_atomic(svg_path, stats_svg(ev.stats, "Exit rate and exit accuracy, tau = " + fmt(cfg.tau)));
  res.outputs.insert(res.outputs.end(), {stats_path, svg_path});

  std::ostringstream sweep;
  sweep << std::setprecision(17);
  sweep << "tau,accuracy,mean_flops,mean_ic,mean_energy,early_exit_rate\n";
  for (int i = 0; i <= 10; ++i) {
    const double tau = i / 10.0;
    const Evaluated t = run_eval(cfg, sparse.model, &sparse.bundle, d.test, ctx.threads, tau);
    const std::uint64_t final_count = t.stats.exits.back().count;
    const std::string label = i == 10 ? "1.0" : "0." + std::to_string(i);
    sweep << label << ',' << t.stats.overall_accuracy().value() << ',' << t.stats.mean_flops() << ','
          << t.stats.mean_ic() << ',' << t.energy << ','
          << static_cast<double>(t.stats.samples - final_count) / static_cast<double>(t.stats.samples) << '\n';
  }
  const fs::path sweep_path = ctx.out / "tau_sweep.csv";
  write_file_atomic(sweep_path, sweep.str());
  res.outputs.push_back(sweep_path);

  json summary;
  summary["samples"] = ev.stats.samples;
  summary["tau"] = cfg.tau;
  summary["exit_points"] = sparse.bundle.layers();
  summary["accuracy"] = ev.stats.overall_accuracy().value();
  summary["backbone_accuracy"] = base.stats.overall_accuracy().value();
  summary["accuracy_drop_points"] =
      100.0 * (base.stats.overall_accuracy().value() - ev.stats.overall_accuracy().value());
  summary["mean_flops"] = ev.stats.mean_flops();
  summary["mean_ic"] = ev.stats.mean_ic();
  summary["mean_energy"] = ev.energy;
  summary["backbone_mean_flops"] = base.stats.mean_flops();
  summary["per_layer_accuracy"] = per_layer.stats.overall_accuracy().value();
  summary["per_layer_mean_flops"] = per_layer.stats.mean_flops();
  summary["per_layer_mean_energy"] = per_layer.energy;
  summary["modeled_p50"] = ev.stats.modeled_p50();
  summary["modeled_p95"] = ev.stats.modeled_p95();

  if (!cfg.sweep_l_m.empty()) {
    const FeatureCache fc = extract_features(sparse.model, d.train);
    const Evaluated base_train = run_eval(cfg, sparse.model, nullptr, d.train, ctx.threads);
    std::vector<double> train_energy, train_acc;
    std::vector<Evaluated> tests;
    std::vector<std::vector<std::size_t>> points;
    for (std::size_t l : cfg.sweep_l_m) {
      ExitConfig ec = cfg.exit_config();
      ec.l_m = l;
      const TrainedBundle tb = train_bundle(cfg, sparse.model, ec, fc);
      const Evaluated tr = run_eval(cfg, sparse.model, &tb.bundle, d.train, ctx.threads);
      train_energy.push_back(tr.energy);
      train_acc.push_back(tr.stats.overall_accuracy().value());
      tests.push_back(run_eval(cfg, sparse.model, &tb.bundle, d.test, ctx.threads));
      points.push_back(tb.bundle.layers());
    }
    const std::size_t chosen = choose_start(train_energy, train_acc, base_train.stats.overall_accuracy().value(),
                                            cfg.sweep_accuracy_tolerance);
    std::ostringstream os;
    os << std::setprecision(17);
    os << "l_m,exit_points,train_accuracy,train_energy,test_accuracy,test_mean_flops,test_mean_ic,test_energy,"
          "chosen\n";
    for (std::size_t i = 0; i < cfg.sweep_l_m.size(); ++i) {
      os << cfg.sweep_l_m[i] << ',' << join(points[i], ';') << ',' << train_acc[i] << ',' << train_energy[i]
         << ',' << tests[i].stats.overall_accuracy().value() << ',' << tests[i].stats.mean_flops() << ','
         << tests[i].stats.mean_ic() << ',' << tests[i].energy << ',' << (i == chosen ? 1 : 0) << '\n';
    }
    const fs::path lm_path = ctx.out / "lm_sweep.csv";
    write_file_atomic(lm_path, os.str());
    res.outputs.push_back(lm_path);
    summary["chosen_l_m"] = cfg.sweep_l_m[chosen];
  }

  const fs::path summary_path = ctx.out / "eval_summary.json";
  write_file_atomic(summary_path, summary.dump(2) + "\n");
  res.outputs.push_back(summary_path);
  log_line("eval", "accuracy " + fmt(ev.stats.overall_accuracy().value()) + " (backbone " +
                       fmt(base.stats.overall_accuracy().value()) + "), mean IC " + fmt(ev.stats.mean_ic()));
  return res;
}

CommandResult bench_cmd(const RunContext& ctx) {
  const fs::path sparse_path = ctx.out / "exits.fxt";
  const fs::path dense_path = ctx.out / "exits_per_layer.fxt";
  const LoadedBundle sparse = load_exits(sparse_path);
  const LoadedBundle dense = load_exits(dense_path);
  const DatasetSplit d = make_datasets(ctx.config);
  Dataset data = d.test;
  if (ctx.config.bench_samples > 0 && ctx.config.bench_samples < data.size())
    data.items.resize(ctx.config.bench_samples);
  const auto rows = benchmark(sparse.model, dense.bundle, sparse.bundle, data, ctx.config.bench_repeats);
  const fs::path csv = ctx.out / "bench.csv";
  write_file_atomic(csv, benchmark_csv(rows));
  for (const auto& r : rows)
    log_line("bench", r.placement_mode + ": p50 " + fmt(r.p50 * 1e3) + " ms, p95 " + fmt(r.p95 * 1e3) +
                          " ms, mean flops " + fmt(r.mean_flops));
  return {{sparse_path, dense_path}, {csv}};
}

CommandResult ablate_cmd(const RunContext& ctx) {
  const PipelineConfig& cfg = ctx.config;
  const fs::path teacher_path = ctx.out / "teacher.fxt";
  const fs::path student_path = ctx.out / "student.fxt";
  require_input(teacher_path, "train-teacher");
  const GfnetModel teacher = load_model(teacher_path);
  const GfnetModel student = load_student(ctx, student_path);
  const DatasetSplit d = make_datasets(cfg);

  struct Row {
    bool distill;
    bool exits;
    Evaluated ev;
    std::size_t params;
  };
  std::vector<Row> rows;
  for (bool distilled : {false, true}) {
    const GfnetModel& model = distilled ? student : teacher;
    rows.push_back({distilled, false, run_eval(cfg, model, nullptr, d.test, ctx.threads), param_count(model)});
    const FeatureCache fc = extract_features(model, d.train);
    const TrainedBundle tb = train_bundle(cfg, model, cfg.exit_config(), fc);
    rows.push_back({distilled, true, run_eval(cfg, model, &tb.bundle, d.test, ctx.threads),
                    param_count(model) + bundle_params(tb.bundle)});
  }
  const double baseline = rows.front().ev.energy;
  std::ostringstream os;
  os << std::setprecision(17);
  os << "distill,exits,accuracy,params,mean_flops,energy_proxy,improve_pct\n";
  for (const auto& r : rows) {
    os << (r.distill ? "on" : "off") << ',' << (r.exits ? "on" : "off") << ','
       << r.ev.stats.overall_accuracy().value() << ',' << r.params << ',' << r.ev.stats.mean_flops() << ','
       << r.ev.energy << ',' << improvement_pct(baseline, r.ev.energy) << '\n';
    log_line("ablate", std::string("distill ") + (r.distill ? "on" : "off") + ", exits " +
                           (r.exits ? "on" : "off") + ": accuracy " +
                           fmt(r.ev.stats.overall_accuracy().value()) + ", improve " +
                           fmt(improvement_pct(baseline, r.ev.energy)) + "%");
  }
  const fs::path csv = ctx.out / "ablation.csv";
  write_file_atomic(csv, os.str());
  return {{teacher_path, student_path}, {csv}};
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"gen-data", "train-teacher", "distill", "train-exits",
                                                 "eval",     "bench",         "ablate"};
  return names;
}

CommandResult run_command(const std::string& command, const RunContext& ctx) {
  static const std::map<std::string, std::function<CommandResult(const RunContext&)>> table = {
      {"gen-data", gen_data}, {"train-teacher", train_teacher_cmd}, {"distill", distill_cmd},
      {"train-exits", train_exits_cmd}, {"eval", eval_cmd}, {"bench", bench_cmd}, {"ablate", ablate_cmd},
  };
  const auto it = table.find(command);
  if (it == table.end()) throw ConfigError("unknown command '" + command + "'");
  fs::create_directories(ctx.out);
  const auto t0 = std::chrono::steady_clock::now();
  CommandResult res = it->second(ctx);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  auto describe = [](const std::vector<fs::path>& paths) {
    json arr = json::array();
    for (const auto& p : paths) arr.push_back({{"path", p.generic_string()}, {"fnv1a64", hex64(hash_path(p))}});
    return arr;
  };
  json m;
  m["command"] = command;
  m["tool_version"] = kToolVersion;
  m["config_path"] = ctx.config_path.generic_string();
  m["config"] = json::parse(config_json(ctx.config));
  m["seed"] = ctx.config.seed;
  m["threads"] = ctx.threads;
  m["inputs"] = describe(res.inputs);
  m["outputs"] = describe(res.outputs);
  m["wall_time_s"] = wall;
  write_file_atomic(ctx.out / (command + ".manifest.json"), m.dump(2) + "\n");
  return res;
}

}  // namespace freqexit::cli
