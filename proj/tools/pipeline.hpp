#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "freqexit/cost_model.hpp"
#include "freqexit/data.hpp"
#include "freqexit/distill.hpp"
#include "freqexit/earlyexit.hpp"
#include "freqexit/gfnet.hpp"
#include "freqexit/runtime.hpp"

namespace freqexit::cli {

inline constexpr const char* kToolVersion = "0.3.0";

/// Flat run configuration; every key of the JSON file maps to one field.
struct PipelineConfig {
  std::uint64_t seed = 2024;
  std::string data_dir;  // empty: synthetic data regenerated from the seed
  std::size_t n_per_class = 200;
  std::size_t num_classes = 10;
  std::size_t image_size = 32;
  double train_fraction = 0.8;

  std::size_t patch_size = 4;
  std::size_t depth = 12;
  std::size_t mlp_ratio = 4;
  std::size_t teacher_embed_dim = 64;
  std::size_t student_embed_dim = 32;

  double learning_rate = 0.01;
  std::size_t teacher_epochs = 60;
  std::size_t student_epochs = 60;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  double momentum = 0.0;

  std::size_t l_m = 4;
  std::size_t M = 2;
  double tau = 0.5;
  double lambda = 0.1;
  double temperature = 2.0;
  std::size_t warmup_epochs = 20;
  std::size_t exit_iterations = 200;
  double exit_learning_rate = 0.05;
  std::size_t exit_batch_size = 32;

  std::string latency_mode = "sequential";  // or "overlapped"
  std::string branch_executor = "main";     // or "auxiliary"
  double main_throughput = 1e9;
  double aux_throughput = 1e9;

  std::size_t bench_repeats = 3;
  std::size_t bench_samples = 100;  // 0: the whole test split
  std::vector<std::size_t> sweep_l_m;
  double sweep_accuracy_tolerance = 0.015;

  /// Throws ConfigError on out-of-domain values.
  void validate() const;

  GfnetConfig teacher_config() const;
  GfnetConfig student_config() const;
  ExitConfig exit_config() const;
  TrainConfig teacher_train() const;
  TrainConfig student_train() const;
  TrainConfig warmup_train() const;
  TrainConfig alternate_train() const;
  LatencyMode mode() const;
  CostModel cost_model(const GfnetConfig& model, const std::vector<std::size_t>& points) const;
};

/// Parses the flat JSON object; unknown keys and mistyped values throw
/// ConfigError.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_json(const PipelineConfig& config);

/// Synthetic (or pixmap-directory) dataset split into train and test.
DatasetSplit make_datasets(const PipelineConfig& config);

struct RunContext {
  PipelineConfig config;
  std::filesystem::path config_path;
  std::filesystem::path out;
  std::size_t threads = 1;
};

struct CommandResult {
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
};

const std::vector<std::string>& command_names();
/// Runs one pipeline stage and writes <command>.manifest.json beside its
/// artifacts. Throws Error subclasses on pipeline failures.
CommandResult run_command(const std::string& command, const RunContext& ctx);

CommandResult gen_data(const RunContext& ctx);
CommandResult train_teacher_cmd(const RunContext& ctx);
CommandResult distill_cmd(const RunContext& ctx);
CommandResult train_exits_cmd(const RunContext& ctx);
CommandResult eval_cmd(const RunContext& ctx);
CommandResult bench_cmd(const RunContext& ctx);
CommandResult ablate_cmd(const RunContext& ctx);

struct TrainedBundle {
  ExitBundle bundle;
  std::vector<AlternateLog> log;
};

/// Warm-up plus alternating training of the branches of `exit_cfg` over a
/// frozen backbone whose features are already cached. The seed is derived
/// from the placement, so equal placements train identical bundles.
TrainedBundle train_bundle(const PipelineConfig& config, const GfnetModel& backbone,
                           const ExitConfig& exit_cfg, const FeatureCache& features);

/// Mean energy proxy (FLOPs) per sample of `records`.
double mean_energy(const std::vector<ExitRecord>& records, const CostModel& cost, LatencyMode mode);

/// Index of the sweep entry with the lowest train energy among those whose
/// train accuracy is within `tolerance` of the backbone's; the lowest energy
/// overall when none qualifies.
std::size_t choose_start(const std::vector<double>& train_energy,
                         const std::vector<double>& train_accuracy, double backbone_accuracy,
                         double tolerance);

}  // namespace freqexit::cli
