#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "freqexit/errors.hpp"
#include "pipeline.hpp"

namespace fe = freqexit;
namespace fc = freqexit::cli;

namespace {

const char* kDescriptions[][2] = {
    {"gen-data", "Write the seeded train/test split as pixmap directories"},
    {"train-teacher", "Train the wide single-head teacher"},
    {"distill", "Hard-label distillation of the dual-head student"},
    {"train-exits", "Warm-up and alternating training of sparse and per-layer exit branches"},
    {"eval", "Exit statistics, threshold sweep and optional start-layer sweep"},
    {"bench", "Wall-clock latency of backbone-only, per-layer and sparse placement"},
    {"ablate", "Distillation x early-exit grid with energy-proxy improvements"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-domain classifier training and adaptive early-exit inference"};
  app.name("freqexit");
  app.set_version_flag("--version", fc::kToolVersion);
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  app.add_option("-c,--config", config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
  app.add_option("-o,--out", out_dir, "Artifact directory")->capture_default_str();
  app.add_option("--seed", seed, "Override the configured root seed");
  app.add_option("--threads", threads, "Evaluation worker threads")
      ->envname("FREQEXIT_THREADS")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  for (const auto& [name, text] : kDescriptions) app.add_subcommand(name, text)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "freqexit: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  fc::RunContext ctx;
  try {
    ctx.config = fc::load_config(config_path);
    if (seed) ctx.config.seed = *seed;
  } catch (const fe::Error& e) {
    std::cerr << "freqexit: " << e.what() << '\n';
    return 2;
  }
  ctx.config_path = config_path;
  ctx.out = out_dir;
  ctx.threads = threads;

  try {
    fc::run_command(command, ctx);
  } catch (const std::exception& e) {
    std::cerr << "freqexit " << command << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
