#pragma once

#include <cstdint>
#include <vector>

#include "freqexit/gfnet.hpp"

namespace freqexit {

enum class Executor { main, auxiliary };

/// FLOP counts of every component on the adaptive path plus the executor each
/// runs on. Layer b denotes the state after b blocks (0 is the patch embedding).
struct CostModel {
  std::uint64_t embed_flops = 0;
  std::vector<std::uint64_t> block_flops;  // one per block
  std::uint64_t head_flops = 0;            // final norm, pool, head(s), fusion
  std::uint64_t im_flops = 0;              // per branch: norm + pool + linear
  std::uint64_t gate_flops = 0;            // per branch: statistics + logistic
  std::vector<std::size_t> exit_points;    // B, ascending

  Executor backbone_executor = Executor::main;
  Executor branch_executor = Executor::main;
  /// Modeled FLOPs per second of each executor.
  double main_throughput = 1e9;
  double aux_throughput = 1e9;

  /// Throws ConfigError when a count or throughput is not positive.
  void validate() const;

  std::size_t depth() const { return block_flops.size(); }
  std::uint64_t branch_flops() const { return im_flops + gate_flops; }
  /// Embedding plus the first `layer` blocks.
  std::uint64_t backbone_through(std::size_t layer) const;
  /// Backbone through `depth` plus the head; the IC denominator.
  std::uint64_t full_path_flops() const;
  /// Branches located at or before `layer`.
  std::size_t branches_through(std::size_t layer) const;
  /// Work spent by a sample leaving at branch `layer`.
  std::uint64_t spent_exit(std::size_t layer) const;
  /// Work spent by a sample that falls through every branch to the head.
  std::uint64_t spent_final() const;
  double throughput(Executor e) const;
};

namespace flops {
/// Final norm + mean pool of one hidden state and the linear IM.
std::uint64_t branch_im(const GfnetConfig& c);
/// Two softmaxes (plain and tempered), two entropies, top-2 search, the
/// 4-feature logistic gate.
std::uint64_t branch_gate(std::size_t num_classes);
}  // namespace flops

CostModel make_cost_model(const GfnetConfig& config, const std::vector<std::size_t>& exit_points);

}  // namespace freqexit
