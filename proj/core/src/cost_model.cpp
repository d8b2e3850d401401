#include "freqexit/cost_model.hpp"

#include <algorithm>

#include "freqexit/errors.hpp"

namespace freqexit {

void CostModel::validate() const {
  if (embed_flops == 0 || head_flops == 0 || im_flops == 0 || gate_flops == 0) {
    throw ConfigError("cost model component counts must be positive");
  }
  for (auto f : block_flops)
    if (f == 0) throw ConfigError("cost model block counts must be positive");
  if (!(main_throughput > 0.0) || !(aux_throughput > 0.0)) {
    throw ConfigError("executor throughput must be positive");
  }
  for (std::size_t b : exit_points)
    if (b > depth()) throw ConfigError("exit point beyond the last block");
}

std::uint64_t CostModel::backbone_through(std::size_t layer) const {
  if (layer > depth()) throw IndexError("layer " + std::to_string(layer) + " beyond depth");
  std::uint64_t f = embed_flops;
  for (std::size_t i = 0; i < layer; ++i) f += block_flops[i];
  return f;
}

std::uint64_t CostModel::full_path_flops() const { return backbone_through(depth()) + head_flops; }

std::size_t CostModel::branches_through(std::size_t layer) const {
  return static_cast<std::size_t>(
      std::upper_bound(exit_points.begin(), exit_points.end(), layer) - exit_points.begin());
}

std::uint64_t CostModel::spent_exit(std::size_t layer) const {
  return backbone_through(layer) + branches_through(layer) * branch_flops();
}

std::uint64_t CostModel::spent_final() const {
  return full_path_flops() + exit_points.size() * branch_flops();
}

double CostModel::throughput(Executor e) const {
  const double t = e == Executor::main ? main_throughput : aux_throughput;
  if (!(t > 0.0)) throw ConfigError("executor throughput must be positive");
  return t;
}

namespace flops {

std::uint64_t branch_im(const GfnetConfig& c) {
  return layernorm(c.tokens(), c.embed_dim) + c.tokens() * c.embed_dim +
         linear(1, c.embed_dim, c.num_classes);
}

std::uint64_t branch_gate(std::size_t k) {
  // softmax(z) + softmax(z / T) with the division, 2 flops per entropy term,
  // K comparisons for the top two, then 4 mul-adds, bias and a 4-flop sigmoid.
  return 2 * softmax(k) + k + 2 * 2 * k + 2 * k + 2 * 4 + 1 + 4;
}

}  // namespace flops

CostModel make_cost_model(const GfnetConfig& config, const std::vector<std::size_t>& exit_points) {
  config.validate();
  CostModel m;
  m.embed_flops = flops::patch_embed(config);
  m.block_flops.assign(config.depth, flops::block(config));
  m.head_flops = flops::head(config);
  m.im_flops = flops::branch_im(config);
  m.gate_flops = flops::branch_gate(config.num_classes);
  m.exit_points = exit_points;
  std::sort(m.exit_points.begin(), m.exit_points.end());
  m.validate();
  return m;
}

}  // namespace freqexit
