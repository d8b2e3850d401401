#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "freqexit/cost_model.hpp"
#include "freqexit/data.hpp"
#include "freqexit/distill.hpp"
#include "freqexit/gfnet.hpp"

namespace freqexit {

struct ExitConfig {
  std::size_t l_m = 4;
  std::size_t M = 2;
  double tau = 0.5;
  double lambda = 0.1;
  double temperature = 2.0;

  /// `layers` is L, the backbone's depth plus one.
  void validate(std::size_t layers) const;
  bool operator==(const ExitConfig&) const = default;
};

/// { b : l_m <= b < L, (b - l_m) mod M == 0 }, ascending. Throws ConfigError
/// when the set would be empty (l_m >= L) or M is zero.
std::vector<std::size_t> exit_points(std::size_t l_m, std::size_t M, std::size_t L);

struct GateFeatures {
  double max_prob = 0.0;
  double neg_entropy = 0.0;         // sum_k p log p
  double neg_entropy_scaled = 0.0;  // same over softmax(z / T)
  double margin = 0.0;              // top-1 minus top-2 probability

  std::array<double, 4> values() const { return {max_prob, neg_entropy, neg_entropy_scaled, margin}; }
};

GateFeatures gate_features(std::span<const double> logits, double temperature);

struct ExitBranch {
  std::size_t layer = 0;
  Linear im;         // [D -> K]
  Parameter gate_w;  // [4]
  Parameter gate_b;  // [1]
};

struct GateDecision {
  bool exit = false;
  double g = 0.0;  // sigmoid of the gate score
};

double gate_score(const GateFeatures& f, const ExitBranch& branch);
/// Exits iff sigmoid(score) >= tau, evaluated as score >= logit(tau) so that
/// tau = 0 always and tau = 1 never fires for a finite score.
GateDecision gate_decision(const GateFeatures& f, const ExitBranch& branch, double tau);

struct ExitBundle {
  ExitConfig config;
  std::vector<ExitBranch> branches;  // ordered by layer

  /// Fresh branches for every exit point of `config` over `model`: IM weights
  /// drawn from N(0, 0.02^2), gates zero.
  static ExitBundle create(const GfnetConfig& model, const ExitConfig& config, std::uint64_t seed);
  std::vector<std::size_t> layers() const;
  bool operator==(const ExitBundle& other) const;
};

/// IC of a sample leaving at branch `layer` (branches on the way included).
double inference_cost(std::size_t layer, const CostModel& cost);
/// IC of a sample reaching the backbone head after every branch.
double inference_cost_final(const CostModel& cost);

double joint_loss(double cross_entropy, double lambda, double ic);
double joint_loss(std::span<const double> logits, int y, double lambda, double ic);

/// Best-future targets: entry i is 1 iff joint[i] <= min(joint[j]) over every
/// later j, where the last entry of `joint` is the backbone head. Returns one
/// target per branch (joint.size() - 1 values).
std::vector<std::uint8_t> gate_targets(std::span<const double> joint);

/// Pooled final-norm features of every sample at every layer 0..depth, plus
/// the backbone head's fused probabilities. The backbone is only read.
struct FeatureCache {
  std::size_t samples = 0;
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<TensorR> pooled;       // per layer: [samples, D]
  TensorR head_probs;                // [samples, K]
  std::vector<int> labels;

  std::span<const double> row(std::size_t layer, std::size_t sample) const;
};

FeatureCache extract_features(const GfnetModel& backbone, const Dataset& data, std::size_t batch = 64);

/// IM logits [K] for one pooled feature row.
std::vector<double> im_logits(const ExitBranch& branch, std::span<const double> pooled);

struct GateLoss {
  double loss = 0.0;
  std::array<double, 4> grad_w{};
  double grad_b = 0.0;
};

/// Mean binary cross-entropy of sigmoid(gate score) against 0/1 `targets`,
/// with its gradient w.r.t. the gate weights and bias.
GateLoss gate_bce(const ExitBranch& branch, std::span<const GateFeatures> feats,
                  std::span<const std::uint8_t> targets);

/// CE training of every IM over all samples for `tc.epochs` epochs.
void warmup_train_ims(ExitBundle& bundle, const FeatureCache& features, const TrainConfig& tc);
/// Convenience overload that extracts features from a frozen backbone.
void warmup_train_ims(const GfnetModel& backbone, ExitBundle& bundle, const Dataset& data,
                      const TrainConfig& tc);

struct AlternateLog {
  std::size_t iteration = 0;
  std::vector<std::size_t> routed;  // samples per branch, then the head
  double mean_joint_loss = 0.0;     // of the routed exits
  double mean_ic = 0.0;
};

/// Alternating IM / gate optimisation: each iteration routes samples by the
/// current gates, takes one minibatch epoch of CE on each IM's routed samples,
/// then one minibatch epoch of BCE on every gate against best-future targets.
std::vector<AlternateLog> alternate_train(ExitBundle& bundle, const FeatureCache& features,
                                          const CostModel& cost, const TrainConfig& tc,
                                          std::size_t iterations);
std::vector<AlternateLog> alternate_train(const GfnetModel& backbone, ExitBundle& bundle,
                                          const Dataset& data, const TrainConfig& tc,
                                          std::size_t iterations);

/// Branch tensors named exit.<b>.im.weight / .bias and exit.<b>.gm.weight / .bias.
std::vector<TensorEntry> bundle_entries(const ExitBundle& bundle);
ExitBundle bundle_from_entries(const GfnetConfig& model, const ExitConfig& config,
                               const std::vector<TensorEntry>& entries);

/// Backbone and branches in one container; the sidecar gains an "exit" object.
void save_bundle(const std::filesystem::path& container, const GfnetModel& model,
                 const ExitBundle& bundle);
struct LoadedBundle {
  GfnetModel model;
  ExitBundle bundle;
};
LoadedBundle load_bundle(const std::filesystem::path& container);

}  // namespace freqexit
