#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freqexit/autodiff.hpp"
#include "freqexit/serialize.hpp"
#include "freqexit/spectral.hpp"

namespace freqexit {

/// Input images always carry three channels; single-channel sources are
/// replicated on load.
inline constexpr std::size_t kImageChannels = 3;

struct GfnetConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t depth = 12;  // number of spectral blocks
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  bool dual_head = false;

  /// Throws ConfigError on inconsistent extents.
  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * kImageChannels; }
  std::size_t hidden_dim() const { return mlp_ratio * embed_dim; }

  bool operator==(const GfnetConfig&) const = default;
};

/// Desk-scale defaults: teacher is twice as wide as the student at equal depth.
GfnetConfig default_teacher_config();
GfnetConfig default_student_config();

/// Fully connected layer y = x W + b with W stored as [in, out].
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, double stddev, Rng& rng);
  Var forward(Tape& t, Var x) const;
  std::size_t in() const { return weight.value.extent(0); }
  std::size_t out() const { return weight.value.extent(1); }
};

struct LayerNorm {
  Parameter gamma;
  Parameter beta;
  double eps = 1e-6;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d);
  Var forward(Tape& t, Var x) const;
};

struct SpectralBlock {
  LayerNorm norm1;
  GlobalFilter filter;
  LayerNorm norm2;
  Linear fc1;
  Linear fc2;
};

/// Hidden states after each block, each shaped [H, W, D]. `embedding` is the
/// patch-embedding output (the state before block 0).
struct BlockTrace {
  TensorR embedding;
  std::vector<TensorR> hidden;

  /// State after `layer` blocks: 0 is the embedding, depth the last block.
  const TensorR& layer(std::size_t layer) const {
    return layer == 0 ? embedding : hidden.at(layer - 1);
  }
};

struct Logits {
  TensorR cls;                  // [K]
  std::optional<TensorR> dist;  // [K], present iff the model has a second head
};

/// Patch embedding, `depth` spectral blocks, final norm, pooled head(s).
///
/// Every block computes
///   inner = x + GF(norm1(x))
///   out   = x + FF(norm2(inner)),  FF = fc2(gelu(fc1(.)))
/// so a zero feed-forward makes the block an identity map.
class GfnetModel {
 public:
  GfnetModel() = default;
  /// Seeded random initialisation.
  GfnetModel(const GfnetConfig& config, std::uint64_t seed);

  const GfnetConfig& config() const { return config_; }

  /// Patch tokens [batch*S, D] for images given as [image_size, image_size, 3].
  Var embed(Tape& t, std::span<const TensorR* const> images) const;
  Var block(Tape& t, std::size_t index, Var x, std::size_t batch) const;
  /// Final norm followed by mean over each sample's tokens: [batch, D].
  Var pool(Tape& t, Var x, std::size_t batch) const;
  Var head_cls(Tape& t, Var pooled) const;
  Var head_dist(Tape& t, Var pooled) const;

  std::vector<SpectralBlock>& blocks() { return blocks_; }
  const std::vector<SpectralBlock>& blocks() const { return blocks_; }
  Linear& patch_embed() { return patch_embed_; }
  Linear& cls_head() { return head_cls_; }
  std::optional<Linear>& dist_head() { return head_dist_; }
  const LayerNorm& final_norm() const { return norm_; }

  /// Visits every real parameter with its container name.
  void for_each_parameter(const std::function<void(const std::string&, Parameter&)>& fn);
  void for_each_parameter(
      const std::function<void(const std::string&, const Parameter&)>& fn) const;

  void zero_grads();
  void set_trainable(bool trainable);
  /// SGD update p -= lr * (grad + weight_decay * p) on every trainable tensor,
  /// then re-projects self-conjugate filter bins.
  void sgd_step(double lr, double weight_decay);

  std::vector<TensorEntry> to_entries() const;
  static GfnetModel from_entries(const GfnetConfig& config,
                                 const std::vector<TensorEntry>& entries);

  bool operator==(const GfnetModel& other) const;

 private:
  GfnetConfig config_;
  Linear patch_embed_;
  std::vector<SpectralBlock> blocks_;
  LayerNorm norm_;
  Linear head_cls_;
  std::optional<Linear> head_dist_;
};

/// Rearranges images into row-major patch vectors: [batch*S, patch_dim].
TensorR patchify(const GfnetConfig& config, std::span<const TensorR* const> images);

BlockTrace forward_trace(const GfnetModel& model, const TensorR& image);
Logits classify(const GfnetModel& model, const TensorR& image);
/// Batched inference; equal to per-image classify up to GEMM rounding.
std::vector<Logits> classify_batch(const GfnetModel& model,
                                   std::span<const TensorR* const> images);
/// Logits of the head(s) given one final hidden state [S, D] or [H, W, D].
Logits head_logits(const GfnetModel& model, const TensorR& hidden);
/// Final-norm + mean-pooled feature vector [D] of a hidden state.
TensorR pooled_features(const GfnetModel& model, const TensorR& hidden);

/// Averaged class probabilities of both heads (or the single head's softmax).
std::vector<double> fused_probabilities(const Logits& logits);
/// argmax of fused_probabilities, lowest index on ties.
int fused_prediction(const Logits& logits);

/// Real degrees of freedom; a complex weight counts twice.
std::size_t param_count(const GfnetModel& model);
std::size_t param_count(const GfnetConfig& config);

/// Per-primitive FLOP conventions used by every cost figure in the library.
namespace flops {
std::uint64_t linear(std::uint64_t rows, std::uint64_t in, std::uint64_t out);
std::uint64_t layernorm(std::uint64_t rows, std::uint64_t dim);
std::uint64_t gelu(std::uint64_t n);
/// 5 S log2(S) per channel (log rounded up for non powers of two).
std::uint64_t fft2(std::uint64_t tokens, std::uint64_t channels);
std::uint64_t filter_multiply(std::uint64_t tokens, std::uint64_t channels);
std::uint64_t softmax(std::uint64_t k);

std::uint64_t patch_embed(const GfnetConfig& c);
std::uint64_t block(const GfnetConfig& c);
/// Final norm, pooling and the head(s), including the fused softmax when dual.
std::uint64_t head(const GfnetConfig& c);
}  // namespace flops

/// Patch embedding plus the first `through_block` blocks. Throws IndexError
/// when `through_block > depth`.
std::uint64_t flops_forward(const GfnetConfig& config, std::size_t through_block);
/// flops_forward(config, depth) + flops::head(config).
std::uint64_t flops_full(const GfnetConfig& config);

/// Sidecar JSON holding GfnetConfig (plus optional extra objects).
std::string config_to_json(const GfnetConfig& config);
GfnetConfig config_from_json(const std::string& text);

std::filesystem::path sidecar_path(const std::filesystem::path& container);
void save_model(const std::filesystem::path& container, const GfnetModel& model);
GfnetModel load_model(const std::filesystem::path& container);

}  // namespace freqexit
