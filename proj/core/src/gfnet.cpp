#include "freqexit/gfnet.hpp"

#include <bit>
#include <cmath>
#include <json.hpp>
#include <map>
#include <utility>

#include "freqexit/rng.hpp"

namespace freqexit {

using nlohmann::json;

void GfnetConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " must be a positive multiple of patch_size " + std::to_string(patch_size));
  }
  if (depth < 1) throw ConfigError("depth must be at least 1");
  if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

GfnetConfig default_teacher_config() {
  GfnetConfig c;
  c.embed_dim = 64;
  c.dual_head = false;
  return c;
}

GfnetConfig default_student_config() {
  GfnetConfig c;
  c.embed_dim = 32;
  c.dual_head = true;
  return c;
}

// ---------------------------------------------------------------------------
// Layers

Linear::Linear(std::size_t in, std::size_t out, double stddev, Rng& rng)
    : weight(TensorR({in, out})), bias(TensorR({out})) {
  for (auto& v : weight.value.data()) v = stddev * rng.normal();
}

Var Linear::forward(Tape& t, Var x) const {
  return add_bias(t, matmul(t, x, t.param(weight)), t.param(bias));
}

LayerNorm::LayerNorm(std::size_t d) : gamma(TensorR({d}, 1.0)), beta(TensorR({d})) {}

Var LayerNorm::forward(Tape& t, Var x) const {
  return layernorm(t, x, t.param(gamma), t.param(beta), eps);
}

// ---------------------------------------------------------------------------
// Model

namespace {

constexpr double kFilterInitStd = 0.02;

double lecun(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

GfnetModel::GfnetModel(const GfnetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.embed_dim, g = config_.grid();
  patch_embed_ = Linear(config_.patch_dim(), d, lecun(config_.patch_dim()), rng);
  blocks_.reserve(config_.depth);
  for (std::size_t i = 0; i < config_.depth; ++i) {
    SpectralBlock b;
    b.norm1 = LayerNorm(d);
    b.filter = GlobalFilter::random(g, g, d, kFilterInitStd, rng);
    b.norm2 = LayerNorm(d);
    b.fc1 = Linear(d, config_.hidden_dim(), lecun(d), rng);
    b.fc2 = Linear(config_.hidden_dim(), d, lecun(config_.hidden_dim()) /
                                                std::sqrt(static_cast<double>(config_.depth)),
                   rng);
    blocks_.push_back(std::move(b));
  }
  norm_ = LayerNorm(d);
  head_cls_ = Linear(d, config_.num_classes, kFilterInitStd, rng);
  if (config_.dual_head) head_dist_ = Linear(d, config_.num_classes, kFilterInitStd, rng);
}

Var GfnetModel::embed(Tape& t, std::span<const TensorR* const> images) const {
  return patch_embed_.forward(t, t.constant(patchify(config_, images)));
}

Var GfnetModel::block(Tape& t, std::size_t index, Var x, std::size_t batch) const {
  const SpectralBlock& b = blocks_.at(index);
  Var inner = add(t, x, global_filter(t, b.norm1.forward(t, x), b.filter, batch));
  Var ff = b.fc2.forward(t, gelu(t, b.fc1.forward(t, b.norm2.forward(t, inner))));
  return add(t, x, ff);
}

Var GfnetModel::pool(Tape& t, Var x, std::size_t batch) const {
  return mean_rows(t, norm_.forward(t, x), batch);
}

Var GfnetModel::head_cls(Tape& t, Var pooled) const { return head_cls_.forward(t, pooled); }

Var GfnetModel::head_dist(Tape& t, Var pooled) const {
  if (!head_dist_) throw StateError("model has no distillation head");
  return head_dist_->forward(t, pooled);
}

void GfnetModel::for_each_parameter(
    const std::function<void(const std::string&, const Parameter&)>& fn) const {
  fn("patch_embed.weight", patch_embed_.weight);
  fn("patch_embed.bias", patch_embed_.bias);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    fn(p + "norm1.gamma", b.norm1.gamma);
    fn(p + "norm1.beta", b.norm1.beta);
    fn(p + "norm2.gamma", b.norm2.gamma);
    fn(p + "norm2.beta", b.norm2.beta);
    fn(p + "fc1.weight", b.fc1.weight);
    fn(p + "fc1.bias", b.fc1.bias);
    fn(p + "fc2.weight", b.fc2.weight);
    fn(p + "fc2.bias", b.fc2.bias);
  }
  fn("norm.gamma", norm_.gamma);
  fn("norm.beta", norm_.beta);
  fn("head.weight", head_cls_.weight);
  fn("head.bias", head_cls_.bias);
  if (head_dist_) {
    fn("head_dist.weight", head_dist_->weight);
    fn("head_dist.bias", head_dist_->bias);
  }
}

void GfnetModel::for_each_parameter(
    const std::function<void(const std::string&, Parameter&)>& fn) {
  std::as_const(*this).for_each_parameter(
      [&](const std::string& name, const Parameter& p) { fn(name, const_cast<Parameter&>(p)); });
}

void GfnetModel::zero_grads() {
  for_each_parameter([](const std::string&, Parameter& p) { p.zero_grad(); });
  for (auto& b : blocks_) b.filter.k_half.zero_grad();
}

void GfnetModel::set_trainable(bool trainable) {
  for_each_parameter([&](const std::string&, Parameter& p) { p.trainable = trainable; });
  for (auto& b : blocks_) b.filter.k_half.trainable = trainable;
}

void GfnetModel::sgd_step(double lr, double weight_decay) {
  for_each_parameter([&](const std::string&, Parameter& p) {
    if (!p.trainable || p.grad.shape() != p.value.shape()) return;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      p.value[i] -= lr * (p.grad[i] + weight_decay * p.value[i]);
    }
  });
  for (auto& b : blocks_) {
    auto& k = b.filter.k_half;
    if (!k.trainable || k.grad.shape() != k.value.shape()) continue;
    for (std::size_t i = 0; i < k.value.size(); ++i) {
      k.value[i] -= lr * (k.grad[i] + weight_decay * k.value[i]);
    }
    b.filter.project_self_conjugate();
  }
}

std::vector<TensorEntry> GfnetModel::to_entries() const {
  std::vector<TensorEntry> out;
  for_each_parameter([&](const std::string& name, const Parameter& p) {
    out.push_back({name, p.value});
  });
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    out.push_back({"blocks." + std::to_string(i) + ".filter", blocks_[i].filter.k_half.value});
  }
  return out;
}

GfnetModel GfnetModel::from_entries(const GfnetConfig& config,
                                    const std::vector<TensorEntry>& entries) {
  GfnetModel m(config, 0);
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto fetch = [&](const std::string& name) -> const TensorEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("model container lacks entry '" + name + "'");
    return *it->second;
  };
  m.for_each_parameter([&](const std::string& name, Parameter& p) {
    const auto* t = std::get_if<TensorR>(&fetch(name).tensor);
    if (t == nullptr || t->shape() != p.value.shape()) {
      throw ParseError("entry '" + name + "' has the wrong dtype or shape");
    }
    p.value = *t;
    p.zero_grad();
  });
  for (std::size_t i = 0; i < m.blocks_.size(); ++i) {
    const std::string name = "blocks." + std::to_string(i) + ".filter";
    const auto* t = std::get_if<TensorC>(&fetch(name).tensor);
    auto& k = m.blocks_[i].filter.k_half;
    if (t == nullptr || t->shape() != k.value.shape()) {
      throw ParseError("entry '" + name + "' has the wrong dtype or shape");
    }
    k.value = *t;
    k.zero_grad();
  }
  return m;
}

bool GfnetModel::operator==(const GfnetModel& other) const {
  return config_ == other.config_ && to_entries() == other.to_entries();
}

// ---------------------------------------------------------------------------
// Inference

TensorR patchify(const GfnetConfig& config, std::span<const TensorR* const> images) {
  const std::size_t n = config.image_size, p = config.patch_size, g = config.grid();
  const std::size_t c = kImageChannels, pd = config.patch_dim(), s = config.tokens();
  TensorR out({images.size() * s, pd});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const TensorR& img = *images[b];
    if (img.size() != n * n * c) {
      throw DimensionError("image " + shape_string(img.shape()) + " does not match [" +
                           std::to_string(n) + "x" + std::to_string(n) + "x3]");
    }
    for (std::size_t gi = 0; gi < g; ++gi)
      for (std::size_t gj = 0; gj < g; ++gj) {
        double* row = out.data().data() + (b * s + gi * g + gj) * pd;
        std::size_t k = 0;
        for (std::size_t pi = 0; pi < p; ++pi)
          for (std::size_t pj = 0; pj < p; ++pj)
            for (std::size_t ch = 0; ch < c; ++ch)
              row[k++] = img[((gi * p + pi) * n + gj * p + pj) * c + ch];
      }
  }
  return out;
}

namespace {

TensorR as_grid(const GfnetConfig& c, const TensorR& tokens) {
  return tokens.reshaped({c.grid(), c.grid(), c.embed_dim});
}

Logits logits_from_pooled(const GfnetModel& model, Tape& t, Var pooled) {
  Logits out;
  const TensorR& cls = t.value(model.head_cls(t, pooled));
  out.cls = cls.reshaped({cls.size()});
  if (model.config().dual_head) {
    const TensorR& dist = t.value(model.head_dist(t, pooled));
    out.dist = dist.reshaped({dist.size()});
  }
  return out;
}

}  // namespace

BlockTrace forward_trace(const GfnetModel& model, const TensorR& image) {
  Tape t(false);
  const TensorR* imgs[] = {&image};
  Var x = model.embed(t, imgs);
  BlockTrace trace;
  trace.embedding = as_grid(model.config(), t.value(x));
  for (std::size_t i = 0; i < model.config().depth; ++i) {
    x = model.block(t, i, x, 1);
    trace.hidden.push_back(as_grid(model.config(), t.value(x)));
  }
  return trace;
}

Logits head_logits(const GfnetModel& model, const TensorR& hidden) {
  const auto& c = model.config();
  Tape t(false);
  Var x = t.constant(hidden.reshaped({c.tokens(), c.embed_dim}));
  return logits_from_pooled(model, t, model.pool(t, x, 1));
}

TensorR pooled_features(const GfnetModel& model, const TensorR& hidden) {
  const auto& c = model.config();
  Tape t(false);
  Var x = t.constant(hidden.reshaped({c.tokens(), c.embed_dim}));
  return t.value(model.pool(t, x, 1)).reshaped({c.embed_dim});
}

Logits classify(const GfnetModel& model, const TensorR& image) {
  Tape t(false);
  const TensorR* imgs[] = {&image};
  Var x = model.embed(t, imgs);
  for (std::size_t i = 0; i < model.config().depth; ++i) x = model.block(t, i, x, 1);
  return logits_from_pooled(model, t, model.pool(t, x, 1));
}

std::vector<Logits> classify_batch(const GfnetModel& model,
                                   std::span<const TensorR* const> images) {
  std::vector<Logits> out;
  if (images.empty()) return out;
  Tape t(false);
  Var x = model.embed(t, images);
  for (std::size_t i = 0; i < model.config().depth; ++i) x = model.block(t, i, x, images.size());
  Var pooled = model.pool(t, x, images.size());
  const TensorR& cls = t.value(model.head_cls(t, pooled));
  const std::size_t k = model.config().num_classes;
  std::optional<TensorR> dist;
  if (model.config().dual_head) dist = t.value(model.head_dist(t, pooled));
  for (std::size_t b = 0; b < images.size(); ++b) {
    Logits l;
    l.cls = TensorR({k}, std::vector<double>(cls.data().begin() + static_cast<std::ptrdiff_t>(b * k),
                                             cls.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * k)));
    if (dist) {
      l.dist = TensorR({k}, std::vector<double>(dist->data().begin() + static_cast<std::ptrdiff_t>(b * k),
                                                dist->data().begin() + static_cast<std::ptrdiff_t>((b + 1) * k)));
    }
    out.push_back(std::move(l));
  }
  return out;
}

std::vector<double> fused_probabilities(const Logits& logits) {
  auto p = softmax(logits.cls.data());
  if (logits.dist) {
    const auto q = softmax(logits.dist->data());
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = 0.5 * (p[k] + q[k]);
  }
  return p;
}

int fused_prediction(const Logits& logits) { return argmax(fused_probabilities(logits)); }

// ---------------------------------------------------------------------------
// Size and cost

std::size_t param_count(const GfnetModel& model) {
  std::size_t n = 0;
  model.for_each_parameter([&](const std::string&, const Parameter& p) { n += p.value.size(); });
  for (const auto& b : model.blocks()) n += 2 * b.filter.k_half.value.size();
  return n;
}

std::size_t param_count(const GfnetConfig& c) {
  const std::size_t d = c.embed_dim, h = c.hidden_dim(), k = c.num_classes;
  const std::size_t filter = 2 * c.grid() * dft::half_width(c.grid()) * d;
  const std::size_t block = 4 * d + filter + (d * h + h) + (h * d + d);
  const std::size_t heads = (c.dual_head ? 2 : 1) * (d * k + k);
  return (c.patch_dim() * d + d) + c.depth * block + 2 * d + heads;
}

namespace flops {

std::uint64_t linear(std::uint64_t rows, std::uint64_t in, std::uint64_t out) {
  return 2 * rows * in * out + rows * out;
}
std::uint64_t layernorm(std::uint64_t rows, std::uint64_t dim) { return 8 * rows * dim; }
std::uint64_t gelu(std::uint64_t n) { return 8 * n; }
std::uint64_t fft2(std::uint64_t tokens, std::uint64_t channels) {
  const std::uint64_t log2s = tokens <= 1 ? 0 : std::bit_width(tokens - 1);
  return 5 * tokens * log2s * channels;
}
std::uint64_t filter_multiply(std::uint64_t tokens, std::uint64_t channels) {
  return 6 * tokens * channels;
}
std::uint64_t softmax(std::uint64_t k) { return 3 * k; }

std::uint64_t patch_embed(const GfnetConfig& c) {
  return linear(c.tokens(), c.patch_dim(), c.embed_dim);
}

std::uint64_t block(const GfnetConfig& c) {
  const std::uint64_t s = c.tokens(), d = c.embed_dim, h = c.hidden_dim();
  return 2 * layernorm(s, d) + 2 * fft2(s, d) + filter_multiply(s, d) + linear(s, d, h) +
         gelu(s * h) + linear(s, h, d) + 2 * s * d;
}

std::uint64_t head(const GfnetConfig& c) {
  const std::uint64_t s = c.tokens(), d = c.embed_dim, k = c.num_classes;
  std::uint64_t f = layernorm(s, d) + s * d + linear(1, d, k);
  if (c.dual_head) f += linear(1, d, k) + 2 * softmax(k) + 2 * k;
  return f;
}

}  // namespace flops

std::uint64_t flops_forward(const GfnetConfig& config, std::size_t through_block) {
  if (through_block > config.depth) {
    throw IndexError("flops_forward: block " + std::to_string(through_block) +
                     " beyond depth " + std::to_string(config.depth));
  }
  return flops::patch_embed(config) + through_block * flops::block(config);
}

std::uint64_t flops_full(const GfnetConfig& config) {
  return flops_forward(config, config.depth) + flops::head(config);
}

// ---------------------------------------------------------------------------
// Files

std::string config_to_json(const GfnetConfig& c) {
  json j = {{"image_size", c.image_size}, {"patch_size", c.patch_size},
            {"embed_dim", c.embed_dim},   {"depth", c.depth},
            {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes},
            {"dual_head", c.dual_head}};
  return j.dump(2) + "\n";
}

GfnetConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("model sidecar: ") + e.what());
  }
  GfnetConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.dual_head = j.at("dual_head").get<bool>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("model sidecar: ") + e.what());
  }
  c.validate();
  return c;
}

std::filesystem::path sidecar_path(const std::filesystem::path& container) {
  auto p = container;
  p.replace_extension(".json");
  return p;
}

void save_model(const std::filesystem::path& container, const GfnetModel& model) {
  container::save(container, model.to_entries());
  write_file_atomic(sidecar_path(container), config_to_json(model.config()));
}

GfnetModel load_model(const std::filesystem::path& container) {
  const GfnetConfig c = config_from_json(read_file(sidecar_path(container)));
  return GfnetModel::from_entries(c, container::load(container));
}

}  // namespace freqexit
