#include "freqexit/earlyexit.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <map>
#include <numeric>

#include "freqexit/errors.hpp"
#include "freqexit/rng.hpp"

namespace freqexit {

using nlohmann::json;

void ExitConfig::validate(std::size_t layers) const {
  if (M < 1) throw ConfigError("M must be at least 1");
  if (l_m >= layers) {
    throw ConfigError("l_m = " + std::to_string(l_m) + " leaves no exit point below L = " +
                      std::to_string(layers));
  }
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
}

std::vector<std::size_t> exit_points(std::size_t l_m, std::size_t M, std::size_t L) {
  if (M < 1) throw ConfigError("M must be at least 1");
  if (l_m >= L) {
    throw ConfigError("empty exit set: l_m = " + std::to_string(l_m) + " >= L = " + std::to_string(L));
  }
  std::vector<std::size_t> out;
  for (std::size_t b = l_m; b < L; b += M) out.push_back(b);
  return out;
}

namespace {

double neg_entropy(const std::vector<double>& p) {
  double s = 0.0;
  for (double v : p)
    if (v > 0.0) s += v * std::log(v);
  return s;
}

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace

GateFeatures gate_features(std::span<const double> logits, double temperature) {
  if (logits.size() < 2) throw DimensionError("gate features need at least two classes");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  const auto p = softmax(logits);
  std::vector<double> scaled(logits.begin(), logits.end());
  for (auto& v : scaled) v /= temperature;
  const auto q = softmax(scaled);
  double top1 = -1.0, top2 = -1.0;
  for (double v : p) {
    if (v > top1) {
      top2 = top1;
      top1 = v;
    } else if (v > top2) {
      top2 = v;
    }
  }
  return {top1, neg_entropy(p), neg_entropy(q), top1 - top2};
}

double gate_score(const GateFeatures& f, const ExitBranch& branch) {
  const auto x = f.values();
  double z = branch.gate_b.value[0];
  for (std::size_t i = 0; i < 4; ++i) z += branch.gate_w.value[i] * x[i];
  return z;
}

GateDecision gate_decision(const GateFeatures& f, const ExitBranch& branch, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  const double z = gate_score(f, branch);
  bool fire;
  if (tau == 0.0) fire = true;
  else if (tau == 1.0) fire = false;
  else fire = z >= std::log(tau / (1.0 - tau));
  return {fire, sigmoid(z)};
}

// ---------------------------------------------------------------------------
// Bundle

namespace {

constexpr double kImInitStd = 0.02;

}  // namespace

ExitBundle ExitBundle::create(const GfnetConfig& model, const ExitConfig& config,
                              std::uint64_t seed) {
  config.validate(model.depth + 1);
  ExitBundle b;
  b.config = config;
  Rng rng(seed);
  for (std::size_t layer : exit_points(config.l_m, config.M, model.depth + 1)) {
    ExitBranch br;
    br.layer = layer;
    br.im = Linear(model.embed_dim, model.num_classes, kImInitStd, rng);
    br.gate_w = Parameter(TensorR({4}));
    br.gate_b = Parameter(TensorR({1}));
    b.branches.push_back(std::move(br));
  }
  return b;
}

std::vector<std::size_t> ExitBundle::layers() const {
  std::vector<std::size_t> out;
  for (const auto& br : branches) out.push_back(br.layer);
  return out;
}

bool ExitBundle::operator==(const ExitBundle& other) const {
  return config == other.config && bundle_entries(*this) == bundle_entries(other);
}

// ---------------------------------------------------------------------------
// Costs and losses

double inference_cost(std::size_t layer, const CostModel& cost) {
  return static_cast<double>(cost.spent_exit(layer)) / static_cast<double>(cost.full_path_flops());
}

double inference_cost_final(const CostModel& cost) {
  return static_cast<double>(cost.spent_final()) / static_cast<double>(cost.full_path_flops());
}

double joint_loss(double cross_entropy, double lambda, double ic) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  return cross_entropy + lambda * ic;
}

double joint_loss(std::span<const double> logits, int y, double lambda, double ic) {
  return joint_loss(softmax_cross_entropy(logits, y), lambda, ic);
}

std::vector<std::uint8_t> gate_targets(std::span<const double> joint) {
  if (joint.empty()) throw DimensionError("gate targets need at least the head's loss");
  const std::size_t n = joint.size() - 1;
  std::vector<std::uint8_t> t(n);
  double best_later = joint[n];
  for (std::size_t i = n; i-- > 0;) {
    t[i] = joint[i] <= best_later ? 1 : 0;
    best_later = std::min(best_later, joint[i]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Features

std::span<const double> FeatureCache::row(std::size_t layer, std::size_t sample) const {
  return {pooled.at(layer).data().data() + sample * dim, dim};
}

FeatureCache extract_features(const GfnetModel& backbone, const Dataset& data, std::size_t batch) {
  const auto& c = backbone.config();
  FeatureCache fc;
  fc.samples = data.size();
  fc.dim = c.embed_dim;
  fc.classes = c.num_classes;
  fc.labels = data.labels();
  fc.pooled.assign(c.depth + 1, TensorR({data.size(), c.embed_dim}));
  fc.head_probs = TensorR({data.size(), c.num_classes});
  const auto ptrs = data.pixel_ptrs();
  for (std::size_t s = 0; s < ptrs.size(); s += batch) {
    const std::size_t n = std::min(batch, ptrs.size() - s);
    const auto imgs = std::span(ptrs).subspan(s, n);
    Tape t(false);
    auto store = [&](std::size_t layer, Var x) {
      const TensorR& p = t.value(backbone.pool(t, x, n));
      std::copy(p.data().begin(), p.data().end(), fc.pooled[layer].data().begin() +
                                                      static_cast<std::ptrdiff_t>(s * c.embed_dim));
    };
    Var x = backbone.embed(t, imgs);
    store(0, x);
    for (std::size_t i = 0; i < c.depth; ++i) {
      x = backbone.block(t, i, x, n);
      store(i + 1, x);
    }
    Var pooled = backbone.pool(t, x, n);
    const TensorR& cls = t.value(backbone.head_cls(t, pooled));
    std::optional<TensorR> dist;
    if (c.dual_head) dist = t.value(backbone.head_dist(t, pooled));
    const std::size_t k = c.num_classes;
    for (std::size_t r = 0; r < n; ++r) {
      Logits l{TensorR({k}, std::vector<double>(cls.data().begin() + static_cast<std::ptrdiff_t>(r * k),
                                                cls.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * k))),
               std::nullopt};
      if (dist) {
        l.dist = TensorR({k}, std::vector<double>(dist->data().begin() + static_cast<std::ptrdiff_t>(r * k),
                                                  dist->data().begin() + static_cast<std::ptrdiff_t>((r + 1) * k)));
      }
      const auto p = fused_probabilities(l);
      std::copy(p.begin(), p.end(), fc.head_probs.data().begin() + static_cast<std::ptrdiff_t>((s + r) * k));
    }
  }
  return fc;
}

std::vector<double> im_logits(const ExitBranch& branch, std::span<const double> pooled) {
  const auto& w = branch.im.weight.value;
  const std::size_t d = w.extent(0), k = w.extent(1);
  if (pooled.size() != d) throw DimensionError("IM input width mismatch");
  std::vector<double> z(branch.im.bias.value.data().begin(), branch.im.bias.value.data().end());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < k; ++j) z[j] += pooled[i] * w[i * k + j];
  return z;
}

// ---------------------------------------------------------------------------
// Training

GateLoss gate_bce(const ExitBranch& branch, std::span<const GateFeatures> feats,
                  std::span<const std::uint8_t> targets) {
  if (feats.empty() || feats.size() != targets.size())
    throw DimensionError("gate BCE needs one target per feature row");
  GateLoss out;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const double z = gate_score(feats[i], branch);
    const double y = static_cast<double>(targets[i]);
    // log(1 + e^z) - y z, evaluated without overflow.
    out.loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
    const double err = sigmoid(z) - y;
    const auto x = feats[i].values();
    for (std::size_t k = 0; k < 4; ++k) out.grad_w[k] += err * x[k];
    out.grad_b += err;
  }
  const double inv = 1.0 / static_cast<double>(feats.size());
  out.loss *= inv;
  for (auto& g : out.grad_w) g *= inv;
  out.grad_b *= inv;
  return out;
}


namespace {

void sgd_update(Parameter& p, double lr, double weight_decay) {
  if (p.grad.shape() != p.value.shape()) return;
  for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * (p.grad[i] + weight_decay * p.value[i]);
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

// One CE step of `branch.im` on the given samples of `layer`.
void im_step(ExitBranch& branch, const FeatureCache& fc, std::span<const std::size_t> samples,
             double lr, double weight_decay) {
  TensorR x({samples.size(), fc.dim});
  std::vector<int> y(samples.size());
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto row = fc.row(branch.layer, samples[r]);
    std::copy(row.begin(), row.end(), x.data().begin() + static_cast<std::ptrdiff_t>(r * fc.dim));
    y[r] = fc.labels[samples[r]];
  }
  branch.im.weight.zero_grad();
  branch.im.bias.zero_grad();
  Tape t;
  Var loss = softmax_cross_entropy(t, branch.im.forward(t, t.constant(std::move(x))), y);
  if (!std::isfinite(t.value(loss)[0])) throw DivergenceError("IM training loss is not finite");
  t.backward(loss);
  sgd_update(branch.im.weight, lr, weight_decay);
  sgd_update(branch.im.bias, lr, weight_decay);
}

// One minibatch epoch of `branch.im` over `samples`.
void im_epoch(ExitBranch& branch, const FeatureCache& fc, std::vector<std::size_t> samples,
              const TrainConfig& tc, double lr, Rng& rng) {
  shuffle(samples, rng);
  for (std::size_t s = 0; s < samples.size(); s += tc.batch_size) {
    const std::size_t n = std::min(tc.batch_size, samples.size() - s);
    im_step(branch, fc, std::span(samples).subspan(s, n), lr, tc.weight_decay);
  }
}

// Minibatch epoch of gate BCE.
void gate_epoch(ExitBranch& branch, const std::vector<GateFeatures>& feats,
                const std::vector<std::uint8_t>& targets, const TrainConfig& tc, double lr,
                Rng& rng) {
  std::vector<std::size_t> order(feats.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);
  std::vector<GateFeatures> bf;
  std::vector<std::uint8_t> bt;
  for (std::size_t s = 0; s < order.size(); s += tc.batch_size) {
    const std::size_t n = std::min(tc.batch_size, order.size() - s);
    bf.clear();
    bt.clear();
    for (std::size_t r = 0; r < n; ++r) {
      bf.push_back(feats[order[s + r]]);
      bt.push_back(targets[order[s + r]]);
    }
    const GateLoss g = gate_bce(branch, bf, bt);
    for (std::size_t k = 0; k < 4; ++k) {
      branch.gate_w.value[k] -= lr * (g.grad_w[k] + tc.weight_decay * branch.gate_w.value[k]);
    }
    branch.gate_b.value[0] -= lr * g.grad_b;
  }
}

void check_features(const ExitBundle& bundle, const FeatureCache& fc) {
  if (fc.samples == 0) throw DataError("exit training needs at least one sample");
  for (const auto& br : bundle.branches) {
    if (br.layer >= fc.pooled.size()) throw ConfigError("branch layer beyond the backbone depth");
    if (br.im.in() != fc.dim) throw DimensionError("IM width does not match the backbone");
  }
}

}  // namespace

void warmup_train_ims(ExitBundle& bundle, const FeatureCache& fc, const TrainConfig& tc) {
  if (tc.epochs == 0) return;
  tc.validate();
  check_features(bundle, fc);
  std::vector<std::size_t> all(fc.samples);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::size_t steps = (fc.samples + tc.batch_size - 1) / tc.batch_size;
  for (auto& br : bundle.branches) {
    Rng rng(derive_seed(tc.seed, "warmup/" + std::to_string(br.layer)));
    for (std::size_t e = 0; e < tc.epochs; ++e) {
      std::vector<std::size_t> order = all;
      shuffle(order, rng);
      for (std::size_t s = 0, step = e * steps; s < order.size(); s += tc.batch_size, ++step) {
        const std::size_t n = std::min(tc.batch_size, order.size() - s);
        im_step(br, fc, std::span(order).subspan(s, n), cosine_lr(tc.learning_rate, step, steps * tc.epochs),
                tc.weight_decay);
      }
    }
  }
}

void warmup_train_ims(const GfnetModel& backbone, ExitBundle& bundle, const Dataset& data,
                      const TrainConfig& tc) {
  if (tc.epochs == 0) return;
  warmup_train_ims(bundle, extract_features(backbone, data), tc);
}

std::vector<AlternateLog> alternate_train(ExitBundle& bundle, const FeatureCache& fc,
                                          const CostModel& cost, const TrainConfig& tc,
                                          std::size_t iterations) {
  std::vector<AlternateLog> logs;
  if (iterations == 0) return logs;
  tc.validate();
  check_features(bundle, fc);
  cost.validate();
  const auto& cfg = bundle.config;
  const std::size_t nb = bundle.branches.size();
  std::vector<double> ic(nb + 1);
  for (std::size_t i = 0; i < nb; ++i) ic[i] = inference_cost(bundle.branches[i].layer, cost);
  ic[nb] = inference_cost_final(cost);
  std::vector<double> head_ce(fc.samples);
  for (std::size_t s = 0; s < fc.samples; ++s) {
    const double p = fc.head_probs[s * fc.classes + static_cast<std::size_t>(fc.labels[s])];
    head_ce[s] = -std::log(std::max(p, std::numeric_limits<double>::min()));
  }
  Rng rng(derive_seed(tc.seed, "alternate"));
  std::vector<std::vector<GateFeatures>> feats(nb, std::vector<GateFeatures>(fc.samples));
  std::vector<std::vector<double>> ce(nb, std::vector<double>(fc.samples));
  auto refresh = [&] {
    for (std::size_t i = 0; i < nb; ++i)
      for (std::size_t s = 0; s < fc.samples; ++s) {
        const auto z = im_logits(bundle.branches[i], fc.row(bundle.branches[i].layer, s));
        feats[i][s] = gate_features(z, cfg.temperature);
        ce[i][s] = softmax_cross_entropy(z, fc.labels[s]);
      }
  };

  for (std::size_t it = 0; it < iterations; ++it) {
    const double lr = cosine_lr(tc.learning_rate, it, iterations);
    // (a) route by the current gates.
    refresh();
    std::vector<std::vector<std::size_t>> routed(nb + 1);
    AlternateLog log;
    log.iteration = it + 1;
    for (std::size_t s = 0; s < fc.samples; ++s) {
      std::size_t dest = nb;
      for (std::size_t i = 0; i < nb; ++i) {
        if (gate_decision(feats[i][s], bundle.branches[i], cfg.tau).exit) {
          dest = i;
          break;
        }
      }
      routed[dest].push_back(s);
      const double c = dest == nb ? head_ce[s] : ce[dest][s];
      log.mean_joint_loss += joint_loss(c, cfg.lambda, ic[dest]);
      log.mean_ic += ic[dest];
    }
    log.mean_joint_loss /= static_cast<double>(fc.samples);
    log.mean_ic /= static_cast<double>(fc.samples);
    for (const auto& r : routed) log.routed.push_back(r.size());
    // (b) IM step on routed samples; empty routes are skipped.
    for (std::size_t i = 0; i < nb; ++i) {
      if (!routed[i].empty()) im_epoch(bundle.branches[i], fc, routed[i], tc, lr, rng);
    }
    // (c) gate step against best-future targets under the updated IMs.
    refresh();
    std::vector<std::vector<std::uint8_t>> targets(nb, std::vector<std::uint8_t>(fc.samples));
    std::vector<double> joint(nb + 1);
    for (std::size_t s = 0; s < fc.samples; ++s) {
      for (std::size_t i = 0; i < nb; ++i) joint[i] = joint_loss(ce[i][s], cfg.lambda, ic[i]);
      joint[nb] = joint_loss(head_ce[s], cfg.lambda, ic[nb]);
      const auto t = gate_targets(joint);
      for (std::size_t i = 0; i < nb; ++i) targets[i][s] = t[i];
    }
    for (std::size_t i = 0; i < nb; ++i) gate_epoch(bundle.branches[i], feats[i], targets[i], tc, lr, rng);
    for (const auto& br : bundle.branches) {
      for (double v : br.gate_w.value.data())
        if (!std::isfinite(v)) throw DivergenceError("gate weights are not finite");
    }
    logs.push_back(std::move(log));
  }
  return logs;
}

std::vector<AlternateLog> alternate_train(const GfnetModel& backbone, ExitBundle& bundle,
                                          const Dataset& data, const TrainConfig& tc,
                                          std::size_t iterations) {
  if (iterations == 0) return {};
  return alternate_train(bundle, extract_features(backbone, data),
                         make_cost_model(backbone.config(), bundle.layers()), tc, iterations);
}

// ---------------------------------------------------------------------------
// Files

std::vector<TensorEntry> bundle_entries(const ExitBundle& bundle) {
  std::vector<TensorEntry> out;
  for (const auto& br : bundle.branches) {
    const std::string p = "exit." + std::to_string(br.layer) + ".";
    out.push_back({p + "im.weight", br.im.weight.value});
    out.push_back({p + "im.bias", br.im.bias.value});
    out.push_back({p + "gm.weight", br.gate_w.value});
    out.push_back({p + "gm.bias", br.gate_b.value});
  }
  return out;
}

ExitBundle bundle_from_entries(const GfnetConfig& model, const ExitConfig& config,
                               const std::vector<TensorEntry>& entries) {
  ExitBundle b = ExitBundle::create(model, config, 0);
  std::map<std::string, const TensorR*> by_name;
  for (const auto& e : entries)
    if (const auto* t = std::get_if<TensorR>(&e.tensor)) by_name[e.name] = t;
  auto fill = [&](const std::string& name, Parameter& p) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("bundle container lacks entry '" + name + "'");
    if (it->second->shape() != p.value.shape()) throw ParseError("entry '" + name + "' has the wrong shape");
    p.value = *it->second;
    p.zero_grad();
  };
  for (auto& br : b.branches) {
    const std::string p = "exit." + std::to_string(br.layer) + ".";
    fill(p + "im.weight", br.im.weight);
    fill(p + "im.bias", br.im.bias);
    fill(p + "gm.weight", br.gate_w);
    fill(p + "gm.bias", br.gate_b);
  }
  return b;
}

void save_bundle(const std::filesystem::path& path, const GfnetModel& model, const ExitBundle& bundle) {
  auto entries = model.to_entries();
  for (auto& e : bundle_entries(bundle)) entries.push_back(std::move(e));
  container::save(path, entries);
  json j = json::parse(config_to_json(model.config()));
  const auto& c = bundle.config;
  j["exit"] = {{"l_m", c.l_m}, {"M", c.M}, {"tau", c.tau}, {"lambda", c.lambda},
               {"temperature", c.temperature}};
  write_file_atomic(sidecar_path(path), j.dump(2) + "\n");
}

LoadedBundle load_bundle(const std::filesystem::path& path) {
  const std::string sidecar = read_file(sidecar_path(path));
  const GfnetConfig mc = config_from_json(sidecar);
  ExitConfig ec;
  try {
    const json j = json::parse(sidecar).at("exit");
    ec.l_m = j.at("l_m").get<std::size_t>();
    ec.M = j.at("M").get<std::size_t>();
    ec.tau = j.at("tau").get<double>();
    ec.lambda = j.at("lambda").get<double>();
    ec.temperature = j.at("temperature").get<double>();
  } catch (const json::exception& e) {
    throw ParseError(sidecar_path(path).string() + ": missing or malformed exit config: " + e.what());
  }
  const auto entries = container::load(path);
  return {GfnetModel::from_entries(mc, entries), bundle_from_entries(mc, ec, entries)};
}

}  // namespace freqexit
