#include "freqexit/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace freqexit {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMajor>;
using CMapR = Eigen::Map<const RowMajor>;

CMapR view(const TensorR& t) {
  return CMapR(t.data().data(), static_cast<Eigen::Index>(t.extent(0)),
               static_cast<Eigen::Index>(t.extent(1)));
}

MapR view(TensorR& t) {
  return MapR(t.data().data(), static_cast<Eigen::Index>(t.extent(0)),
              static_cast<Eigen::Index>(t.extent(1)));
}

void require_rank2(const TensorR& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a 2D tensor, got " +
                         shape_string(t.shape()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(TensorR value, bool requires_grad, std::function<void(Tape&)> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  backward_done_ = false;
  return Var{nodes_.size() - 1};
}

Var Tape::constant(TensorR value) { return push(std::move(value), false, nullptr); }

Var Tape::param(const Parameter& p) {
  Var v = push(p.value, p.trainable, nullptr);
  if (nodes_.back().requires_grad) nodes_.back().param = &p;
  return v;
}

TensorR Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.shape() == n.value.shape()) return n.grad;
  return TensorR(n.value.shape());
}

TensorR& Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.shape() != n.value.shape()) n.grad = TensorR(n.value.shape());
  return n.grad;
}

void Tape::accumulate(Var v, const TensorR& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  require_same_shape(n.value, g, "gradient accumulation");
  if (n.grad.shape() != n.value.shape()) {
    n.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::backward(Var loss) {
  if (!record_) throw StateError("backward on a non-recording tape");
  if (backward_done_) throw StateError("backward called twice without a new forward pass");
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got " +
                         shape_string(root.value.shape()));
  }
  for (auto& n : nodes_) n.grad = TensorR();
  backward_done_ = true;
  if (!root.requires_grad) return;
  grad_buffer(loss)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      if (pg.shape() != n.value.shape()) pg = TensorR(n.value.shape());
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Scalar helpers

void matmul_into(const TensorR& a, const TensorR& b, TensorR& out) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  if (out.shape() != Shape{a.extent(0), b.extent(1)}) {
    out = TensorR({a.extent(0), b.extent(1)});
  }
  view(out).noalias() = view(a) * view(b);
}

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - m);
    z += p[k];
  }
  for (auto& v : p) v /= z;
  return p;
}

double softmax_cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw IndexError("class label " + std::to_string(label) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return std::log(z) + m - logits[static_cast<std::size_t>(label)];
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Tape& t, Var a, Var b) {
  TensorR out;
  matmul_into(t.value(a), t.value(b), out);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  Var o{t.size()};
  return t.push(std::move(out), rg, [a, b, o](Tape& tp) {
    const TensorR& g = tp.node(o).grad;
    if (tp.requires_grad(a)) {
      view(tp.grad_buffer(a)).noalias() += view(g) * view(tp.value(b)).transpose();
    }
    if (tp.requires_grad(b)) {
      view(tp.grad_buffer(b)).noalias() += view(tp.value(a)).transpose() * view(g);
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const TensorR& x = t.value(a);
  const TensorR& y = t.value(b);
  require_same_shape(x, y, "add");
  TensorR out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  Var o{t.size()};
  return t.push(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                [a, b, o](Tape& tp) {
                  const TensorR& g = tp.node(o).grad;
                  tp.accumulate(a, g);
                  tp.accumulate(b, g);
                });
}

Var add_bias(Tape& t, Var x, Var bias) {
  const TensorR& xv = t.value(x);
  const TensorR& bv = t.value(bias);
  require_rank2(xv, "add_bias");
  const std::size_t rows = xv.extent(0), cols = xv.extent(1);
  if (bv.size() != cols) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " vs rows of " +
                         shape_string(xv.shape()));
  }
  TensorR out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
  Var o{t.size()};
  return t.push(std::move(out), t.requires_grad(x) || t.requires_grad(bias),
                [x, bias, o, rows, cols](Tape& tp) {
                  const TensorR& g = tp.node(o).grad;
                  tp.accumulate(x, g);
                  if (tp.requires_grad(bias)) {
                    TensorR& gb = tp.grad_buffer(bias);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) gb[c] += g.at(r, c);
                  }
                });
}

Var scale(Tape& t, Var x, double s) {
  TensorR out = t.value(x);
  for (auto& v : out.data()) v *= s;
  Var o{t.size()};
  return t.push(std::move(out), t.requires_grad(x), [x, o, s](Tape& tp) {
    const TensorR& g = tp.node(o).grad;
    TensorR& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
  });
}

Var layernorm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  if (!(eps > 0.0)) throw ConfigError("layernorm: eps must be positive");
  const TensorR& xv = t.value(x);
  const TensorR& gv = t.value(gamma);
  const TensorR& bv = t.value(beta);
  const std::size_t d = xv.shape().back();
  if (gv.size() != d || bv.size() != d) {
    throw DimensionError("layernorm: affine extents " + shape_string(gv.shape()) +
                         " do not match feature extent " + std::to_string(d));
  }
  const std::size_t rows = xv.size() / d;
  TensorR out(xv.shape());
  TensorR xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mean) * is;
      xhat[r * d + c] = h;
      out[r * d + c] = gv[c] * h + bv[c];
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  if (!t.recording() || !rg) return t.push(std::move(out), false, nullptr);
  Var o{t.size()};
  return t.push(std::move(out), true,
                [x, gamma, beta, o, d, rows, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& tp) {
                  const TensorR& g = tp.node(o).grad;
                  const TensorR& gv = tp.value(gamma);
                  if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
                    TensorR dg(gv.shape()), db(gv.shape());
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < d; ++c) {
                        dg[c] += g[r * d + c] * xhat[r * d + c];
                        db[c] += g[r * d + c];
                      }
                    tp.accumulate(gamma, dg);
                    tp.accumulate(beta, db);
                  }
                  if (!tp.requires_grad(x)) return;
                  TensorR& gx = tp.grad_buffer(x);
                  std::vector<double> dh(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                      dh[c] = g[r * d + c] * gv[c];
                      m1 += dh[c];
                      m2 += dh[c] * xhat[r * d + c];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t c = 0; c < d; ++c) {
                      gx[r * d + c] += inv_std[r] * (dh[c] - m1 - xhat[r * d + c] * m2);
                    }
                  }
                });
}

Var gelu(Tape& t, Var x) {
  const TensorR& xv = t.value(x);
  const auto n = static_cast<Eigen::Index>(xv.size());
  Eigen::Map<const Eigen::ArrayXd> v(xv.data().data(), n);
  // tanh(u) = 1 - 2 / (exp(2u) + 1), evaluated with vectorised exp.
  const Eigen::ArrayXd th =
      1.0 - 2.0 / ((2.0 * kGeluC * (v + kGeluA * v.cube())).exp() + 1.0);
  TensorR out(xv.shape());
  Eigen::Map<Eigen::ArrayXd>(out.data().data(), n) = 0.5 * v * (1.0 + th);
  if (!t.recording() || !t.requires_grad(x)) return t.push(std::move(out), false, nullptr);
  TensorR deriv(xv.shape());
  Eigen::Map<Eigen::ArrayXd>(deriv.data().data(), n) =
      0.5 * (1.0 + th) + 0.5 * v * (1.0 - th.square()) * kGeluC * (1.0 + 3.0 * kGeluA * v.square());
  Var o{t.size()};
  return t.push(std::move(out), true, [x, o, deriv = std::move(deriv)](Tape& tp) {
    const TensorR& g = tp.node(o).grad;
    TensorR& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv[i];
  });
}

Var mean_rows(Tape& t, Var x, std::size_t groups) {
  const TensorR& xv = t.value(x);
  require_rank2(xv, "mean_rows");
  if (groups == 0 || xv.extent(0) % groups != 0) {
    throw DimensionError("mean_rows: " + std::to_string(xv.extent(0)) +
                         " rows do not split into " + std::to_string(groups) + " groups");
  }
  const std::size_t per = xv.extent(0) / groups, d = xv.extent(1);
  TensorR out({groups, d});
  const double inv = 1.0 / static_cast<double>(per);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t r = 0; r < per; ++r)
      for (std::size_t c = 0; c < d; ++c) out.at(gi, c) += xv.at(gi * per + r, c);
    for (std::size_t c = 0; c < d; ++c) out.at(gi, c) *= inv;
  }
  Var o{t.size()};
  return t.push(std::move(out), t.requires_grad(x), [x, o, groups, per, d, inv](Tape& tp) {
    const TensorR& g = tp.node(o).grad;
    TensorR& gx = tp.grad_buffer(x);
    for (std::size_t gi = 0; gi < groups; ++gi)
      for (std::size_t r = 0; r < per; ++r)
        for (std::size_t c = 0; c < d; ++c) gx.at(gi * per + r, c) += g.at(gi, c) * inv;
  });
}

Var softmax_cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
  const TensorR& lv = t.value(logits);
  require_rank2(lv, "softmax_cross_entropy");
  const std::size_t n = lv.extent(0), k = lv.extent(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  TensorR probs({n, k});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    std::span<const double> row(lv.data().data() + r * k, k);
    total += softmax_cross_entropy(row, labels[r]);
    const auto p = softmax(row);
    std::copy(p.begin(), p.end(), probs.data().begin() + static_cast<std::ptrdiff_t>(r * k));
  }
  TensorR out({1}, total / static_cast<double>(n));
  std::vector<int> lab(labels.begin(), labels.end());
  Var o{t.size()};
  return t.push(std::move(out), t.requires_grad(logits),
                [logits, o, n, k, probs = std::move(probs), lab = std::move(lab)](Tape& tp) {
                  const double g = tp.node(o).grad[0] / static_cast<double>(n);
                  TensorR& gl = tp.grad_buffer(logits);
                  for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t c = 0; c < k; ++c) gl.at(r, c) += g * probs.at(r, c);
                    gl.at(r, static_cast<std::size_t>(lab[r])) -= g;
                  }
                });
}

}  // namespace freqexit
