#include "freqexit/distill.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "freqexit/errors.hpp"
#include "freqexit/rng.hpp"

namespace freqexit {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

void ModelSgd::step(GfnetModel& model, double lr, double weight_decay) {
  if (momentum_ == 0.0) {
    model.sgd_step(lr, weight_decay);
    return;
  }
  std::size_t i = 0;
  model.for_each_parameter([&](const std::string&, Parameter& p) {
    if (velocity_.size() <= i) velocity_.emplace_back(p.value.shape());
    TensorR& v = velocity_[i++];
    if (!p.trainable || p.grad.shape() != p.value.shape()) return;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      v[k] = momentum_ * v[k] + p.grad[k] + weight_decay * p.value[k];
      p.value[k] -= lr * v[k];
    }
  });
  std::size_t j = 0;
  for (auto& b : model.blocks()) {
    auto& k = b.filter.k_half;
    if (velocity_c_.size() <= j) velocity_c_.emplace_back(k.value.shape());
    TensorC& v = velocity_c_[j++];
    if (!k.trainable || k.grad.shape() != k.value.shape()) continue;
    for (std::size_t n = 0; n < k.value.size(); ++n) {
      v[n] = momentum_ * v[n] + k.grad[n] + weight_decay * k.value[n];
      k.value[n] -= lr * v[n];
    }
    b.filter.project_self_conjugate();
  }
}

double hard_distill_loss(std::span<const double> logits_cls, std::span<const double> logits_dist,
                         std::span<const double> teacher_logits, int y) {
  if (teacher_logits.size() != logits_dist.size()) {
    throw DimensionError("teacher and student disagree on the class count");
  }
  for (double v : teacher_logits)
    if (!std::isfinite(v)) throw DivergenceError("teacher logits are not finite");
  return 0.5 * softmax_cross_entropy(logits_cls, y) +
         0.5 * softmax_cross_entropy(logits_dist, argmax(teacher_logits));
}

Var hard_distill_loss(Tape& t, Var logits_cls, Var logits_dist, std::span<const int> labels,
                      std::span<const int> teacher_labels) {
  return add(t, scale(t, softmax_cross_entropy(t, logits_cls, labels), 0.5),
             scale(t, softmax_cross_entropy(t, logits_dist, teacher_labels), 0.5));
}

std::vector<int> predict(const GfnetModel& model, const Dataset& data, std::size_t batch) {
  const auto ptrs = data.pixel_ptrs();
  std::vector<int> out;
  out.reserve(ptrs.size());
  for (std::size_t s = 0; s < ptrs.size(); s += batch) {
    const std::size_t n = std::min(batch, ptrs.size() - s);
    for (const auto& l : classify_batch(model, std::span(ptrs).subspan(s, n))) {
      out.push_back(fused_prediction(l));
    }
  }
  return out;
}

double accuracy(const GfnetModel& model, const Dataset& data) {
  if (data.size() == 0) throw DataError("accuracy of an empty dataset");
  const auto pred = predict(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.items[i].label;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

namespace {

struct BatchOut {
  double loss;
  std::size_t correct;
};

Var forward_pooled(const GfnetModel& m, Tape& t, std::span<const TensorR* const> imgs) {
  Var x = m.embed(t, imgs);
  for (std::size_t i = 0; i < m.config().depth; ++i) x = m.block(t, i, x, imgs.size());
  return m.pool(t, x, imgs.size());
}

std::size_t count_correct(const Tape& t, Var cls, const Var* dist, std::span<const int> labels) {
  const TensorR& a = t.value(cls);
  const std::size_t k = a.extent(1);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    Logits l{TensorR({k}, std::vector<double>(a.data().begin() + static_cast<std::ptrdiff_t>(r * k),
                                              a.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * k))),
             std::nullopt};
    if (dist != nullptr) {
      const TensorR& b = t.value(*dist);
      l.dist = TensorR({k}, std::vector<double>(b.data().begin() + static_cast<std::ptrdiff_t>(r * k),
                                                b.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * k)));
    }
    correct += fused_prediction(l) == labels[r];
  }
  return correct;
}

// One forward (and, when `train` is set, backward) pass over a batch. With
// teacher labels the dual-head distillation objective is used, otherwise CE on
// the class head.
BatchOut run_batch(GfnetModel& m, std::span<const TensorR* const> imgs, std::span<const int> labels,
                   const std::vector<int>* teacher_labels, bool train) {
  Tape t(train);
  Var pooled = forward_pooled(m, t, imgs);
  Var cls = m.head_cls(t, pooled);
  Var loss;
  BatchOut out{};
  if (teacher_labels != nullptr) {
    Var dist = m.head_dist(t, pooled);
    loss = hard_distill_loss(t, cls, dist, labels, *teacher_labels);
    out.correct = count_correct(t, cls, &dist, labels);
  } else {
    loss = softmax_cross_entropy(t, cls, labels);
    out.correct = count_correct(t, cls, nullptr, labels);
  }
  out.loss = t.value(loss)[0];
  if (!std::isfinite(out.loss)) throw DivergenceError("non-finite training loss");
  if (train) t.backward(loss);
  return out;
}

using TeacherLabels = std::vector<int>;

EpochLog evaluate_split(GfnetModel& m, const Dataset& data, const TeacherLabels* teacher,
                        std::size_t epoch, std::size_t batch) {
  const auto ptrs = data.pixel_ptrs();
  const auto labels = data.labels();
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t s = 0; s < ptrs.size(); s += batch) {
    const std::size_t n = std::min(batch, ptrs.size() - s);
    TeacherLabels tl;
    if (teacher) tl.assign(teacher->begin() + static_cast<std::ptrdiff_t>(s),
                           teacher->begin() + static_cast<std::ptrdiff_t>(s + n));
    const BatchOut b = run_batch(m, std::span(ptrs).subspan(s, n), std::span(labels).subspan(s, n),
                                 teacher ? &tl : nullptr, false);
    loss += b.loss * static_cast<double>(n);
    correct += b.correct;
  }
  const auto total = static_cast<double>(ptrs.size());
  return {epoch, "test", loss / total, static_cast<double>(correct) / total};
}

TrainResult fit(GfnetModel model, const Dataset& train, const TrainConfig& tc,
                const TeacherLabels* teacher_train, const Dataset* eval,
                const TeacherLabels* teacher_eval) {
  tc.validate();
  if (train.size() == 0) throw DataError("training set is empty");
  TrainResult result;
  const auto ptrs = train.pixel_ptrs();
  const auto labels = train.labels();
  const std::size_t n = train.size();
  const std::size_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total_steps = steps_per_epoch * tc.epochs;
  Rng shuffle(derive_seed(tc.seed, "shuffle"));
  ModelSgd opt(tc.momentum);
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < n; s += tc.batch_size) {
      const std::size_t b = std::min(tc.batch_size, n - s);
      std::vector<const TensorR*> imgs(b);
      std::vector<int> y(b), ty;
      for (std::size_t i = 0; i < b; ++i) {
        imgs[i] = ptrs[order[s + i]];
        y[i] = labels[order[s + i]];
        if (teacher_train) ty.push_back((*teacher_train)[order[s + i]]);
      }
      model.zero_grads();
      BatchOut out;
      try {
        out = run_batch(model, imgs, y, teacher_train ? &ty : nullptr, true);
      } catch (const DivergenceError&) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + " (loss is not finite)");
      }
      opt.step(model, cosine_lr(tc.learning_rate, step, total_steps), tc.weight_decay);
      ++step;
      loss_sum += out.loss * static_cast<double>(b);
      correct += out.correct;
    }
    result.log.push_back({epoch, "train", loss_sum / static_cast<double>(n),
                          static_cast<double>(correct) / static_cast<double>(n)});
    if (eval != nullptr && eval->size() > 0) {
      result.log.push_back(evaluate_split(model, *eval, teacher_eval, epoch, 64));
    }
  }
  model.zero_grads();
  result.model = std::move(model);
  return result;
}

}  // namespace

TrainResult train_teacher(const Dataset& train, const GfnetConfig& config, const TrainConfig& tc,
                          const Dataset* eval) {
  if (config.dual_head) throw ConfigError("the teacher must be a single-head model");
  return fit(GfnetModel(config, derive_seed(tc.seed, "teacher-init")), train, tc, nullptr, eval,
             nullptr);
}

TrainResult distill_student(const GfnetModel& teacher, const Dataset& train,
                            const GfnetConfig& student, const TrainConfig& tc, const Dataset* eval) {
  if (!student.dual_head) throw ConfigError("the student needs a distillation head");
  if (teacher.config().num_classes != student.num_classes) {
    throw ConfigError("teacher and student disagree on num_classes");
  }
  // The teacher is frozen and inputs are not augmented, so its hard labels
  // are fixed for the whole run.
  const TeacherLabels teacher_train = predict(teacher, train);
  TeacherLabels teacher_eval;
  if (eval != nullptr) teacher_eval = predict(teacher, *eval);
  return fit(GfnetModel(student, derive_seed(tc.seed, "student-init")), train, tc, &teacher_train,
             eval, eval ? &teacher_eval : nullptr);
}

std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,split,loss,accuracy\n";
  for (const auto& e : log) os << e.epoch << ',' << e.split << ',' << e.loss << ',' << e.accuracy << '\n';
  return os.str();
}

}  // namespace freqexit
