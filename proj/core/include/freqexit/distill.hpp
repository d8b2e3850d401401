#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "freqexit/data.hpp"
#include "freqexit/gfnet.hpp"

namespace freqexit {

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  /// Heavy-ball momentum; 0 is plain SGD.
  double momentum = 0.0;

  void validate() const;
};

/// Cosine decay from `base` at step 0 to 0 at `total`.
double cosine_lr(double base, std::size_t step, std::size_t total);

/// SGD with optional heavy-ball momentum over every trainable model tensor.
/// Self-conjugate filter bins are re-projected after each step.
class ModelSgd {
 public:
  explicit ModelSgd(double momentum) : momentum_(momentum) {}
  void step(GfnetModel& model, double lr, double weight_decay);

 private:
  double momentum_;
  std::vector<TensorR> velocity_;
  std::vector<TensorC> velocity_c_;
};

struct EpochLog {
  std::size_t epoch = 0;
  std::string split;  // "train" or "test"
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  GfnetModel model;
  std::vector<EpochLog> log;
};

/// 0.5 * CE(cls, y) + 0.5 * CE(dist, argmax teacher_logits).
double hard_distill_loss(std::span<const double> logits_cls, std::span<const double> logits_dist,
                         std::span<const double> teacher_logits, int y);

/// Batched form on the tape; returns the batch mean as a [1] tensor.
Var hard_distill_loss(Tape& t, Var logits_cls, Var logits_dist, std::span<const int> labels,
                      std::span<const int> teacher_labels);

/// Fused predictions (lowest-index tie-break), batched.
std::vector<int> predict(const GfnetModel& model, const Dataset& data, std::size_t batch = 64);
double accuracy(const GfnetModel& model, const Dataset& data);

/// Plain cross-entropy training of a single-head model. When `eval` is given a
/// "test" row is logged after every epoch. Throws DivergenceError on a
/// non-finite loss.
TrainResult train_teacher(const Dataset& train, const GfnetConfig& config, const TrainConfig& tc,
                          const Dataset* eval = nullptr);

/// Hard-label distillation of a dual-head student from a frozen teacher.
TrainResult distill_student(const GfnetModel& teacher, const Dataset& train,
                            const GfnetConfig& student, const TrainConfig& tc,
                            const Dataset* eval = nullptr);

/// "epoch,split,loss,accuracy" with one row per log entry.
std::string training_log_csv(const std::vector<EpochLog>& log);

}  // namespace freqexit
