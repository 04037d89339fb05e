#pragma once

// Two-term L1 loss over final and upsampled-coarse fields, warmup-cosine
// learning-rate schedule, AdamW with decoupled decay, and the training loop
// with per-epoch checkpointing and exact resume.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gafield/data.hpp"
#include "gafield/metrics.hpp"
#include "gafield/model.hpp"

namespace gafield {

struct TrainConfig {
  double lambda = 0.3;        // coarse-loss weight
  double lr = 1e-4;
  long warmup = 3000;         // iterations of linear ramp
  double weight_decay = 0.01;
  std::size_t batch_size = 4;
  std::size_t epochs = 200;
  std::uint64_t seed = 1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const;
};

// (1/N) sum_i ( ||final_i - y_i||_1 + lambda ||upsampled_i - y_i||_1 ).
Tensor field_loss(const FieldPrediction& pred, const Tensor& targets, double lambda);

// Linear ramp 0 -> lr over `warmup` steps, then cosine decay to 0 at
// `total_steps`. Errors when total_steps < warmup.
double lr_at(long step, double base_lr, long warmup, long total_steps);

struct AdamWState {
  long step = 0;
  std::vector<std::vector<double>> m, v;  // parallel to the registry

  void init(const ParamRegistry& params);
  bool initialized() const { return !m.empty(); }
};

// One bias-corrected moment update followed by decoupled decay
// p <- p - lr*wd*p. Rejects non-finite gradients.
void adamw_step(ParamRegistry& params, const std::vector<std::span<const double>>& grads,
                AdamWState& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, double weight_decay = 0.01);

struct LogRow {
  long step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
};

struct TrainResult {
  std::vector<LogRow> log;
  double best_val = 0;
  long total_steps = 0;
};

std::string loss_log_csv(const std::vector<LogRow>& log);

// Trains in place. Samples must be prepared (features + targets set); every
// sample shares the task's flow condition. When checkpoint_dir is non-empty,
// writes ckpt-last.gaf and ckpt-best.gaf each epoch (extra entries are
// carried into both). Resume restores parameters, optimizer moments, epoch,
// and best-val exactly from a previous run's ckpt-last.gaf.
class Trainer {
 public:
  Trainer(GaFieldModel& model, TrainConfig cfg);

  void resume_from(const Archive& checkpoint);
  TrainResult run(const std::vector<PointCloud>& train, const std::vector<PointCloud>& val,
                  const Tensor& condition, const std::string& checkpoint_dir = "",
                  const Archive* extra_entries = nullptr);

  long global_step() const { return global_step_; }
  std::size_t start_epoch() const { return start_epoch_; }

 private:
  GaFieldModel& model_;
  TrainConfig cfg_;
  AdamWState opt_;
  long global_step_ = 0;
  std::size_t start_epoch_ = 0;
  double best_val_ = 0;
  bool has_best_ = false;
};

// Mean per-sample metric report of model predictions against sample targets.
// Predictions live in normalized space; `normalizer` maps raw targets into
// it. normalized=false compares in raw units instead. magnitude=true reduces
// 3-vector fields to their L2 norm first.
MetricReport evaluate_model(const GaFieldModel& model, const std::vector<PointCloud>& samples,
                            const Tensor& condition, const Normalizer& normalizer,
                            bool normalized, bool magnitude, ForwardOptions opts = {});

}  // namespace gafield
