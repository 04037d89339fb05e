#include "gafield/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>

namespace gafield {

void TrainConfig::validate() const {
  if (lambda < 0) throw ConfigError("train: lambda must be non-negative");
  if (!(lr > 0)) throw ConfigError("train: learning rate must be positive");
  if (warmup < 0) throw ConfigError("train: warmup must be non-negative");
  if (weight_decay < 0) throw ConfigError("train: weight decay must be non-negative");
  if (batch_size == 0) throw ConfigError("train: batch size must be positive");
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
}

Tensor field_loss(const FieldPrediction& pred, const Tensor& targets, double lambda) {
  if (lambda < 0) throw std::invalid_argument("field_loss: lambda must be non-negative");
  if (pred.final.shape() != targets.shape() || pred.upsampled.shape() != targets.shape())
    throw ShapeError("field_loss: prediction/target shape mismatch");
  Tensor final_term = mean_all(sum_axis(abs(sub(pred.final, targets)), 1));
  Tensor coarse_term = mean_all(sum_axis(abs(sub(pred.upsampled, targets)), 1));
  return add(final_term, mul_scalar(coarse_term, lambda));
}

double lr_at(long step, double base_lr, long warmup, long total_steps) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (total_steps < warmup)
    throw ConfigError("lr_at: total steps " + std::to_string(total_steps) +
                      " below warmup " + std::to_string(warmup));
  if (warmup > 0 && step < warmup)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warmup);
  const double t = static_cast<double>(step - warmup) / span;
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

void AdamWState::init(const ParamRegistry& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& [name, p] : params) {
    m.emplace_back(p->numel(), 0.0);
    v.emplace_back(p->numel(), 0.0);
  }
}

void adamw_step(ParamRegistry& params, const std::vector<std::span<const double>>& grads,
                AdamWState& state, double lr, double beta1, double beta2, double eps,
                double weight_decay) {
  if (params.size() != grads.size())
    throw ShapeError("adamw_step: gradient list does not match parameter list");
  if (!state.initialized()) state.init(params);
  if (state.m.size() != params.size())
    throw ShapeError("adamw_step: optimizer state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second->storage();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    if (g.size() != p.size())
      throw ShapeError("adamw_step: gradient shape mismatch for " + params[i].first);
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw NumericError("adamw_step: non-finite gradient in parameter " + params[i].first);
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      p[j] -= lr * weight_decay * p[j];
    }
  }
}

std::string loss_log_csv(const std::vector<LogRow>& log) {
  std::ostringstream os;
  os << "step,lr,train_loss,val_loss\n";
  char buf[128];
  for (const LogRow& r : log) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g", r.step, r.lr, r.train_loss);
    os << buf;
    if (r.val_loss) {
      std::snprintf(buf, sizeof(buf), ",%.17g", *r.val_loss);
      os << buf;
    } else {
      os << ",";
    }
    os << "\n";
  }
  return os.str();
}

Trainer::Trainer(GaFieldModel& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
  cfg_.validate();
}

namespace {

constexpr std::uint64_t kEpochStream = 9000;

void save_training_checkpoint(const std::string& path, GaFieldModel& model,
                              const AdamWState& opt, const ParamRegistry& reg, double epoch_done,
                              double global_step, double best_val, const Archive* extra) {
  Archive ar;
  if (extra) ar = *extra;
  save_model_archive(ar, model);
  for (std::size_t i = 0; i < reg.size(); ++i) {
    ar["opt/m/" + reg[i].first] =
        ArchiveEntry::make_f64(Tensor::from({opt.m[i].size()}, std::vector<double>(opt.m[i])));
    ar["opt/v/" + reg[i].first] =
        ArchiveEntry::make_f64(Tensor::from({opt.v[i].size()}, std::vector<double>(opt.v[i])));
  }
  ar["train/state"] = ArchiveEntry::make_f64(Tensor::row(
      {epoch_done, global_step, best_val, static_cast<double>(opt.step)}));
  write_archive(path, ar);
}

}  // namespace

void Trainer::resume_from(const Archive& checkpoint) {
  // Parameters were restored by load_model_archive into a fresh model; here
  // we restore them into the live model plus optimizer state and counters.
  ParamRegistry reg = model_.parameters();
  for (auto& [name, p] : reg) {
    auto it = checkpoint.find("param/" + name);
    if (it == checkpoint.end()) throw DataError("resume: missing parameter '" + name + "'");
    Tensor stored = it->second.as_tensor();
    if (stored.shape() != p->shape()) throw DataError("resume: shape mismatch for '" + name + "'");
    *p = stored.detached();
  }
  opt_.init(reg);
  for (std::size_t i = 0; i < reg.size(); ++i) {
    auto im = checkpoint.find("opt/m/" + reg[i].first);
    auto iv = checkpoint.find("opt/v/" + reg[i].first);
    if (im == checkpoint.end() || iv == checkpoint.end())
      throw DataError("resume: missing optimizer state for '" + reg[i].first + "'");
    opt_.m[i] = im->second.f64;
    opt_.v[i] = iv->second.f64;
  }
  auto is = checkpoint.find("train/state");
  if (is == checkpoint.end()) throw DataError("resume: missing train/state entry");
  const auto& s = is->second.f64;
  if (s.size() != 4) throw DataError("resume: malformed train/state entry");
  start_epoch_ = static_cast<std::size_t>(s[0]);
  global_step_ = static_cast<long>(s[1]);
  best_val_ = s[2];
  has_best_ = true;
  opt_.step = static_cast<long>(s[3]);
}

TrainResult Trainer::run(const std::vector<PointCloud>& train, const std::vector<PointCloud>& val,
                         const Tensor& condition, const std::string& checkpoint_dir,
                         const Archive* extra_entries) {
  if (train.empty()) throw DataError("train: empty dataset");
  const std::size_t steps_per_epoch =
      (train.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  const long total_steps = static_cast<long>(cfg_.epochs * steps_per_epoch);
  if (total_steps < cfg_.warmup)
    throw ConfigError("train: schedule has fewer steps than warmup");

  ParamRegistry reg = model_.parameters();
  if (!opt_.initialized()) opt_.init(reg);

  // Cluster structures depend only on geometry; compute once per sample.
  std::vector<LevelStructure> train_pre, val_pre;
  train_pre.reserve(train.size());
  for (const PointCloud& pc : train) train_pre.push_back(model_.preprocess(pc));
  val_pre.reserve(val.size());
  for (const PointCloud& pc : val) val_pre.push_back(model_.preprocess(pc));

  TrainResult result;
  result.total_steps = total_steps;
  result.best_val = has_best_ ? best_val_ : std::numeric_limits<double>::infinity();

  for (std::size_t epoch = start_epoch_; epoch < cfg_.epochs; ++epoch) {
    // The shuffle stream derives from (seed, epoch) alone so a resumed run
    // replays the identical order.
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng epoch_rng = Rng(cfg_.seed).fork(kEpochStream + epoch);
    epoch_rng.shuffle(order);

    for (std::size_t b = 0; b < train.size(); b += cfg_.batch_size) {
      const std::size_t batch_end = std::min(train.size(), b + cfg_.batch_size);
      Tape tape;
      Tensor batch_loss;
      for (std::size_t s = b; s < batch_end; ++s) {
        const std::size_t idx = order[s];
        FieldPrediction pred =
            model_.forward(train[idx], condition, &tape, &train_pre[idx]);
        Tensor loss = field_loss(pred, *train[idx].targets, cfg_.lambda);
        batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
      }
      batch_loss = mul_scalar(batch_loss, 1.0 / static_cast<double>(batch_end - b));
      tape.backward(batch_loss);

      const double lr = lr_at(global_step_, cfg_.lr, cfg_.warmup, total_steps);
      // Parameters unused in this graph (ablated paths) contribute zero grad.
      std::vector<std::vector<double>> zero_store;
      std::size_t missing = 0;
      for (auto& [name, p] : reg)
        if (!tape.watched(*p)) ++missing;
      zero_store.reserve(missing);
      std::vector<std::span<const double>> grads;
      grads.reserve(reg.size());
      for (auto& [name, p] : reg) {
        if (tape.watched(*p)) {
          grads.push_back(tape.grad(*p));
        } else {
          zero_store.emplace_back(p->numel(), 0.0);
          grads.push_back(zero_store.back());
        }
      }
      adamw_step(reg, grads, opt_, lr, cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay);

      LogRow row;
      row.step = global_step_;
      row.lr = lr;
      row.train_loss = batch_loss.item();
      result.log.push_back(row);
      ++global_step_;
    }

    double val_loss = 0;
    if (!val.empty()) {
      for (std::size_t s = 0; s < val.size(); ++s) {
        FieldPrediction pred = model_.forward(val[s], condition, nullptr, &val_pre[s]);
        val_loss += field_loss(pred, *val[s].targets, cfg_.lambda).item();
      }
      val_loss /= static_cast<double>(val.size());
      result.log.back().val_loss = val_loss;
    }

    const bool improved = !val.empty() && (!has_best_ || val_loss < best_val_);
    if (improved) {
      best_val_ = val_loss;
      has_best_ = true;
      result.best_val = val_loss;
    }
    if (!checkpoint_dir.empty()) {
      std::filesystem::create_directories(checkpoint_dir);
      save_training_checkpoint(checkpoint_dir + "/ckpt-last.gaf", model_, opt_, reg,
                               static_cast<double>(epoch + 1),
                               static_cast<double>(global_step_),
                               has_best_ ? best_val_ : std::numeric_limits<double>::infinity(),
                               extra_entries);
      if (improved || (val.empty() && epoch + 1 == cfg_.epochs)) {
        std::filesystem::copy_file(checkpoint_dir + "/ckpt-last.gaf",
                                   checkpoint_dir + "/ckpt-best.gaf",
                                   std::filesystem::copy_options::overwrite_existing);
      }
    }
  }
  start_epoch_ = cfg_.epochs;
  return result;
}

namespace {

std::vector<double> flatten_for_metrics(const Tensor& field, bool magnitude) {
  if (magnitude && field.cols() == 3) {
    Tensor mag = wss_magnitude(field);
    return std::vector<double>(mag.vec());
  }
  return std::vector<double>(field.vec());
}

}  // namespace

MetricReport evaluate_model(const GaFieldModel& model, const std::vector<PointCloud>& samples,
                            const Tensor& condition, const Normalizer& normalizer,
                            bool normalized, bool magnitude, ForwardOptions opts) {
  if (samples.empty()) throw DataError("evaluate: no samples");
  std::vector<MetricReport> reports;
  reports.reserve(samples.size());
  for (const PointCloud& pc : samples) {
    if (!pc.targets) throw DataError("evaluate: sample lacks targets");
    FieldPrediction pred = model.forward(pc, condition, nullptr, nullptr, opts);
    Tensor predicted, truth;
    if (normalized) {
      predicted = pred.final;
      truth = normalizer.apply(*pc.targets);
    } else {
      predicted = normalizer.invert(pred.final);
      truth = *pc.targets;
    }
    const std::vector<double> p = flatten_for_metrics(predicted, magnitude);
    const std::vector<double> t = flatten_for_metrics(truth, magnitude);
    reports.push_back(compute_metrics(p, t));
  }
  return average_reports(reports);
}

}  // namespace gafield
