#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tfm/augment.hpp"
#include "tfm/autograd.hpp"
#include "tfm/checkpoint.hpp"
#include "tfm/error.hpp"
#include "tfm/frameset.hpp"
#include "tfm/model.hpp"
#include "tfm/optim.hpp"
#include "tfm/random.hpp"

namespace tfm {

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t steps_per_epoch = 20;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  /// 200 epochs x 50 steps, batch 8.
  static TrainConfig paper() { return {200, 50, 8, 1e-3, 1e-4, 1.0, 0}; }
  static TrainConfig desk() { return {5, 20, 4, 1e-3, 1e-4, 1.0, 0}; }

  std::size_t total_steps() const { return epochs * steps_per_epoch; }

  void validate() const {
    if (epochs == 0 || steps_per_epoch == 0 || batch_size == 0)
      throw Error(ErrorCode::config_invalid, "epochs, steps and batch size must be positive");
    if (!(clip_norm > 0.0)) throw Error(ErrorCode::config_invalid, "clip norm must be positive");
    if (!(learning_rate > 0.0) || weight_decay < 0.0)
      throw Error(ErrorCode::config_invalid, "learning rate must be positive and weight decay >= 0");
  }
};

struct StepRecord {
  std::size_t step = 0;   // 1-based
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;
  double fit_term = 0.0;
  double log_var_term = 0.0;
  double grad_norm = 0.0;  // before clipping, after weight decay
};

struct TrainResult {
  std::vector<StepRecord> history;

  /// Mean loss of each epoch, in order.
  std::vector<double> epoch_means() const {
    std::vector<double> means;
    std::vector<std::size_t> counts;
    for (const auto& r : history) {
      if (means.size() < r.epoch) {
        means.resize(r.epoch, 0.0);
        counts.resize(r.epoch, 0);
      }
      means[r.epoch - 1] += r.loss;
      ++counts[r.epoch - 1];
    }
    for (std::size_t i = 0; i < means.size(); ++i) means[i] /= static_cast<double>(counts[i]);
    return means;
  }
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::function<void(const StepRecord&)> on_step;
};

/// Stream for the augmentation draws of step `step`.
inline RandomStream batch_stream(std::uint64_t seed, std::size_t step) { return RandomStream(seed, {0, step}); }
/// Stream for the dropout masks of step `step`.
inline RandomStream dropout_stream(std::uint64_t seed, std::size_t step) { return RandomStream(seed, {1, step}); }

/// Single optimisation step on a prepared batch: stochastic forward, loss on
/// log targets, backward, coupled weight decay, clipping, Adam.
inline StepRecord train_step(Model& model, AdamState& state, const Batch& batch, const TrainConfig& cfg,
                             RandomStream& dropout) {
  Tape<float> tape;
  const auto params = bind_parameters(model, tape, true);
  const Var<float> x = tape.leaf(batch.input, false);
  const auto out = forward(model, params, x, dropout, true);
  const Var<float> loss = kl_lognormal_loss(out.mu, out.sigma2, batch.target);

  StepRecord rec;
  const auto terms = kl_lognormal_loss_terms(LossInput<float>{batch.target.values(), out.mu.value().values(),
                                                              out.sigma2.value().values()});
  rec.loss = loss.value()[0];
  rec.fit_term = terms.fit;
  rec.log_var_term = terms.log_var;
  if (!std::isfinite(rec.loss)) return rec;

  tape.backward(loss);
  Gradients grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(tape.grad(p));
  add_weight_decay(grads, model, cfg.weight_decay);
  rec.grad_norm = clip_gradients(grads, cfg.clip_norm);
  adam_step(model, grads, state, AdamConfig{cfg.learning_rate});
  return rec;
}

/// Trains in place. Every batch and dropout mask is drawn from streams keyed
/// by (seed, step), so a run is reproducible from its configuration alone.
inline TrainResult train(Model& model, const FrameSet& frames, const TrainConfig& cfg, const AugmentConfig& aug,
                         const TrainOptions& options = {}) {
  cfg.validate();
  aug.validate();
  if (!frames.forces_masked)
    throw Error(ErrorCode::config_invalid, "force maps must be Tukey-masked at ingestion (mask_forces)");
  AdamState state = AdamState::for_model(model);
  TrainResult result;
  for (std::size_t s = 0; s < cfg.total_steps(); ++s) {
    const Batch batch = make_batch(frames, aug, cfg.batch_size, batch_stream(cfg.seed, s));
    RandomStream dropout = dropout_stream(cfg.seed, s);
    StepRecord rec = train_step(model, state, batch, cfg, dropout);
    rec.step = s + 1;
    rec.epoch = s / cfg.steps_per_epoch + 1;
    if (!std::isfinite(rec.loss))
      throw Error(ErrorCode::non_finite_loss, "loss became non-finite at step " + std::to_string(rec.step));
    result.history.push_back(rec);
    if (options.on_step) options.on_step(rec);
  }
  if (options.checkpoint) save_checkpoint(model, *options.checkpoint);
  return result;
}

}  // namespace tfm
