#pragma once

// MC-dropout prediction, per-frame MAE evaluation and per-pixel time series.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tfm/augment.hpp"
#include "tfm/error.hpp"
#include "tfm/frameset.hpp"
#include "tfm/lognormal.hpp"
#include "tfm/model.hpp"
#include "tfm/parallel.hpp"
#include "tfm/random.hpp"

namespace tfm {

struct IntervalMaps {
  double level = 0.0;
  Grid<double> lower;
  Grid<double> upper;
};

struct McPrediction {
  PredictionMoments moments;
  std::vector<IntervalMaps> intervals;  // one per requested level
  MCEnsemble ensemble;
};

/// Central intervals of the single log-normal moment-matched to each pixel's
/// mixture mean and total variance.
inline std::vector<IntervalMaps> interval_maps(const PredictionMoments& m, std::span<const double> levels) {
  std::vector<IntervalMaps> out;
  for (double level : levels) {
    IntervalMaps maps{level, Grid<double>(m.mean.height(), m.mean.width()),
                      Grid<double>(m.mean.height(), m.mean.width())};
    for (std::size_t i = 0; i < m.mean.size(); ++i) {
      const auto iv = central_interval(moment_matched_params(m.mean[i], m.var_total[i]), level);
      maps.lower[i] = iv.lower;
      maps.upper[i] = iv.upper;
    }
    out.push_back(std::move(maps));
  }
  return out;
}

inline Tensor image_to_tensor(const Image& img) {
  return Tensor(Shape{1, 1, img.height(), img.width()}, img.storage());
}

inline Image tensor_plane(const Tensor& t, std::size_t n = 0, std::size_t c = 0) {
  const Shape s = t.shape();
  return Image(s.h, s.w, std::vector<float>(t.plane(n, c), t.plane(n, c) + s.plane()));
}

/// T forward passes on the clipped-log of `raw_input`; pass t draws its
/// dropout masks from stream.split(t). stochastic == false disables dropout
/// (diagnostic only).
inline McPrediction mc_predict(const Model& model, const Image& raw_input, std::size_t samples,
                               const RandomStream& stream, std::span<const double> levels = {},
                               bool stochastic = true) {
  if (samples == 0) throw Error(ErrorCode::empty_ensemble, "need at least one MC sample");
  const Tensor input = image_to_tensor(clipped_log(raw_input));
  std::vector<PointPrediction> passes(samples);
  parallel_for(samples, [&](std::size_t t) {
    RandomStream dropout = stream.split(t);
    passes[t] = predict_once(model, input, dropout, stochastic);
  });
  McPrediction out;
  for (const auto& p : passes) out.ensemble.add(tensor_plane(p.mu), tensor_plane(p.sigma2));
  out.moments = compute_moments(out.ensemble);
  out.intervals = interval_maps(out.moments, levels);
  return out;
}

struct EvalReport {
  std::vector<double> mae;  // per frame, force units
  double mean = 0.0;
  double std = 0.0;  // population
};

inline double mean_absolute_error(const Grid<double>& prediction, const Image& truth) {
  if (prediction.height() != truth.height() || prediction.width() != truth.width())
    throw Error(ErrorCode::shape_mismatch, "prediction and truth differ in shape");
  double sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) sum += std::abs(prediction[i] - static_cast<double>(truth[i]));
  return sum / static_cast<double>(truth.size());
}

inline EvalReport summarize(std::vector<double> mae) {
  EvalReport r;
  r.mae = std::move(mae);
  if (r.mae.empty()) return r;
  double sum = 0.0;
  for (double v : r.mae) sum += v;
  r.mean = sum / static_cast<double>(r.mae.size());
  double ss = 0.0;
  for (double v : r.mae) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(r.mae.size()));
  return r;
}

/// Frame i: MC mean map (stream RandomStream(seed).split(i)) against the
/// masked ground-truth force, in force units over all pixels. No augmentation.
inline EvalReport evaluate_mae(const Model& model, const FrameSet& frames, std::size_t samples,
                               std::uint64_t seed) {
  if (!frames.forces_masked)
    throw Error(ErrorCode::config_invalid, "force maps must be Tukey-masked at ingestion (mask_forces)");
  const RandomStream root(seed);
  std::vector<double> mae;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto pred = mc_predict(model, frames.frames[i].input, samples, root.split(i));
    mae.push_back(mean_absolute_error(pred.moments.mean, frames.frames[i].force));
  }
  return summarize(std::move(mae));
}

struct PixelSample {
  std::size_t frame = 0;
  double truth = 0.0;
  double mean = 0.0;
  std::vector<Interval> bounds;  // one per level
  double entropy_bits = 0.0;
};

inline void check_pixel(std::size_t row, std::size_t col, std::size_t height, std::size_t width) {
  if (row >= height || col >= width)
    throw Error(ErrorCode::pixel_out_of_bounds, "pixel (x=" + std::to_string(col) + ", y=" + std::to_string(row) +
                                                    ") outside frame bounds x in [0," + std::to_string(width) +
                                                    "), y in [0," + std::to_string(height) + ")");
}

/// Ground truth, prediction, interval bounds and entropy at one pixel across
/// all frames. Frame streams match evaluate_mae.
inline std::vector<PixelSample> pixel_timeseries(const Model& model, const FrameSet& frames, std::size_t row,
                                                 std::size_t col, std::size_t samples,
                                                 std::span<const double> levels, std::uint64_t seed) {
  check_pixel(row, col, frames.height(), frames.width());
  const RandomStream root(seed);
  std::vector<PixelSample> series;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto pred = mc_predict(model, frames.frames[i].input, samples, root.split(i), levels);
    const std::size_t idx = row * frames.width() + col;
    PixelSample s;
    s.frame = i;
    s.truth = frames.frames[i].force[idx];
    s.mean = pred.moments.mean[idx];
    for (const auto& iv : pred.intervals) s.bounds.push_back({iv.lower[idx], iv.upper[idx]});
    s.entropy_bits = pred.moments.entropy[idx];
    series.push_back(std::move(s));
  }
  return series;
}

/// Fraction of selected pixels whose truth lies inside [lower, upper].
inline double interval_coverage(const IntervalMaps& iv, const Image& truth, double min_truth) {
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < min_truth) continue;
    ++total;
    if (truth[i] >= iv.lower[i] && truth[i] <= iv.upper[i]) ++hits;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace tfm
