#pragma once

// Synthetic (cell image, traction map) pairs. Cells are star-convex blobs;
// traction decays exponentially with distance from the cell edge, so the
// force is a deterministic function of geometry that is recoverable from the
// fluorescence image.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "tfm/augment.hpp"
#include "tfm/error.hpp"
#include "tfm/frameset.hpp"
#include "tfm/grid.hpp"
#include "tfm/parallel.hpp"
#include "tfm/random.hpp"

namespace tfm {

inline constexpr std::size_t kMaxHarmonics = 8;

struct ShapeParams {
  double center_row = 0.0;
  double center_col = 0.0;
  double base_radius = 1.0;
  std::vector<double> amplitude;  // harmonic k+1
  std::vector<double> phase;
  std::size_t protrusions = 0;
  double protrusion_height = 0.0;  // relative to base radius
  double protrusion_sharpness = 1.0;
  double protrusion_phase = 0.0;

  /// r(theta) = r0 (1 + sum_k a_k cos(k theta + phi_k) + b max(0, cos(m (theta - psi)))^s)
  double radius(double theta) const {
    double rel = 1.0;
    for (std::size_t k = 0; k < amplitude.size(); ++k)
      rel += amplitude[k] * std::cos(static_cast<double>(k + 1) * theta + phase[k]);
    if (protrusions > 0 && protrusion_height > 0.0) {
      const double c = std::cos(static_cast<double>(protrusions) * (theta - protrusion_phase));
      if (c > 0.0) rel += protrusion_height * std::pow(c, protrusion_sharpness);
    }
    return base_radius * rel;
  }
};

/// Pixel centres within r(theta) of the centre, reduced to the largest
/// 4-connected component.
inline Mask rasterize_shape(const ShapeParams& p, std::size_t height, std::size_t width) {
  Mask m(height, width, 0);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double dy = static_cast<double>(r) - p.center_row;
      const double dx = static_cast<double>(c) - p.center_col;
      const double d = std::hypot(dx, dy);
      m(r, c) = d <= p.radius(std::atan2(dy, dx));
    }
  }
  const auto cc = connected_components(m);
  const auto best = largest_component(cc);
  if (!best) return m;
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = cc.labels[i] == static_cast<int>(*best);
  return m;
}

struct GeneratedShape {
  ShapeParams params;
  Mask mask;
};

/// Random cell outline inside a height x width frame, kept clear of the
/// border.
inline GeneratedShape generate_shape(RandomStream& rng, std::size_t height, std::size_t width) {
  const double side = static_cast<double>(std::min(height, width));
  for (int attempt = 0; attempt < 100; ++attempt) {
    ShapeParams p;
    p.base_radius = side * rng.uniform(0.17, 0.25);
    p.center_row = 0.5 * static_cast<double>(height - 1) + rng.uniform(-0.08, 0.08) * side;
    p.center_col = 0.5 * static_cast<double>(width - 1) + rng.uniform(-0.08, 0.08) * side;
    const std::size_t harmonics = 2 + static_cast<std::size_t>(rng.below(kMaxHarmonics - 1));
    double budget = 0.0;
    for (std::size_t k = 0; k < harmonics; ++k) {
      p.amplitude.push_back(rng.uniform(0.0, 0.3) / static_cast<double>(k + 1));
      p.phase.push_back(rng.uniform(0.0, 2.0 * std::numbers::pi));
      budget += p.amplitude.back();
    }
    p.protrusions = 1 + static_cast<std::size_t>(rng.below(4));
    p.protrusion_height = rng.uniform(0.0, 0.5);
    p.protrusion_sharpness = rng.uniform(2.0, 8.0);
    p.protrusion_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    // The harmonic sum is bounded by `budget`; protrusions only add.
    if (budget >= 0.9) continue;
    double reach = 0.0;
    for (int i = 0; i < 720; ++i) reach = std::max(reach, p.radius(2.0 * std::numbers::pi * i / 720.0));
    if (p.center_row - reach < 3.0 || p.center_col - reach < 3.0 ||
        p.center_row + reach > static_cast<double>(height) - 4.0 ||
        p.center_col + reach > static_cast<double>(width) - 4.0)
      continue;
    Mask mask = rasterize_shape(p, height, width);
    if (std::count(mask.values().begin(), mask.values().end(), 1) == 0) continue;
    return {std::move(p), std::move(mask)};
  }
  throw Error(ErrorCode::degenerate_shape, "no valid shape after 100 attempts");
}

// ---------------------------------------------------------------------------
// Distance transform
// ---------------------------------------------------------------------------

namespace detail {

// 1-D squared-distance transform by lower envelope of parabolas.
inline void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  // infinite samples never lie on the envelope
  std::size_t first = 0;
  while (first < n && f[first] == inf) ++first;
  if (first == n) {
    std::fill(d, d + n, inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    const double qd = static_cast<double>(q);
    double s;
    while (true) {
      const double vk = static_cast<double>(v[k]);
      s = ((f[q] + qd * qd) - (f[v[k]] + vk * vk)) / (2.0 * qd - 2.0 * vk);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const double dv = qd - static_cast<double>(v[k]);
    d[q] = dv * dv + f[v[k]];
  }
}

}  // namespace detail

/// For every pixel of `mask`, the Euclidean distance to the nearest pixel
/// that is not in the mask; the frame is surrounded by background. Outside
/// pixels get 0. Exact (two separable passes over squared distances).
inline Grid<double> distance_to_boundary(const Mask& mask) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::size_t h = mask.height() + 2, w = mask.width() + 2;
  std::vector<double> grid(h * w, 0.0);
  for (std::size_t r = 0; r < mask.height(); ++r)
    for (std::size_t c = 0; c < mask.width(); ++c) grid[(r + 1) * w + c + 1] = mask(r, c) ? inf : 0.0;
  std::vector<std::size_t> v;
  std::vector<double> z, f(std::max(h, w)), d(std::max(h, w));
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) f[r] = grid[r * w + c];
    detail::edt_1d(f.data(), d.data(), h, v, z);
    for (std::size_t r = 0; r < h; ++r) grid[r * w + c] = d[r];
  }
  for (std::size_t r = 0; r < h; ++r) {
    detail::edt_1d(grid.data() + r * w, d.data(), w, v, z);
    std::copy(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(w), grid.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  Grid<double> out(mask.height(), mask.width());
  for (std::size_t r = 0; r < mask.height(); ++r)
    for (std::size_t c = 0; c < mask.width(); ++c) out(r, c) = std::sqrt(grid[(r + 1) * w + c + 1]);
  return out;
}

/// A exp(-d / tau) inside the mask, 0 outside.
inline Image geometry_force_field(const Mask& mask, double amplitude, double decay) {
  if (std::count(mask.values().begin(), mask.values().end(), 1) == 0)
    throw Error(ErrorCode::empty_mask, "force field needs a nonempty mask");
  const auto dist = distance_to_boundary(mask);
  Image out(mask.height(), mask.width(), 0.0f);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = static_cast<float>(amplitude * std::exp(-dist[i] / decay));
  return out;
}

// ---------------------------------------------------------------------------
// Fluorescence rendering
// ---------------------------------------------------------------------------

inline Image gaussian_blur(const Image& in, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) norm += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= norm;
  const auto h = static_cast<std::ptrdiff_t>(in.height()), w = static_cast<std::ptrdiff_t>(in.width());
  auto at = [](std::ptrdiff_t i, std::ptrdiff_t n) { return std::clamp<std::ptrdiff_t>(i, 0, n - 1); };
  Image tmp(in.height(), in.width()), out(in.height(), in.width());
  for (std::ptrdiff_t r = 0; r < h; ++r)
    for (std::ptrdiff_t c = 0; c < w; ++c) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * in(r, at(c + i, w));
      tmp(r, c) = static_cast<float>(s);
    }
  for (std::ptrdiff_t r = 0; r < h; ++r)
    for (std::ptrdiff_t c = 0; c < w; ++c) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp(at(r + i, h), c);
      out(r, c) = static_cast<float>(s);
    }
  return out;
}

struct FluorescenceParams {
  double interior = 800.0;
  double interior_modulation = 0.25;
  double background = 20.0;
  double blur_sigma = 1.0;
};

/// Bright cell body with smooth low-frequency texture over a dim, noisy
/// background, blurred. Carries geometry only, never the force itself.
inline Image render_fluorescence(const Mask& mask, RandomStream& rng, const FluorescenceParams& fp = {}) {
  const std::size_t h = mask.height(), w = mask.width();
  constexpr int kWaves = 4;
  double fy[kWaves], fx[kWaves], ph[kWaves];
  for (int i = 0; i < kWaves; ++i) {
    fy[i] = rng.uniform(-3.0, 3.0) * 2.0 * std::numbers::pi / static_cast<double>(h);
    fx[i] = rng.uniform(-3.0, 3.0) * 2.0 * std::numbers::pi / static_cast<double>(w);
    ph[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  Image img(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double v;
      if (mask(r, c)) {
        double texture = 0.0;
        for (int i = 0; i < kWaves; ++i) texture += std::cos(fy[i] * r + fx[i] * c + ph[i]);
        v = fp.interior * (1.0 + fp.interior_modulation * texture / kWaves);
      } else {
        v = fp.background + std::sqrt(fp.background) * rng.normal();
      }
      img(r, c) = static_cast<float>(std::max(0.0, v));
    }
  }
  return gaussian_blur(img, fp.blur_sigma);
}

// ---------------------------------------------------------------------------
// Frame sets
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t frames = 20;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;
  bool heteroscedastic = false;
  double amplitude_min = 800.0;
  double amplitude_max = 2000.0;
  double decay_min = 2.0;
  double decay_max = 4.0;
  double hetero_sigma2_max = 0.5;  // log-variance at the peak force

  void validate() const {
    if (frames == 0) throw Error(ErrorCode::config_invalid, "frame count must be positive");
    if (height < 16 || width < 16) throw Error(ErrorCode::config_invalid, "frames must be at least 16x16");
  }
};

/// Frame i is a pure function of (seed, i). In heteroscedastic mode the force
/// is multiplied by exp(sqrt(s2) z), z ~ N(0,1), with s2 proportional to the
/// local noiseless force; the true s2 map is stored with the frame.
inline SamplePair generate_frame(const SynthConfig& cfg, std::size_t index) {
  RandomStream rng(cfg.seed, {index});
  RandomStream shape_rng = rng.split(0);
  RandomStream render_rng = rng.split(1);
  RandomStream noise_rng = rng.split(2);
  const auto shape = generate_shape(shape_rng, cfg.height, cfg.width);
  const double amplitude = shape_rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
  const double decay = shape_rng.uniform(cfg.decay_min, cfg.decay_max);
  SamplePair pair;
  pair.force = geometry_force_field(shape.mask, amplitude, decay);
  pair.input = render_fluorescence(shape.mask, render_rng);
  if (cfg.heteroscedastic) {
    Image s2(cfg.height, cfg.width, 0.0f);
    for (std::size_t i = 0; i < s2.size(); ++i) {
      s2[i] = static_cast<float>(cfg.hetero_sigma2_max * pair.force[i] / amplitude);
      const double z = noise_rng.normal();
      pair.force[i] = static_cast<float>(pair.force[i] * std::exp(std::sqrt(static_cast<double>(s2[i])) * z));
    }
    pair.sigma2 = std::move(s2);
  }
  return pair;
}

inline FrameSet generate_frameset(const SynthConfig& cfg) {
  cfg.validate();
  FrameSet fs;
  fs.manifest.width = cfg.width;
  fs.manifest.height = cfg.height;
  fs.manifest.frames = cfg.frames;
  fs.manifest.has_sigma2 = cfg.heteroscedastic;
  fs.manifest.generator = {{"name", "synthetic-star-cells"},
                           {"seed", cfg.seed},
                           {"heteroscedastic", cfg.heteroscedastic},
                           {"amplitude", {cfg.amplitude_min, cfg.amplitude_max}},
                           {"decay", {cfg.decay_min, cfg.decay_max}},
                           {"hetero_sigma2_max", cfg.hetero_sigma2_max}};
  fs.frames.resize(cfg.frames);
  parallel_for(cfg.frames, [&](std::size_t i) { fs.frames[i] = generate_frame(cfg, i); });
  return fs;
}

}  // namespace tfm
