#pragma once

// Batch pipeline: Tukey masking of force maps, cell extraction, flips,
// bicubic rotation, cell-centred cropping, salt noise and the clipped log.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <queue>
#include <vector>

#include "tfm/error.hpp"
#include "tfm/frameset.hpp"
#include "tfm/grid.hpp"
#include "tfm/random.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

struct AugmentConfig {
  std::size_t crop = 256;
  double flip_prob = 0.5;
  double salt_fraction = 0.01;
  double salt_image_prob = 0.5;
  double salt_intensity_max = 2000.0;
  double tukey_alpha = 0.1;
  double rotation_max_deg = 360.0;  // angle drawn uniformly from [0, rotation_max_deg)

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (crop < 32) throw Error(ErrorCode::config_invalid, "crop must be >= 32");
    if (!prob(flip_prob) || !prob(salt_fraction) || !prob(salt_image_prob) || !prob(tukey_alpha))
      throw Error(ErrorCode::config_invalid, "augmentation probabilities must lie in [0, 1]");
    if (!(salt_intensity_max > 0.0)) throw Error(ErrorCode::config_invalid, "salt intensity must be positive");
  }
};

// ---------------------------------------------------------------------------
// Tukey window
// ---------------------------------------------------------------------------

/// Cosine-tapered window of length n; the taper covers a fraction alpha of
/// the window split over both ends. Endpoints are 0 for alpha > 0.
inline std::vector<double> tukey_window(std::size_t n, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::invalid_alpha, "alpha must lie in [0, 1]");
  std::vector<double> w(n, 1.0);
  if (alpha == 0.0 || n <= 1) return w;
  const double span = static_cast<double>(n - 1);
  const std::size_t width = static_cast<std::size_t>(std::floor(alpha * span / 2.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i);
    if (i <= width) {
      w[i] = 0.5 * (1.0 + std::cos(std::numbers::pi * (-1.0 + 2.0 * x / alpha / span)));
    } else if (i >= n - width - 1) {
      w[i] = 0.5 * (1.0 + std::cos(std::numbers::pi * (-2.0 / alpha + 1.0 + 2.0 * x / alpha / span)));
    }
  }
  return w;
}

/// Outer product of two 1-D Tukey windows.
inline Image tukey_window2d(std::size_t height, std::size_t width, double alpha) {
  const auto wy = tukey_window(height, alpha);
  const auto wx = tukey_window(width, alpha);
  Image out(height, width);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = static_cast<float>(wy[r] * wx[c]);
  return out;
}

/// Multiplies every force map by the 2-D Tukey window, once, at ingestion.
inline FrameSet mask_forces(FrameSet fs, double alpha = 0.1) {
  fs.forces_masked = true;
  if (fs.frames.empty()) return fs;
  const Image window = tukey_window2d(fs.height(), fs.width(), alpha);
  for (auto& f : fs.frames) {
    if (!f.force.same_shape(window))
      throw Error(ErrorCode::dimension_mismatch, "force map does not match frameset dims");
    for (std::size_t i = 0; i < window.size(); ++i) f.force[i] *= window[i];
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Cell extraction
// ---------------------------------------------------------------------------

/// Inclusive pixel bounding box.
struct BBox {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;

  double center_row() const { return 0.5 * static_cast<double>(row0 + row1); }
  double center_col() const { return 0.5 * static_cast<double>(col0 + col1); }
  std::size_t area() const { return (row1 - row0 + 1) * (col1 - col0 + 1); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

inline BBox full_frame(std::size_t height, std::size_t width) { return {0, 0, height - 1, width - 1}; }

/// Otsu threshold over the strictly positive pixels (256 bins). Returns a
/// foreground mask; empty foreground when no pixel is positive.
inline Mask otsu_foreground(const Image& image) {
  Mask fg(image.height(), image.width(), 0);
  float lo = 0.0f, hi = 0.0f;
  bool any = false;
  for (float v : image.values()) {
    if (!(v > 0.0f)) continue;
    if (!any) lo = hi = v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    any = true;
  }
  if (!any) return fg;
  if (lo == hi) {
    for (std::size_t i = 0; i < image.size(); ++i) fg[i] = image[i] > 0.0f;
    return fg;
  }
  constexpr int kBins = 256;
  auto bin = [&](float v) {
    const int b = static_cast<int>((static_cast<double>(v) - lo) / (static_cast<double>(hi) - lo) * kBins);
    return std::clamp(b, 0, kBins - 1);
  };
  std::array<double, kBins> hist{};
  double total = 0.0, total_sum = 0.0;
  for (float v : image.values()) {
    if (!(v > 0.0f)) continue;
    const int b = bin(v);
    hist[b] += 1.0;
    total += 1.0;
    total_sum += b;
  }
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int split = 0;
  for (int k = 0; k < kBins - 1; ++k) {
    w0 += hist[k];
    sum0 += k * hist[k];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double d = sum0 / w0 - (total_sum - sum0) / w1;
    const double between = w0 * w1 * d * d;
    if (between > best) {
      best = between;
      split = k;
    }
  }
  for (std::size_t i = 0; i < image.size(); ++i) fg[i] = image[i] > 0.0f && bin(image[i]) > split;
  return fg;
}

namespace detail {

// Box min/max filter with out-of-frame pixels ignored; separable.
inline Mask box_filter(const Mask& in, std::size_t size, bool dilate) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(size / 2);
  const auto h = static_cast<std::ptrdiff_t>(in.height());
  const auto w = static_cast<std::ptrdiff_t>(in.width());
  Mask tmp(in.height(), in.width(), 0), out(in.height(), in.width(), 0);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      bool acc = !dilate;
      for (std::ptrdiff_t dx = std::max<std::ptrdiff_t>(0, x - r); dx <= std::min(w - 1, x + r); ++dx) {
        const bool v = in(y, dx) != 0;
        acc = dilate ? (acc || v) : (acc && v);
      }
      tmp(y, x) = acc;
    }
  }
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      bool acc = !dilate;
      for (std::ptrdiff_t dy = std::max<std::ptrdiff_t>(0, y - r); dy <= std::min(h - 1, y + r); ++dy) {
        const bool v = tmp(dy, x) != 0;
        acc = dilate ? (acc || v) : (acc && v);
      }
      out(y, x) = acc;
    }
  }
  return out;
}

}  // namespace detail

inline Mask dilate(const Mask& m, std::size_t size) { return detail::box_filter(m, size, true); }
inline Mask erode(const Mask& m, std::size_t size) { return detail::box_filter(m, size, false); }
inline Mask morph_close(const Mask& m, std::size_t size) { return erode(dilate(m, size), size); }
inline Mask morph_open(const Mask& m, std::size_t size) { return dilate(erode(m, size), size); }

struct Components {
  Grid<int> labels;                // -1 background, else component index
  std::vector<std::size_t> areas;  // by component index, in raster discovery order
  std::vector<BBox> boxes;
};

/// 4-connected components of the nonzero pixels.
inline Components connected_components(const Mask& m) {
  Components out{Grid<int>(m.height(), m.width(), -1), {}, {}};
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < m.size(); ++start) {
    if (!m[start] || out.labels[start] >= 0) continue;
    const int label = static_cast<int>(out.areas.size());
    BBox box{start / m.width(), start % m.width(), start / m.width(), start % m.width()};
    std::size_t area = 0;
    out.labels[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++area;
      const std::size_t r = i / m.width(), c = i % m.width();
      box.row0 = std::min(box.row0, r);
      box.row1 = std::max(box.row1, r);
      box.col0 = std::min(box.col0, c);
      box.col1 = std::max(box.col1, c);
      auto visit = [&](std::size_t j) {
        if (m[j] && out.labels[j] < 0) {
          out.labels[j] = label;
          stack.push_back(j);
        }
      };
      if (r > 0) visit(i - m.width());
      if (r + 1 < m.height()) visit(i + m.width());
      if (c > 0) visit(i - 1);
      if (c + 1 < m.width()) visit(i + 1);
    }
    out.areas.push_back(area);
    out.boxes.push_back(box);
  }
  return out;
}

/// Index of the largest component (first on ties); nullopt if none.
inline std::optional<std::size_t> largest_component(const Components& cc) {
  if (cc.areas.empty()) return std::nullopt;
  return static_cast<std::size_t>(std::max_element(cc.areas.begin(), cc.areas.end()) - cc.areas.begin());
}

/// Otsu binarisation, 5x5 closing then opening, tight box around the largest
/// 4-connected blob.
inline BBox extract_cell_bbox(const Image& image) {
  const Mask fg = morph_open(morph_close(otsu_foreground(image), 5), 5);
  const auto cc = connected_components(fg);
  const auto best = largest_component(cc);
  if (!best) throw Error(ErrorCode::no_cell_found, "no foreground survives morphology");
  return cc.boxes[*best];
}

inline BBox extract_cell_bbox_or_frame(const Image& image) {
  try {
    return extract_cell_bbox(image);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::no_cell_found) throw;
    return full_frame(image.height(), image.width());
  }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

inline Image flip_horizontal(const Image& in) {
  Image out(in.height(), in.width());
  for (std::size_t r = 0; r < in.height(); ++r)
    for (std::size_t c = 0; c < in.width(); ++c) out(r, c) = in(r, in.width() - 1 - c);
  return out;
}

inline Image flip_vertical(const Image& in) {
  Image out(in.height(), in.width());
  for (std::size_t r = 0; r < in.height(); ++r)
    for (std::size_t c = 0; c < in.width(); ++c) out(r, c) = in(in.height() - 1 - r, c);
  return out;
}

namespace detail {

// Keys cubic convolution kernel, a = -0.5.
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

}  // namespace detail

/// Bicubic sample at fractional (row, col); taps outside the frame read 0.
inline double sample_bicubic(const Image& img, double row, double col) {
  const double fr = std::floor(row), fc = std::floor(col);
  const auto r0 = static_cast<std::ptrdiff_t>(fr), c0 = static_cast<std::ptrdiff_t>(fc);
  const double dr = row - fr, dc = col - fc;
  const auto h = static_cast<std::ptrdiff_t>(img.height()), w = static_cast<std::ptrdiff_t>(img.width());
  double wr[4], wc[4];
  for (int k = 0; k < 4; ++k) {
    wr[k] = detail::cubic_weight(dr - (k - 1));
    wc[k] = detail::cubic_weight(dc - (k - 1));
  }
  double sum = 0.0;
  for (int i = 0; i < 4; ++i) {
    const std::ptrdiff_t r = r0 - 1 + i;
    if (r < 0 || r >= h || wr[i] == 0.0) continue;
    double row_sum = 0.0;
    for (int j = 0; j < 4; ++j) {
      const std::ptrdiff_t c = c0 - 1 + j;
      if (c < 0 || c >= w || wc[j] == 0.0) continue;
      row_sum += wc[j] * img(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    }
    sum += wr[i] * row_sum;
  }
  return sum;
}

/// Rotates content by `degrees` (counter-clockwise as displayed, rows
/// pointing down) about (center_row, center_col). Zero fill; negative
/// overshoot clamped to 0.
inline Image rotate_bicubic(const Image& in, double degrees, double center_row, double center_col) {
  if (degrees == 0.0) return in;
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  Image out(in.height(), in.width());
  for (std::size_t r = 0; r < in.height(); ++r) {
    for (std::size_t c = 0; c < in.width(); ++c) {
      const double dy = static_cast<double>(r) - center_row;
      const double dx = static_cast<double>(c) - center_col;
      // inverse map: rotate the destination offset by -theta
      const double sx = cs * dx - sn * dy;
      const double sy = sn * dx + cs * dy;
      const double v = sample_bicubic(in, center_row + sy, center_col + sx);
      out(r, c) = static_cast<float>(v > 0.0 ? v : 0.0);
    }
  }
  return out;
}

/// size x size window with top-left (row0, col0); pixels outside read 0.
inline Image crop(const Image& in, std::ptrdiff_t row0, std::ptrdiff_t col0, std::size_t size) {
  Image out(size, size, 0.0f);
  const auto h = static_cast<std::ptrdiff_t>(in.height()), w = static_cast<std::ptrdiff_t>(in.width());
  for (std::size_t r = 0; r < size; ++r) {
    const std::ptrdiff_t sr = row0 + static_cast<std::ptrdiff_t>(r);
    if (sr < 0 || sr >= h) continue;
    for (std::size_t c = 0; c < size; ++c) {
      const std::ptrdiff_t sc = col0 + static_cast<std::ptrdiff_t>(c);
      if (sc >= 0 && sc < w) out(r, c) = in(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc));
    }
  }
  return out;
}

/// All geometric choices for one sample; applied identically to every map.
struct GeometricTransform {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
  double center_row = 0.0;  // rotation centre, in flipped coordinates
  double center_col = 0.0;
  std::ptrdiff_t crop_row0 = 0;
  std::ptrdiff_t crop_col0 = 0;
  std::size_t crop = 0;

  Image apply(const Image& img) const {
    Image out = hflip ? flip_horizontal(img) : img;
    if (vflip) out = flip_vertical(out);
    out = rotate_bicubic(out, angle_deg, center_row, center_col);
    return tfm::crop(out, crop_row0, crop_col0, crop);
  }
};

namespace detail {

inline std::ptrdiff_t place_window(std::size_t center, std::size_t crop, std::size_t extent) {
  if (extent < crop) return -static_cast<std::ptrdiff_t>((crop - extent) / 2);
  const auto start = static_cast<std::ptrdiff_t>(center) - static_cast<std::ptrdiff_t>(crop / 2);
  return std::clamp<std::ptrdiff_t>(start, 0, static_cast<std::ptrdiff_t>(extent - crop));
}

}  // namespace detail

/// Draws flips (p = flip_prob each), a rotation angle in [0, 360) (by default) about the
/// cell bbox centre and a crop centre uniform over the rotated cell bbox.
inline GeometricTransform draw_transform(const Image& input, const AugmentConfig& cfg, RandomStream& rng) {
  GeometricTransform t;
  t.crop = cfg.crop;
  t.hflip = rng.bernoulli(cfg.flip_prob);
  t.vflip = rng.bernoulli(cfg.flip_prob);
  t.angle_deg = rng.uniform(0.0, cfg.rotation_max_deg);

  const std::size_t h = input.height(), w = input.width();
  BBox box = extract_cell_bbox_or_frame(input);
  if (t.hflip) box = {box.row0, w - 1 - box.col1, box.row1, w - 1 - box.col0};
  if (t.vflip) box = {h - 1 - box.row1, box.col0, h - 1 - box.row0, box.col1};
  t.center_row = box.center_row();
  t.center_col = box.center_col();

  // Axis-aligned extent of the bbox after rotation, clipped to the frame.
  const double th = t.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::abs(std::cos(th)), sn = std::abs(std::sin(th));
  const double half_h = 0.5 * static_cast<double>(box.row1 - box.row0);
  const double half_w = 0.5 * static_cast<double>(box.col1 - box.col0);
  const double ext_h = cs * half_h + sn * half_w;
  const double ext_w = sn * half_h + cs * half_w;
  auto clip = [](double v, std::size_t extent) {
    return static_cast<std::size_t>(std::clamp(std::lround(v), 0L, static_cast<long>(extent) - 1));
  };
  const std::size_t r0 = clip(t.center_row - ext_h, h), r1 = clip(t.center_row + ext_h, h);
  const std::size_t c0 = clip(t.center_col - ext_w, w), c1 = clip(t.center_col + ext_w, w);
  const std::size_t cy = r0 + static_cast<std::size_t>(rng.below(r1 - r0 + 1));
  const std::size_t cx = c0 + static_cast<std::size_t>(rng.below(c1 - c0 + 1));
  t.crop_row0 = detail::place_window(cy, cfg.crop, h);
  t.crop_col0 = detail::place_window(cx, cfg.crop, w);
  return t;
}

/// Geometric augmentation of one pair: flips, rotation, crop.
inline SamplePair augment_sample(const SamplePair& pair, const AugmentConfig& cfg, RandomStream& rng) {
  if (!pair.input.same_shape(pair.force))
    throw Error(ErrorCode::shape_mismatch, "input and force maps differ in shape");
  const GeometricTransform t = draw_transform(pair.input, cfg, rng);
  SamplePair out{t.apply(pair.input), t.apply(pair.force), std::nullopt};
  if (pair.sigma2) out.sigma2 = t.apply(*pair.sigma2);
  return out;
}

// ---------------------------------------------------------------------------
// Intensity transforms
// ---------------------------------------------------------------------------

/// With probability salt_image_prob, replaces round(salt_fraction * N)
/// distinct pixels by values uniform in [0, salt_intensity_max).
inline Image salt_noise(const Image& image, const AugmentConfig& cfg, RandomStream& rng) {
  if (!rng.bernoulli(cfg.salt_image_prob)) return image;
  Image out = image;
  const std::size_t n = image.size();
  const auto count = static_cast<std::size_t>(std::llround(cfg.salt_fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const float cap = std::nextafter(static_cast<float>(cfg.salt_intensity_max), 0.0f);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(order[i], order[j]);
    out[order[i]] = std::min(static_cast<float>(rng.uniform(0.0, cfg.salt_intensity_max)), cap);
  }
  return out;
}

/// ln(max(1, x)) elementwise.
inline Image clipped_log(const Image& image) {
  Image out(image.height(), image.width());
  for (std::size_t i = 0; i < image.size(); ++i)
    out[i] = static_cast<float>(std::log(std::max(1.0, static_cast<double>(image[i]))));
  return out;
}

struct Batch {
  Tensor input;   // (B, 1, crop, crop), log domain
  Tensor target;  // (B, 1, crop, crop), log force
};

/// One training batch. Item i uses sub-stream rng.split(i): frame choice,
/// geometric augmentation, salt noise on the input, clipped log on both maps.
inline Batch make_batch(const FrameSet& frames, const AugmentConfig& cfg, std::size_t batch_size,
                        const RandomStream& rng) {
  cfg.validate();
  if (frames.frames.empty()) throw Error(ErrorCode::dimension_mismatch, "frameset is empty");
  const std::size_t s = cfg.crop;
  Batch b{Tensor(Shape{batch_size, 1, s, s}), Tensor(Shape{batch_size, 1, s, s})};
  for (std::size_t i = 0; i < batch_size; ++i) {
    RandomStream item = rng.split(i);
    const auto& pair = frames.frames[item.below(frames.frames.size())];
    const SamplePair aug = augment_sample(pair, cfg, item);
    const Image input = clipped_log(salt_noise(aug.input, cfg, item));
    const Image target = clipped_log(aug.force);
    std::copy(input.values().begin(), input.values().end(), b.input.plane(i, 0));
    std::copy(target.values().begin(), target.values().end(), b.target.plane(i, 0));
  }
  return b;
}

}  // namespace tfm
