#pragma once

// Closed-form log-normal calculus: the heteroscedastic log-domain loss, the
// moments of a T-component log-normal mixture (MC-dropout ensemble),
// coefficient of variation, predictive entropy and quantiles.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "tfm/error.hpp"
#include "tfm/grid.hpp"

namespace tfm {

/// ln(1 + exp(x))^2, the variance-head activation.
inline double softplus_sq(double x) {
  const double sp = x > 30.0 ? x : std::log1p(std::exp(x));
  return sp * sp;
}

struct LogNormalParams {
  double mu = 0.0;
  double sigma2 = 0.0;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <class T>
struct LossInput {
  std::span<const T> target_logmu;
  std::span<const T> pred_mu;
  std::span<const T> pred_sigma2;

  std::size_t size() const { return target_logmu.size(); }
};

/// The two summands of the loss, each already divided by n.
struct LossTerms {
  double fit = 0.0;      // (1/n) sum (mu - mu_hat)^2 / (2 sigma2_hat)
  double log_var = 0.0;  // (1/n) sum 0.5 ln sigma2_hat

  double total() const { return fit + log_var; }
};

namespace detail {

template <class T>
void check_loss_input(const LossInput<T>& in) {
  if (in.pred_mu.size() != in.size() || in.pred_sigma2.size() != in.size())
    throw Error(ErrorCode::shape_mismatch, "loss maps differ in size");
  if (in.size() == 0) throw Error(ErrorCode::shape_mismatch, "loss over zero pixels");
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!(in.pred_sigma2[i] > T(0)))
      throw Error(ErrorCode::non_positive_variance,
                  "predicted variance at pixel " + std::to_string(i) + " is not positive");
  }
}

}  // namespace detail

template <class T>
LossTerms kl_lognormal_loss_terms(const LossInput<T>& in) {
  detail::check_loss_input(in);
  double fit = 0.0;
  double log_var = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double r = static_cast<double>(in.target_logmu[i]) - static_cast<double>(in.pred_mu[i]);
    const double s2 = static_cast<double>(in.pred_sigma2[i]);
    fit += r * r / (2.0 * s2);
    log_var += 0.5 * std::log(s2);
  }
  const double n = static_cast<double>(in.size());
  return {fit / n, log_var / n};
}

/// (1/n) sum_i [ (mu_i - mu_hat_i)^2 / (2 sigma2_hat_i) + 0.5 ln sigma2_hat_i ]
template <class T>
double kl_lognormal_loss(const LossInput<T>& in) {
  return kl_lognormal_loss_terms(in).total();
}

/// Writes upstream * dL/dmu_hat and upstream * dL/dsigma2_hat.
template <class T>
void kl_lognormal_loss_gradient(const LossInput<T>& in, std::span<T> d_mu, std::span<T> d_sigma2,
                                double upstream = 1.0) {
  detail::check_loss_input(in);
  if (d_mu.size() != in.size() || d_sigma2.size() != in.size())
    throw Error(ErrorCode::shape_mismatch, "gradient buffers differ in size from loss maps");
  const double scale = upstream / static_cast<double>(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double r = static_cast<double>(in.target_logmu[i]) - static_cast<double>(in.pred_mu[i]);
    const double s2 = static_cast<double>(in.pred_sigma2[i]);
    d_mu[i] = static_cast<T>(scale * (-r / s2));
    d_sigma2[i] = static_cast<T>(scale * (0.5 / s2 - r * r / (2.0 * s2 * s2)));
  }
}

// ---------------------------------------------------------------------------
// Per-pixel mixture statistics
// ---------------------------------------------------------------------------

struct VarianceDecomposition {
  double total = 0.0;
  double aleatoric = 0.0;
  double epistemic = 0.0;      // clamped to >= 0
  double epistemic_raw = 0.0;  // before clamping
};

namespace detail {

inline void require_nonempty(std::span<const LogNormalParams> samples) {
  if (samples.empty()) throw Error(ErrorCode::empty_ensemble, "ensemble has no samples");
}

inline double component_mean(const LogNormalParams& p) { return std::exp(p.mu + 0.5 * p.sigma2); }

}  // namespace detail

/// (1/T) sum_t exp(mu_t + sigma2_t / 2)
inline double mixture_mean(std::span<const LogNormalParams> samples) {
  detail::require_nonempty(samples);
  double sum = 0.0;
  for (const auto& p : samples) sum += detail::component_mean(p);
  return sum / static_cast<double>(samples.size());
}

/// Aleatoric part: mean of the component variances exp(2mu+s2)(exp(s2)-1).
/// Epistemic part: spread of the component means m_t around the mixture mean,
/// (1/T) sum m_t^2 - mean^2, evaluated in centred form; exactly 0 when every
/// m_t is the same number.
inline VarianceDecomposition mixture_variance(std::span<const LogNormalParams> samples) {
  detail::require_nonempty(samples);
  const double t = static_cast<double>(samples.size());
  const double mean = mixture_mean(samples);
  const double first = detail::component_mean(samples.front());
  bool identical = true;
  double aleatoric = 0.0;
  double epistemic = 0.0;
  for (const auto& p : samples) {
    aleatoric += std::exp(2.0 * p.mu + p.sigma2) * std::expm1(p.sigma2);
    const double m = detail::component_mean(p);
    identical = identical && m == first;
    epistemic += (m - mean) * (m - mean);
  }
  VarianceDecomposition out;
  out.aleatoric = aleatoric / t;
  out.epistemic_raw = identical ? 0.0 : epistemic / t;
  out.epistemic = out.epistemic_raw < 0.0 ? 0.0 : out.epistemic_raw;
  out.total = out.aleatoric + out.epistemic;
  return out;
}

/// (1/T) sum_t sqrt(exp(sigma2_t) - 1); independent of mu.
inline double coefficient_of_variation(std::span<const LogNormalParams> samples) {
  detail::require_nonempty(samples);
  double sum = 0.0;
  for (const auto& p : samples) sum += std::sqrt(std::expm1(p.sigma2));
  return sum / static_cast<double>(samples.size());
}

/// (1/T) sum_t log2(sigma_t exp(mu_t + 1/2) / sqrt(2 pi)), in bits.
///
/// Note the 1/sqrt(2 pi): the textbook log-normal differential entropy has
/// sqrt(2 pi) in the numerator, so values here are log2(2 pi) bits lower.
/// Kept in this form deliberately.
inline double predictive_entropy(std::span<const LogNormalParams> samples) {
  detail::require_nonempty(samples);
  const double half_log2_two_pi = 0.5 * std::log2(2.0 * std::numbers::pi);
  double sum = 0.0;
  for (const auto& p : samples) {
    if (!(p.sigma2 > 0.0))
      throw Error(ErrorCode::zero_variance, "entropy undefined for zero variance component");
    sum += 0.5 * std::log2(p.sigma2) + (p.mu + 0.5) * std::numbers::log2e - half_log2_two_pi;
  }
  return sum / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Quantiles
// ---------------------------------------------------------------------------

/// Log-normal with the given mean and variance.
inline LogNormalParams moment_matched_params(double mean, double var) {
  if (!(mean > 0.0)) throw Error(ErrorCode::non_positive_mean, "mean must be positive");
  if (var < 0.0) var = 0.0;
  const double m2 = mean * mean;
  return {std::log(m2 / std::sqrt(m2 + var)), std::log1p(var / m2)};
}

namespace detail {

// Lower-half inverse normal CDF, q in (0, 0.5].
inline double normal_inv_cdf_lower(double q) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double q_low = 0.02425;

  if (q == 0.5) return 0.0;
  double x;
  if (q < q_low) {
    const double r = std::sqrt(-2.0 * std::log(q));
    x = (((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) /
        ((((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0);
  } else {
    const double s = q - 0.5;
    const double r = s * s;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * s /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  // One Halley step against erfc brings the rational estimate to full precision.
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - q;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

}  // namespace detail

/// Standard normal inverse CDF. Odd-symmetric: f(q) == -f(1 - q) whenever
/// 1 - q is exact.
inline double normal_inv_cdf(double q) {
  if (!(q > 0.0 && q < 1.0))
    throw Error(ErrorCode::quantile_out_of_range, "probability must lie in (0, 1)");
  if (q > 0.5) return -detail::normal_inv_cdf_lower(1.0 - q);
  return detail::normal_inv_cdf_lower(q);
}

inline double lognormal_quantile(const LogNormalParams& p, double q) {
  return std::exp(p.mu + std::sqrt(p.sigma2 < 0.0 ? 0.0 : p.sigma2) * normal_inv_cdf(q));
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

/// Central interval of probability `level`: quantiles (1-level)/2 and (1+level)/2.
inline Interval central_interval(const LogNormalParams& p, double level) {
  if (!(level > 0.0 && level < 1.0))
    throw Error(ErrorCode::quantile_out_of_range, "interval level must lie in (0, 1)");
  return {lognormal_quantile(p, 0.5 * (1.0 - level)), lognormal_quantile(p, 0.5 * (1.0 + level))};
}

// ---------------------------------------------------------------------------
// Map-level ensemble
// ---------------------------------------------------------------------------

/// T stochastic forward-pass outputs for one input.
class MCEnsemble {
 public:
  struct Member {
    Image mu;
    Image sigma2;
  };

  MCEnsemble() = default;
  MCEnsemble(std::size_t height, std::size_t width) : height_(height), width_(width) {}

  void add(Image mu, Image sigma2) {
    if (members_.empty() && height_ == 0 && width_ == 0) {
      height_ = mu.height();
      width_ = mu.width();
    }
    if (mu.height() != height_ || mu.width() != width_ || !mu.same_shape(sigma2))
      throw Error(ErrorCode::shape_mismatch, "ensemble members must share one shape");
    members_.push_back({std::move(mu), std::move(sigma2)});
  }

  std::size_t size() const { return members_.size(); }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  const std::vector<Member>& members() const { return members_; }

  /// Per-sample parameters at flat pixel index i, in sample order.
  std::vector<LogNormalParams> at(std::size_t i) const {
    std::vector<LogNormalParams> out;
    out.reserve(members_.size());
    for (const auto& m : members_) out.push_back({m.mu[i], m.sigma2[i]});
    return out;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<Member> members_;
};

struct PredictionMoments {
  Grid<double> mean;
  Grid<double> var_total;
  Grid<double> var_aleatoric;
  Grid<double> var_epistemic;
  Grid<double> cv;
  Grid<double> entropy;  // bits; NaN where some component has zero variance
};

/// Applies the per-pixel mixture statistics to every pixel of the ensemble.
inline PredictionMoments compute_moments(const MCEnsemble& ens) {
  if (ens.size() == 0) throw Error(ErrorCode::empty_ensemble, "ensemble has no samples");
  const std::size_t h = ens.height();
  const std::size_t w = ens.width();
  PredictionMoments out{Grid<double>(h, w), Grid<double>(h, w), Grid<double>(h, w),
                        Grid<double>(h, w), Grid<double>(h, w), Grid<double>(h, w)};
  std::vector<LogNormalParams> px(ens.size());
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t t = 0; t < ens.size(); ++t)
      px[t] = {ens.members()[t].mu[i], ens.members()[t].sigma2[i]};
    const auto var = mixture_variance(px);
    out.mean[i] = mixture_mean(px);
    out.var_total[i] = var.total;
    out.var_aleatoric[i] = var.aleatoric;
    out.var_epistemic[i] = var.epistemic;
    out.cv[i] = coefficient_of_variation(px);
    bool positive = true;
    for (const auto& p : px) positive = positive && p.sigma2 > 0.0;
    out.entropy[i] = positive ? predictive_entropy(px) : std::nan("");
  }
  return out;
}

}  // namespace tfm
