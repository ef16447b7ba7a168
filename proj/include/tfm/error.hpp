#pragma once

#include <stdexcept>
#include <string>

namespace tfm {

enum class ErrorCode {
  shape_mismatch,
  odd_spatial_dims,
  invalid_rate,
  non_scalar_loss,
  non_positive_variance,
  zero_variance,
  empty_ensemble,
  non_positive_mean,
  quantile_out_of_range,
  config_invalid,
  indivisible_input,
  invalid_alpha,
  no_cell_found,
  degenerate_shape,
  empty_mask,
  manifest_missing,
  truncated_frame,
  dimension_mismatch,
  non_finite_gradient,
  non_finite_loss,
  pixel_out_of_bounds,
  checksum_mismatch,
  io_error,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "ShapeMismatch";
    case ErrorCode::odd_spatial_dims: return "OddSpatialDims";
    case ErrorCode::invalid_rate: return "InvalidRate";
    case ErrorCode::non_scalar_loss: return "NonScalarLoss";
    case ErrorCode::non_positive_variance: return "NonPositiveVariance";
    case ErrorCode::zero_variance: return "ZeroVariance";
    case ErrorCode::empty_ensemble: return "EmptyEnsemble";
    case ErrorCode::non_positive_mean: return "NonPositiveMean";
    case ErrorCode::quantile_out_of_range: return "QuantileOutOfRange";
    case ErrorCode::config_invalid: return "ConfigInvalid";
    case ErrorCode::indivisible_input: return "IndivisibleInput";
    case ErrorCode::invalid_alpha: return "InvalidAlpha";
    case ErrorCode::no_cell_found: return "NoCellFound";
    case ErrorCode::degenerate_shape: return "DegenerateShape";
    case ErrorCode::empty_mask: return "EmptyMask";
    case ErrorCode::manifest_missing: return "ManifestMissing";
    case ErrorCode::truncated_frame: return "TruncatedFrame";
    case ErrorCode::dimension_mismatch: return "DimensionMismatch";
    case ErrorCode::non_finite_gradient: return "NonFiniteGradient";
    case ErrorCode::non_finite_loss: return "NonFiniteLoss";
    case ErrorCode::pixel_out_of_bounds: return "PixelOutOfBounds";
    case ErrorCode::checksum_mismatch: return "ChecksumMismatch";
    case ErrorCode::io_error: return "IoError";
  }
  return "Unknown";
}

/// Single exception type for the library; `code()` identifies the failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tfm
