#pragma once

// Dense-block encoder/decoder (FC-DenseNet family) with two per-pixel heads:
// a linear log-force mean and a softplus-squared log-variance.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tfm/autograd.hpp"
#include "tfm/error.hpp"
#include "tfm/random.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

enum class Preset : std::uint32_t { custom = 0, desk = 1, paper = 2 };

inline const char* to_string(Preset p) {
  switch (p) {
    case Preset::desk: return "desk";
    case Preset::paper: return "paper";
    case Preset::custom: return "custom";
  }
  return "custom";
}

struct ModelConfig {
  std::size_t input_channels = 1;
  std::size_t down_blocks = 3;
  std::size_t layers_per_block = 2;
  std::size_t growth_rate = 8;
  std::size_t first_conv_filters = 16;
  std::size_t up_conv_filters = 32;
  double dropout_rate = 0.2;
  Preset preset = Preset::desk;

  /// 5 down blocks + bottleneck, 5 layers per block, growth 16, 48 initial
  /// filters, 128 up-path filters, 20% dropout.
  static ModelConfig paper() { return {1, 5, 5, 16, 48, 128, 0.2, Preset::paper}; }

  /// Scaled-down variant that trains on a single CPU core.
  static ModelConfig desk() { return {1, 3, 2, 8, 16, 32, 0.2, Preset::desk}; }

  void validate() const {
    if (input_channels < 1 || down_blocks < 1 || layers_per_block < 1 || growth_rate < 1 ||
        first_conv_filters < 1 || up_conv_filters < 1)
      throw Error(ErrorCode::config_invalid, "model counts must all be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw Error(ErrorCode::config_invalid, "dropout rate must lie in [0, 1)");
  }

  /// Input height and width must be multiples of this.
  std::size_t size_multiple() const { return std::size_t{1} << down_blocks; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One convolution in the architecture, in execution order.
struct ConvSpec {
  std::string name;
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t kernel;
};

/// Every convolution of the network in the order forward() consumes them.
inline std::vector<ConvSpec> architecture(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ConvSpec> convs;
  const std::size_t g = cfg.growth_rate;
  const std::size_t layers = cfg.layers_per_block;
  auto dense_block = [&](const std::string& prefix, std::size_t& channels) {
    for (std::size_t l = 0; l < layers; ++l)
      convs.push_back({prefix + "/layer" + std::to_string(l), channels + l * g, g, 3});
    channels += layers * g;
  };

  std::size_t c = cfg.first_conv_filters;
  convs.push_back({"initial", cfg.input_channels, c, 3});
  std::vector<std::size_t> skip(cfg.down_blocks);
  for (std::size_t d = 0; d < cfg.down_blocks; ++d) {
    const std::string prefix = "down" + std::to_string(d);
    dense_block(prefix, c);
    skip[d] = c;
    convs.push_back({prefix + "/transition", c, c, 1});
  }
  dense_block("bottleneck", c);
  for (std::size_t u = 0; u < cfg.down_blocks; ++u) {
    const std::string prefix = "up" + std::to_string(u);
    convs.push_back({prefix + "/conv", c, cfg.up_conv_filters, 3});
    c = cfg.up_conv_filters + skip[cfg.down_blocks - 1 - u];
    dense_block(prefix, c);
  }
  convs.push_back({"head_mean", c, 1, 1});
  convs.push_back({"head_var", c, 1, 1});
  return convs;
}

struct Parameter {
  std::string name;
  std::vector<std::size_t> dims;  // kernel: (out, in, k, k); bias: (out)
  Tensor value;
};

class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<Parameter> params) : config_(config), params_(std::move(params)) {
    index();
  }

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  const Parameter& parameter(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw Error(ErrorCode::config_invalid, "no parameter named " + name);
    return params_[it->second];
  }

  std::size_t count_params() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.numel();
    return total;
  }

 private:
  void index() {
    by_name_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) by_name_[params_[i].name] = i;
  }

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

/// Kernel/bias parameter pairs for the architecture, all zero-valued.
inline std::vector<Parameter> parameter_layout(const ModelConfig& cfg) {
  std::vector<Parameter> params;
  for (const auto& conv : architecture(cfg)) {
    params.push_back({conv.name + "/kernel",
                      {conv.out_channels, conv.in_channels, conv.kernel, conv.kernel},
                      Tensor(Shape{conv.out_channels, conv.in_channels, conv.kernel, conv.kernel})});
    params.push_back({conv.name + "/bias", {conv.out_channels}, Tensor(Shape{conv.out_channels, 1, 1, 1})});
  }
  return params;
}

/// Glorot-normal kernels drawn in layout order from `seed`, zero biases; the
/// variance head starts with a zero kernel and bias ln(e - 1) so that its
/// initial output is exactly 1.
inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto params = parameter_layout(cfg);
  RandomStream rng(seed);
  for (auto& p : params) {
    const bool is_kernel = p.dims.size() == 4;
    if (p.name.rfind("head_var/", 0) == 0) {
      p.value.fill(is_kernel ? 0.0f : static_cast<float>(std::log(std::expm1(1.0))));
      continue;
    }
    if (!is_kernel) continue;
    const double receptive = static_cast<double>(p.dims[2] * p.dims[3]);
    const double fan_in = static_cast<double>(p.dims[1]) * receptive;
    const double fan_out = static_cast<double>(p.dims[0]) * receptive;
    const double stddev = std::sqrt(2.0 / (fan_in + fan_out));
    for (auto& w : p.value.values()) w = static_cast<float>(rng.normal(0.0, stddev));
  }
  return Model(cfg, std::move(params));
}

/// Places every parameter on the tape as a leaf, in layout order.
inline std::vector<Var<float>> bind_parameters(const Model& model, Tape<float>& tape, bool requires_grad) {
  std::vector<Var<float>> vars;
  vars.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) vars.push_back(tape.leaf(p.value, requires_grad));
  return vars;
}

struct ForwardOutput {
  Var<float> mu;
  Var<float> sigma2;
};

/// Builds the graph for a (N, C, H, W) input. With `stochastic` every dropout
/// layer draws a mask from `dropout_stream`; this is the mode used for both
/// training and MC inference. stochastic == false disables dropout.
inline ForwardOutput forward(const Model& model, std::span<const Var<float>> params, Var<float> input,
                             RandomStream& dropout_stream, bool stochastic) {
  const ModelConfig& cfg = model.config();
  const Shape s = input.shape();
  if (s.c != cfg.input_channels)
    throw Error(ErrorCode::shape_mismatch, "model expects " + std::to_string(cfg.input_channels) +
                                               " input channels, got " + s.str());
  const std::size_t m = cfg.size_multiple();
  if (s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0)
    throw Error(ErrorCode::indivisible_input, "input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                                  " is not divisible by " + std::to_string(m));
  if (params.size() != model.parameters().size())
    throw Error(ErrorCode::shape_mismatch, "parameter binding does not match the model");

  std::size_t cursor = 0;
  auto conv = [&](Var<float> x, Padding pad) {
    Var<float> k = params[cursor++];
    Var<float> b = params[cursor++];
    return conv2d(x, k, b, pad);
  };
  auto drop = [&](Var<float> x) {
    return stochastic ? dropout(x, cfg.dropout_rate, dropout_stream) : x;
  };
  auto dense_block = [&](Var<float> x) {
    std::vector<Var<float>> features{x};
    for (std::size_t l = 0; l < cfg.layers_per_block; ++l) {
      Var<float> in = features.size() == 1 ? features.front() : concat_channels<float>(features);
      features.push_back(drop(conv(relu(in), Padding::same)));
    }
    return concat_channels<float>(features);
  };

  Var<float> x = conv(input, Padding::same);
  std::vector<Var<float>> skips;
  for (std::size_t d = 0; d < cfg.down_blocks; ++d) {
    x = dense_block(x);
    skips.push_back(x);
    x = max_pool2(drop(conv(x, Padding::valid)));
  }
  x = dense_block(x);
  for (std::size_t u = 0; u < cfg.down_blocks; ++u) {
    x = conv(upsample_nn2(x), Padding::same);
    x = dense_block(concat_channels(x, skips[cfg.down_blocks - 1 - u]));
  }
  Var<float> mu = conv(x, Padding::valid);
  Var<float> sigma2 = square(softplus(conv(x, Padding::valid)));
  return {mu, sigma2};
}

struct PointPrediction {
  Tensor mu;
  Tensor sigma2;
};

/// One forward pass without gradient bookkeeping.
inline PointPrediction predict_once(const Model& model, const Tensor& input, RandomStream& dropout_stream,
                                    bool stochastic) {
  Tape<float> tape;
  auto params = bind_parameters(model, tape, false);
  Var<float> x = tape.leaf(input, false);
  auto out = forward(model, params, x, dropout_stream, stochastic);
  return {out.mu.value(), out.sigma2.value()};
}

}  // namespace tfm
