// tfm: synthetic data, training, MC-dropout prediction, evaluation and
// per-pixel series from the command line.
//
// Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tfm/tfm.hpp"

#ifndef TFM_VERSION
#define TFM_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(tfm::ErrorCode code) {
  using tfm::ErrorCode;
  switch (code) {
    case ErrorCode::config_invalid:
    case ErrorCode::indivisible_input:
    case ErrorCode::invalid_rate:
    case ErrorCode::invalid_alpha:
    case ErrorCode::quantile_out_of_range:
    case ErrorCode::pixel_out_of_bounds:
      return kExitUsage;
    case ErrorCode::non_finite_gradient:
    case ErrorCode::non_finite_loss:
    case ErrorCode::non_positive_variance:
    case ErrorCode::zero_variance:
    case ErrorCode::non_positive_mean:
    case ErrorCode::empty_ensemble:
    case ErrorCode::non_scalar_loss:
    case ErrorCode::odd_spatial_dims:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_json_atomic(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw tfm::Error(tfm::ErrorCode::io_error, "cannot write " + tmp.string());
    out << j.dump(2) << "\n";
    if (!out) throw tfm::Error(tfm::ErrorCode::io_error, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw tfm::Error(tfm::ErrorCode::io_error, "cannot create " + dir.string() + ": " + ec.message());
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find_first_of("xX");
  if (x == std::string::npos) throw UsageError("--size must look like HxW, got '" + s + "'");
  try {
    std::size_t used = 0;
    const auto h = std::stoul(s.substr(0, x), &used);
    if (used != x) throw UsageError("bad height");
    const auto w = std::stoul(s.substr(x + 1), &used);
    if (used != s.size() - x - 1) throw UsageError("bad width");
    return {h, w};
  } catch (const std::logic_error&) {
    throw UsageError("--size must look like HxW, got '" + s + "'");
  }
}

std::vector<double> parse_levels(const std::string& s) {
  std::vector<double> levels;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      if (!(v > 0.0 && v < 1.0)) throw UsageError("quantile levels must lie in (0, 1), got " + item);
      levels.push_back(v);
    } catch (const std::logic_error&) {
      throw UsageError("cannot parse quantile level '" + item + "'");
    }
  }
  if (levels.empty()) throw UsageError("--quantiles needs at least one level");
  return levels;
}

std::pair<std::size_t, std::size_t> parse_pixel(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw UsageError("--pixel must look like x,y");
  try {
    const long x = std::stol(s.substr(0, comma));
    const long y = std::stol(s.substr(comma + 1));
    if (x < 0 || y < 0)
      throw tfm::Error(tfm::ErrorCode::pixel_out_of_bounds, "pixel (x=" + std::to_string(x) + ", y=" +
                                                                 std::to_string(y) + ") has a negative coordinate");
    return {static_cast<std::size_t>(x), static_cast<std::size_t>(y)};
  } catch (const std::logic_error&) {
    throw UsageError("--pixel must look like x,y");
  }
}

// Level tag used in file names and CSV headers, e.g. 0.9 -> "0.9".
std::string level_tag(double level) { return tfm::format_number(level); }

json model_json(const tfm::ModelConfig& m) {
  return {{"preset", tfm::to_string(m.preset)},
          {"input_channels", m.input_channels},
          {"down_blocks", m.down_blocks},
          {"layers_per_block", m.layers_per_block},
          {"growth_rate", m.growth_rate},
          {"first_conv_filters", m.first_conv_filters},
          {"up_conv_filters", m.up_conv_filters},
          {"dropout_rate", m.dropout_rate}};
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t frames = 20;
  std::string size = "64x64";
  std::uint64_t seed = 0;
  std::string hetero = "off";
};

int run_synth(const SynthArgs& a) {
  tfm::SynthConfig cfg;
  if (a.frames == 0) throw UsageError("--frames must be positive");
  cfg.frames = a.frames;
  std::tie(cfg.height, cfg.width) = parse_size(a.size);
  cfg.seed = a.seed;
  cfg.heteroscedastic = a.hetero == "on";
  const auto set = tfm::generate_frameset(cfg);
  tfm::write_frameset(set, a.out);
  std::cout << "wrote " << cfg.frames << " frames (" << cfg.height << "x" << cfg.width << ") to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string preset = "desk";
  std::optional<std::size_t> epochs, steps, batch, crop;
  std::optional<double> lr;
  std::uint64_t seed = 0;
  std::string loss_csv;
  std::string manifest;
};

int run_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  const auto t0 = std::chrono::steady_clock::now();
  const bool paper = a.preset == "paper";
  tfm::ModelConfig model_cfg = paper ? tfm::ModelConfig::paper() : tfm::ModelConfig::desk();
  tfm::TrainConfig cfg = paper ? tfm::TrainConfig::paper() : tfm::TrainConfig::desk();
  tfm::AugmentConfig aug;
  aug.crop = paper ? 256 : 64;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.steps) cfg.steps_per_epoch = *a.steps;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.crop) aug.crop = *a.crop;
  if (a.lr) cfg.learning_rate = *a.lr;
  cfg.seed = a.seed;
  cfg.validate();
  aug.validate();
  if (aug.crop % model_cfg.size_multiple() != 0)
    throw tfm::Error(tfm::ErrorCode::indivisible_input, "--crop must be a multiple of " +
                                                             std::to_string(model_cfg.size_multiple()));

  const auto frames = tfm::mask_forces(tfm::read_frameset(a.data), aug.tukey_alpha);
  tfm::Model model = tfm::build_model(model_cfg, cfg.seed);
  const fs::path ckpt = a.out;
  const fs::path loss_path = a.loss_csv.empty() ? fs::path(a.out + ".loss.csv") : fs::path(a.loss_csv);
  const fs::path manifest_path = a.manifest.empty() ? fs::path(a.out + ".run.json") : fs::path(a.manifest);
  if (ckpt.has_parent_path()) ensure_dir(ckpt.parent_path());

  tfm::TrainOptions opts;
  opts.checkpoint = ckpt;
  const std::size_t report_every = std::max<std::size_t>(1, cfg.steps_per_epoch);
  opts.on_step = [&](const tfm::StepRecord& r) {
    if (r.step % report_every == 0)
      std::cerr << "epoch " << r.epoch << " step " << r.step << " loss " << r.loss << "\n";
  };
  const auto result = tfm::train(model, frames, cfg, aug, opts);

  tfm::CsvWriter csv({"step", "epoch", "loss"});
  for (const auto& r : result.history)
    csv.row({tfm::format_number(r.step), tfm::format_number(r.epoch), tfm::format_number(r.loss)});
  csv.save(loss_path);

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const json manifest = {
      {"command", "train"},
      {"argv", argv},
      {"tool_version", TFM_VERSION},
      {"finished_at", iso_now()},
      {"wall_clock_seconds", seconds},
      {"model", model_json(model_cfg)},
      {"parameter_count", model.count_params()},
      {"train",
       {{"preset", a.preset},
        {"epochs", cfg.epochs},
        {"steps_per_epoch", cfg.steps_per_epoch},
        {"batch_size", cfg.batch_size},
        {"learning_rate", cfg.learning_rate},
        {"weight_decay", cfg.weight_decay},
        {"weight_decay_mode", "coupled (g += lambda * theta)"},
        {"clip_norm", cfg.clip_norm},
        {"update_order", "weight decay, then global-norm clip, then Adam moments"},
        {"adam", {{"beta1", 0.9}, {"beta2", 0.999}, {"epsilon", 1e-7}}},
        {"dropout_active_in_training", true}}},
      {"augment",
       {{"crop", aug.crop},
        {"flip_prob", aug.flip_prob},
        {"rotation_deg", {0.0, aug.rotation_max_deg}},
        {"salt_fraction", aug.salt_fraction},
        {"salt_image_prob", aug.salt_image_prob},
        {"salt_intensity_max", aug.salt_intensity_max},
        {"tukey_alpha", aug.tukey_alpha}}},
      {"seeds", {{"train", cfg.seed}}},
      {"data", {{"dir", fs::absolute(a.data).string()}, {"frames", frames.size()}}},
      {"artifacts",
       {{"checkpoint", fs::absolute(ckpt).string()},
        {"loss_csv", fs::absolute(loss_path).string()}}},
      {"final_loss", result.history.back().loss},
      {"epoch_mean_loss", result.epoch_means()}};
  write_json_atomic(manifest_path, manifest);
  std::cout << "checkpoint " << ckpt.string() << ", loss history " << loss_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string model;
  std::string data;
  std::size_t samples = 32;
  std::string out;
  std::string quantiles = "0.5,0.9";
  std::uint64_t seed = 0;
  bool no_dropout = false;
};

struct NamedMap {
  std::string name;
  const tfm::Grid<double>* map;
};

std::vector<NamedMap> prediction_maps(const tfm::McPrediction& p) {
  std::vector<NamedMap> maps{{"mean", &p.moments.mean},
                             {"var_total", &p.moments.var_total},
                             {"var_aleatoric", &p.moments.var_aleatoric},
                             {"var_epistemic", &p.moments.var_epistemic},
                             {"cv", &p.moments.cv},
                             {"entropy", &p.moments.entropy}};
  for (const auto& iv : p.intervals) {
    maps.push_back({"ci" + level_tag(iv.level) + "_lower", &iv.lower});
    maps.push_back({"ci" + level_tag(iv.level) + "_upper", &iv.upper});
  }
  return maps;
}

void write_pgm(const fs::path& path, const tfm::Grid<double>& map, double lo, double hi) {
  std::string bytes = "P5\n" + std::to_string(map.width()) + " " + std::to_string(map.height()) + "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = map[i];
    const double u = std::isfinite(v) ? std::clamp((v - lo) / span, 0.0, 1.0) : 0.0;
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw tfm::Error(tfm::ErrorCode::io_error, "cannot write " + path.string());
  out << bytes;
}

int run_predict(const PredictArgs& a, const std::vector<std::string>& argv) {
  const auto t0 = std::chrono::steady_clock::now();
  if (a.samples == 0) throw UsageError("--mc-samples must be positive");
  const auto levels = parse_levels(a.quantiles);
  const tfm::Model model = tfm::load_checkpoint(a.model);
  const auto frames = tfm::mask_forces(tfm::read_frameset(a.data));
  const fs::path out = a.out;
  ensure_dir(out / "heatmaps");

  const tfm::RandomStream root(a.seed);
  std::vector<tfm::McPrediction> preds;
  preds.reserve(frames.size());
  std::vector<std::string> names;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    preds.push_back(tfm::mc_predict(model, frames.frames[i].input, a.samples, root.split(i), levels, !a.no_dropout));
    const auto maps = prediction_maps(preds.back());
    names.clear();
    for (const auto& m : maps) {
      tfm::write_raw_map(out / tfm::frame_file_name(m.name, i), *m.map);
      names.push_back(m.name);
    }
  }

  // One grayscale scale per map kind across all frames, so frames compare.
  json scale = json::object();
  for (std::size_t k = 0; k < names.size(); ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& p : preds) {
      for (double v : prediction_maps(p)[k].map->values()) {
        if (!std::isfinite(v)) continue;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!std::isfinite(lo)) lo = hi = 0.0;
    scale[names[k]] = {{"min", lo}, {"max", hi}};
    for (std::size_t i = 0; i < preds.size(); ++i) {
      std::string file = tfm::frame_file_name(names[k], i);
      file.replace(file.size() - 4, 4, ".pgm");
      write_pgm(out / "heatmaps" / file, *prediction_maps(preds[i])[k].map, lo, hi);
    }
  }
  write_json_atomic(out / "heatmaps" / "scale.json",
                    {{"mapping", "linear grayscale, 0 = min, 255 = max, non-finite = 0"}, {"maps", scale}});

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json_atomic(out / "predict.json",
                    {{"command", "predict"},
                     {"argv", argv},
                     {"tool_version", TFM_VERSION},
                     {"finished_at", iso_now()},
                     {"wall_clock_seconds", seconds},
                     {"model", {{"checkpoint", fs::absolute(a.model).string()}, {"config", model_json(model.config())}}},
                     {"data", {{"dir", fs::absolute(a.data).string()}, {"tukey_alpha", 0.1}}},
                     {"mc_samples", a.samples},
                     {"dropout_active", !a.no_dropout},
                     {"quantiles", levels},
                     {"interval_method", "central interval of the moment-matched log-normal"},
                     {"seeds", {{"predict", a.seed}, {"frame_stream", "RandomStream(seed).split(frame)"}}},
                     {"width", frames.width()},
                     {"height", frames.height()},
                     {"frames", frames.size()},
                     {"dtype", "f32le"},
                     {"maps", names}});
  std::cout << "wrote " << names.size() << " maps x " << frames.size() << " frames to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string data;
  std::string report;
  std::size_t samples = 32;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
  const auto t0 = std::chrono::steady_clock::now();
  if (a.samples == 0) throw UsageError("--mc-samples must be positive");
  const tfm::Model model = tfm::load_checkpoint(a.model);
  const auto frames = tfm::mask_forces(tfm::read_frameset(a.data));
  const auto report = tfm::evaluate_mae(model, frames, a.samples, a.seed);

  tfm::CsvWriter csv({"frame_index", "mae"});
  for (std::size_t i = 0; i < report.mae.size(); ++i)
    csv.row({tfm::format_number(i), tfm::format_number(report.mae[i])});
  csv.row({"mean", tfm::format_number(report.mean)});
  csv.row({"std", tfm::format_number(report.std)});
  const fs::path report_path = a.report;
  if (report_path.has_parent_path()) ensure_dir(report_path.parent_path());
  csv.save(report_path);

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json_atomic(a.report + ".run.json",
                    {{"command", "eval"},
                     {"argv", argv},
                     {"tool_version", TFM_VERSION},
                     {"finished_at", iso_now()},
                     {"wall_clock_seconds", seconds},
                     {"model", fs::absolute(a.model).string()},
                     {"data", fs::absolute(a.data).string()},
                     {"mc_samples", a.samples},
                     {"seeds", {{"eval", a.seed}}},
                     {"metric", "per-frame MAE of the MC mean against the Tukey-masked force, force units"},
                     {"mae_mean", report.mean},
                     {"mae_std", report.std}});
  std::cout << "MAE " << report.mean << " +- " << report.std << " over " << report.mae.size() << " frames\n";
  return 0;
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

struct PlotArgs {
  std::string pred;
  std::string pixel;
  std::string out;
};

int run_plot(const PlotArgs& a) {
  const fs::path pred = a.pred;
  const fs::path meta_path = pred / "predict.json";
  if (!fs::exists(meta_path)) throw tfm::Error(tfm::ErrorCode::manifest_missing, "no predict.json in " + a.pred);
  json meta;
  try {
    std::ifstream in(meta_path);
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw tfm::Error(tfm::ErrorCode::manifest_missing, std::string("unreadable predict.json: ") + e.what());
  }
  const auto h = meta.at("height").get<std::size_t>();
  const auto w = meta.at("width").get<std::size_t>();
  const auto n = meta.at("frames").get<std::size_t>();
  const auto levels = meta.at("quantiles").get<std::vector<double>>();
  const auto [x, y] = parse_pixel(a.pixel);
  tfm::check_pixel(y, x, h, w);

  const auto frames = tfm::mask_forces(tfm::read_frameset(meta.at("data").at("dir").get<std::string>()));
  if (frames.size() != n || frames.height() != h || frames.width() != w)
    throw tfm::Error(tfm::ErrorCode::dimension_mismatch, "frameset no longer matches the prediction directory");

  std::vector<std::string> header{"frame_index", "truth", "mean"};
  for (double l : levels) {
    header.push_back("lower_" + level_tag(l));
    header.push_back("upper_" + level_tag(l));
  }
  header.push_back("entropy_bits");
  tfm::CsvWriter csv(header);
  const std::size_t idx = y * w + x;
  for (std::size_t i = 0; i < n; ++i) {
    auto value = [&](const std::string& name) {
      return static_cast<double>(tfm::read_raw_map(pred / tfm::frame_file_name(name, i), h, w, i)[idx]);
    };
    std::vector<std::string> row{tfm::format_number(i), tfm::format_number(static_cast<double>(frames.frames[i].force[idx])),
                                 tfm::format_number(value("mean"))};
    for (double l : levels) {
      row.push_back(tfm::format_number(value("ci" + level_tag(l) + "_lower")));
      row.push_back(tfm::format_number(value("ci" + level_tag(l) + "_upper")));
    }
    row.push_back(tfm::format_number(value("entropy")));
    csv.row(row);
  }
  csv.save(a.out);
  std::cout << "wrote " << n << " rows to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian traction-force regression from cell images"};
  app.set_version_flag("--version", TFM_VERSION);
  app.require_subcommand(1);
  const std::vector<std::string> args(argv, argv + argc);

  SynthArgs synth;
  auto* cs = app.add_subcommand("synth", "generate a synthetic frameset");
  cs->add_option("--out", synth.out, "output directory")->required();
  cs->add_option("--frames", synth.frames, "number of frames");
  cs->add_option("--size", synth.size, "frame size HxW");
  cs->add_option("--seed", synth.seed, "generator seed");
  cs->add_option("--hetero", synth.hetero, "log-normal force noise")->check(CLI::IsMember({"on", "off"}));

  TrainArgs train;
  auto* ct = app.add_subcommand("train", "train a model on a frameset");
  ct->add_option("--data", train.data, "frameset directory")->required();
  ct->add_option("--out", train.out, "checkpoint path")->required();
  ct->add_option("--preset", train.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  ct->add_option("--epochs", train.epochs);
  ct->add_option("--steps", train.steps, "steps per epoch");
  ct->add_option("--batch", train.batch);
  ct->add_option("--crop", train.crop);
  ct->add_option("--lr", train.lr, "Adam learning rate");
  ct->add_option("--seed", train.seed);
  ct->add_option("--loss-csv", train.loss_csv, "loss history path (default <out>.loss.csv)");
  ct->add_option("--manifest", train.manifest, "run manifest path (default <out>.run.json)");

  PredictArgs predict;
  auto* cp = app.add_subcommand("predict", "MC-dropout prediction maps for every frame");
  cp->add_option("--model", predict.model, "checkpoint")->required();
  cp->add_option("--data", predict.data, "frameset directory")->required();
  cp->add_option("--out", predict.out, "output directory")->required();
  cp->add_option("--mc-samples", predict.samples, "stochastic passes T");
  cp->add_option("--quantiles", predict.quantiles, "central interval levels, comma separated");
  cp->add_option("--seed", predict.seed);
  cp->add_flag("--no-dropout", predict.no_dropout, "disable dropout (diagnostic)");

  EvalArgs eval;
  auto* ce = app.add_subcommand("eval", "per-frame MAE report");
  ce->add_option("--model", eval.model, "checkpoint")->required();
  ce->add_option("--data", eval.data, "frameset directory")->required();
  ce->add_option("--report", eval.report, "CSV report path")->required();
  ce->add_option("--mc-samples", eval.samples, "stochastic passes T");
  ce->add_option("--seed", eval.seed);

  PlotArgs plot;
  auto* cl = app.add_subcommand("plot", "per-pixel series from a prediction directory");
  cl->add_option("--pred", plot.pred, "prediction directory")->required();
  cl->add_option("--pixel", plot.pixel, "pixel as x,y (column, row)")->required();
  cl->add_option("--out", plot.out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*cs) return run_synth(synth);
    if (*ct) return run_train(train, args);
    if (*cp) return run_predict(predict, args);
    if (*ce) return run_eval(eval, args);
    if (*cl) return run_plot(plot);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const tfm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: IoError: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed metadata: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
