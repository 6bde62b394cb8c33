#include "idt/featviz.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "idt/error.hpp"
#include "idt/image_io.hpp"
#include "idt/parallel.hpp"
#include "idt/raster.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

json viz_params_to_json(const VizParams& p) {
  json j = {{"steps", p.steps},
            {"step_size", p.step_size},
            {"seed", p.seed},
            {"jitter_pixels", p.regularizers.jitter_pixels},
            {"tv_weight", p.regularizers.tv_weight},
            {"l2_weight", p.regularizers.l2_weight},
            {"dead_threshold", p.dead_threshold},
            {"max_backtracks", p.max_backtracks},
            {"position", nullptr}};
  if (p.position) j["position"] = {p.position->row, p.position->col};
  return j;
}

VizParams viz_params_from_json(const json& j) {
  VizParams p;
  p.steps = j.value("steps", p.steps);
  p.step_size = j.value("step_size", p.step_size);
  p.seed = j.value("seed", p.seed);
  p.regularizers.jitter_pixels = j.value("jitter_pixels", p.regularizers.jitter_pixels);
  p.regularizers.tv_weight = j.value("tv_weight", p.regularizers.tv_weight);
  p.regularizers.l2_weight = j.value("l2_weight", p.regularizers.l2_weight);
  p.dead_threshold = j.value("dead_threshold", p.dead_threshold);
  p.max_backtracks = j.value("max_backtracks", p.max_backtracks);
  if (j.contains("position") && !j["position"].is_null()) {
    p.position = Position{j["position"].at(0).get<int>(), j["position"].at(1).get<int>()};
  }
  if (p.steps < 1) throw Error(ErrorCode::kInvalidArgument, "viz steps must be >= 1");
  if (!(p.step_size > 0.0)) throw Error(ErrorCode::kInvalidArgument, "viz step_size must be > 0");
  return p;
}

namespace {

void check_target(const TrainedModel& model, std::string_view layer_name, int channel,
                  std::optional<Position> position) {
  const Shape3 s = model.layer_shape(layer_name);
  if (channel < 0 || channel >= s.channels) {
    throw Error(ErrorCode::kOutOfRange, "channel " + std::to_string(channel) + " not in layer " +
                                            std::string(layer_name));
  }
  if (position && (position->row < 0 || position->row >= s.height || position->col < 0 ||
                   position->col >= s.width)) {
    throw Error(ErrorCode::kOutOfRange, "position outside layer " + std::string(layer_name));
  }
}

double objective_from(const Tensor3& out, int channel, std::optional<Position> position) {
  if (position) return out.at(position->row, position->col, channel);
  double sum = 0.0;
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) sum += out.at(r, c, channel);
  return sum / (static_cast<double>(out.height) * out.width);
}

Tensor3 roll(const Tensor3& t, int dy, int dx) {
  Tensor3 out(t.shape());
  for (int r = 0; r < t.height; ++r) {
    const int sr = ((r - dy) % t.height + t.height) % t.height;
    for (int c = 0; c < t.width; ++c) {
      const int sc = ((c - dx) % t.width + t.width) % t.width;
      for (int ch = 0; ch < t.channels; ++ch) out.at(r, c, ch) = t.at(sr, sc, ch);
    }
  }
  return out;
}

// Gradient of the smoothed isotropic total variation
// sum sqrt(dy^2 + dx^2 + eps^2) with forward differences.
Tensor3 tv_gradient(const Tensor3& x) {
  constexpr double kEps = 1e-3;
  Tensor3 g(x.shape());
  for (int r = 0; r < x.height; ++r) {
    for (int c = 0; c < x.width; ++c) {
      for (int ch = 0; ch < x.channels; ++ch) {
        const double v = x.at(r, c, ch);
        const double dy = r + 1 < x.height ? x.at(r + 1, c, ch) - v : 0.0;
        const double dx = c + 1 < x.width ? x.at(r, c + 1, ch) - v : 0.0;
        const double n = std::sqrt(dy * dy + dx * dx + kEps * kEps);
        g.at(r, c, ch) -= (dy + dx) / n;
        if (r + 1 < x.height) g.at(r + 1, c, ch) += dy / n;
        if (c + 1 < x.width) g.at(r, c + 1, ch) += dx / n;
      }
    }
  }
  return g;
}

}  // namespace

double channel_objective(const TrainedModel& model, const Tensor3& image,
                         std::string_view layer_name, int channel,
                         std::optional<Position> position) {
  check_target(model, layer_name, channel, position);
  const int layer = model.layer_index(layer_name);
  const ForwardTrace trace = forward(model, normalize_input(model, image), layer, false);
  return objective_from(trace.blocks.back().output(), channel, position);
}

Tensor3 channel_objective_grad(const TrainedModel& model, const Tensor3& image,
                               std::string_view layer_name, int channel,
                               std::optional<Position> position) {
  check_target(model, layer_name, channel, position);
  const int layer = model.layer_index(layer_name);
  const ForwardTrace trace = forward(model, normalize_input(model, image), layer, false);
  const Tensor3& out = trace.blocks.back().output();
  Tensor3 seed(out.shape());
  if (position) {
    seed.at(position->row, position->col, channel) = 1.0;
  } else {
    const double w = 1.0 / (static_cast<double>(out.height) * out.width);
    for (int r = 0; r < out.height; ++r)
      for (int c = 0; c < out.width; ++c) seed.at(r, c, channel) = w;
  }
  Tensor3 g = backward(model, trace, layer, std::move(seed), nullptr);
  // d/dpixel = d/dnormalised / stddev
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] /= model.norm.stddev[i % g.channels];
  return g;
}

FeatureImage visualize_feature(const TrainedModel& model, std::string_view layer_name,
                               int channel, const VizParams& params) {
  if (params.steps < 1 || !(params.step_size > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "viz needs steps >= 1 and step_size > 0");
  }
  check_target(model, layer_name, channel, params.position);
  const ModelConfig& cfg = model.config;
  const auto& mean = model.norm.mean;
  const auto& stddev = model.norm.stddev;
  const int c_n = cfg.input_channels;

  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> noise(0.45, 0.55);
  Tensor3 x(cfg.input_height, cfg.input_width, c_n);
  for (double& v : x.data) v = noise(rng);

  FeatureImage out;
  out.layer_name = std::string(layer_name);
  out.channel = channel;
  out.position = params.position;
  out.params = params;

  double objective = channel_objective(model, x, layer_name, channel, params.position);
  out.objective_initial = objective;
  out.objective_trace.push_back(objective);

  const int jitter = std::max(0, params.regularizers.jitter_pixels);
  std::uniform_int_distribution<int> shift(-jitter, jitter);
  int flat_steps = 0;
  for (int step = 0; step < params.steps; ++step) {
    const int dy = jitter > 0 ? shift(rng) : 0;
    const int dx = jitter > 0 ? shift(rng) : 0;
    Tensor3 grad = roll(channel_objective_grad(model, roll(x, dy, dx), layer_name, channel,
                                               params.position),
                        -dy, -dx);

    // Direction in normalised space: chain rule multiplies pixel gradients by stddev.
    Tensor3 tv;
    if (params.regularizers.tv_weight > 0.0) tv = tv_gradient(x);
    // No objective signal: regularisers alone would drift the image under
    // RMS normalisation, so the step counts as flat.
    const bool no_signal =
        std::all_of(grad.data.begin(), grad.data.end(), [](double v) { return v == 0.0; });
    Tensor3 dir(x.shape());
    double sq = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      const int c = static_cast<int>(i % c_n);
      double d = grad.data[i];
      if (params.regularizers.tv_weight > 0.0) d -= params.regularizers.tv_weight * tv.data[i];
      d *= stddev[c];
      if (params.regularizers.l2_weight > 0.0) {
        const double z = (x.data[i] - mean[c]) / stddev[c];
        d -= 2.0 * params.regularizers.l2_weight * z;
      }
      dir.data[i] = d;
      sq += d * d;
    }
    const double rms = std::sqrt(sq / static_cast<double>(dir.data.size()));
    if (no_signal || !(rms > 1e-300)) {
      out.objective_trace.push_back(objective);
      // A persistently flat objective will not move; stop early.
      if (++flat_steps >= 8) break;
      continue;
    }
    flat_steps = 0;

    double t = params.step_size / rms;
    for (int attempt = 0; attempt <= params.max_backtracks; ++attempt, t *= 0.5) {
      Tensor3 cand(x.shape());
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        const int c = static_cast<int>(i % c_n);
        const double z = (x.data[i] - mean[c]) / stddev[c] + t * dir.data[i];
        cand.data[i] = std::clamp(z * stddev[c] + mean[c], 0.0, 1.0);
      }
      const double cand_obj = channel_objective(model, cand, layer_name, channel, params.position);
      if (cand_obj >= objective) {
        x = std::move(cand);
        objective = cand_obj;
        break;
      }
    }
    out.objective_trace.push_back(objective);
  }

  out.pixels = std::move(x);
  out.objective_final = objective;
  out.dead = objective < params.dead_threshold;
  return out;
}

Image8 render_feature_tile(const FeatureImage& feature, int tile) {
  Image8 img;
  if (feature.dead) {
    img = Image8(tile, tile, 3, 128);
    draw_line(img, 0, 0, tile - 1, tile - 1, {90, 90, 90});
    draw_line(img, 0, tile - 1, tile - 1, 0, {90, 90, 90});
  } else {
    img = to_image8(feature.pixels);
    if (img.height != tile || img.width != tile) img = resize_bilinear(img, tile, tile);
  }
  const std::string label = std::to_string(feature.channel);
  const int scale = tile >= 64 ? 2 : 1;
  const int w = digit_text_width(label, scale);
  const int h = kDigitHeight * scale;
  fill_rect(img, tile - h - 2 * scale, 0, h + 2 * scale, w + 2 * scale, {0, 0, 0});
  draw_digits(img, label, tile - h - scale, scale, scale, {255, 255, 255});
  return img;
}

LayerGrid visualize_layer_grid(const TrainedModel& model, std::string_view layer_name,
                               const std::vector<int>& channels, const VizParams& params,
                               const GridStyle& style) {
  if (channels.empty()) throw Error(ErrorCode::kInvalidArgument, "no channels requested");
  const Shape3 shape = model.layer_shape(layer_name);
  for (int ch : channels) {
    if (ch < 0 || ch >= shape.channels) {
      throw Error(ErrorCode::kOutOfRange, "channel " + std::to_string(ch) + " not in layer " +
                                              std::string(layer_name));
    }
  }
  std::vector<FeatureImage> features(channels.size());
  parallel_for(static_cast<std::ptrdiff_t>(channels.size()), [&](std::ptrdiff_t i) {
    features[i] = visualize_feature(model, layer_name, channels[i], params);
  });
  return assemble_layer_grid(std::move(features), style);
}

LayerGrid assemble_layer_grid(std::vector<FeatureImage> features, const GridStyle& style) {
  if (features.empty()) throw Error(ErrorCode::kInvalidArgument, "no channels requested");
  LayerGrid grid;
  grid.features = std::move(features);
  const int n = static_cast<int>(grid.features.size());
  grid.columns = std::min(style.columns, n);
  grid.rows = (n + grid.columns - 1) / grid.columns;
  const int step = style.tile + style.gap;
  grid.image = Image8(grid.rows * step - style.gap, grid.columns * step - style.gap, 3, 255);
  for (int i = 0; i < n; ++i) {
    blit(grid.image, render_feature_tile(grid.features[i], style.tile), (i / grid.columns) * step,
         (i % grid.columns) * step);
  }
  return grid;
}

json feature_image_sidecar(const FeatureImage& f) {
  json j = {{"layer", f.layer_name},
            {"channel", f.channel},
            {"position", nullptr},
            {"objective_initial", f.objective_initial},
            {"objective_final", f.objective_final},
            {"dead", f.dead},
            {"params", viz_params_to_json(f.params)}};
  if (f.position) j["position"] = {f.position->row, f.position->col};
  return j;
}

VizCache::VizCache(fs::path dir) : dir_(std::move(dir)) {
  if (!dir_.empty()) fs::create_directories(dir_);
}

std::string VizCache::key(std::string_view layer_name, int channel,
                          std::optional<Position> position) {
  std::string k = std::string(layer_name) + "_ch" + std::to_string(channel);
  if (position) k += "_at_" + std::to_string(position->row) + "_" + std::to_string(position->col);
  return k;
}

std::string VizCache::png_name(std::string_view layer_name, int channel,
                               std::optional<Position> position) {
  return key(layer_name, channel, position) + ".png";
}

bool VizCache::contains(std::string_view layer_name, int channel,
                        std::optional<Position> position) const {
  return find(layer_name, channel, position).has_value();
}

std::optional<FeatureImage> VizCache::find(std::string_view layer_name, int channel,
                                           std::optional<Position> position) const {
  const std::string k = key(layer_name, channel, position);
  {
    std::shared_lock lock(mutex_);
    if (auto it = entries_.find(k); it != entries_.end()) return it->second;
  }
  if (dir_.empty()) return std::nullopt;
  const fs::path png = dir_ / (k + ".png");
  const fs::path side = dir_ / (k + ".json");
  if (!fs::exists(png) || !fs::exists(side)) return std::nullopt;
  std::ifstream in(side);
  const json j = json::parse(in);
  FeatureImage f;
  f.pixels = to_unit(read_image(png));
  f.layer_name = j.at("layer").get<std::string>();
  f.channel = j.at("channel").get<int>();
  f.position = position;
  f.objective_initial = j.at("objective_initial").get<double>();
  f.objective_final = j.at("objective_final").get<double>();
  f.dead = j.at("dead").get<bool>();
  f.params = viz_params_from_json(j.at("params"));
  std::unique_lock lock(mutex_);
  entries_.emplace(k, f);
  return f;
}

void VizCache::put(const FeatureImage& feature) {
  const std::string k = key(feature.layer_name, feature.channel, feature.position);
  if (!dir_.empty()) {
    write_png(dir_ / (k + ".png"), to_image8(feature.pixels));
    std::ofstream out(dir_ / (k + ".json"));
    out << feature_image_sidecar(feature).dump(2) << "\n";
  }
  std::unique_lock lock(mutex_);
  entries_[k] = feature;
}

std::shared_ptr<std::mutex> VizCache::key_mutex(const std::string& k) {
  std::lock_guard lock(key_mutexes_guard_);
  auto& m = key_mutexes_[k];
  if (!m) m = std::make_shared<std::mutex>();
  return m;
}

FeatureImage VizCache::get_or_compute(const TrainedModel& model, std::string_view layer_name,
                                      int channel, const VizParams& params) {
  // Entries made with other parameters are recomputed and replaced.
  auto usable = [&](const std::optional<FeatureImage>& hit) {
    return hit && viz_params_to_json(hit->params) == viz_params_to_json(params);
  };
  if (auto hit = find(layer_name, channel, params.position); usable(hit)) return *hit;
  const auto m = key_mutex(key(layer_name, channel, params.position));
  std::lock_guard lock(*m);
  if (auto hit = find(layer_name, channel, params.position); usable(hit)) return *hit;
  FeatureImage f = visualize_feature(model, layer_name, channel, params);
  put(f);
  return f;
}

}  // namespace idt
