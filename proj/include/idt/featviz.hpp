#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "idt/image.hpp"
#include "idt/model.hpp"
#include "json.hpp"

namespace idt {

// Spatial cell for the positioned objective: activation at exactly (row, col).
struct Position {
  int row = 0;
  int col = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

struct VizRegularizers {
  int jitter_pixels = 2;
  double tv_weight = 1e-3;
  double l2_weight = 1e-4;
};

struct VizParams {
  int steps = 256;
  double step_size = 0.05;  // in normalised input units per RMS-normalised gradient
  std::uint64_t seed = 0;
  VizRegularizers regularizers;
  double dead_threshold = 1e-4;
  int max_backtracks = 8;
  std::optional<Position> position;  // unset: mean over all positions
};

nlohmann::json viz_params_to_json(const VizParams& params);
VizParams viz_params_from_json(const nlohmann::json& j);

struct FeatureImage {
  Tensor3 pixels;  // model input size, values in [0,1]
  std::string layer_name;
  int channel = 0;
  std::optional<Position> position;
  double objective_initial = 0.0;
  double objective_final = 0.0;
  bool dead = false;
  VizParams params;
  std::vector<double> objective_trace;  // objective after every step, starting with the initial
};

// Mean of the channel's activation over every spatial position, or the
// activation at `position` when given. `image` is in unit pixel space.
double channel_objective(const TrainedModel& model, const Tensor3& image,
                         std::string_view layer_name, int channel,
                         std::optional<Position> position = std::nullopt);

// Gradient of channel_objective with respect to the unit-space pixels.
Tensor3 channel_objective_grad(const TrainedModel& model, const Tensor3& image,
                               std::string_view layer_name, int channel,
                               std::optional<Position> position = std::nullopt);

// Projected, normalised-gradient ascent from low-contrast noise. A step is
// accepted only if the unregularised objective does not decrease; otherwise
// the step halves, up to max_backtracks times.
FeatureImage visualize_feature(const TrainedModel& model, std::string_view layer_name,
                               int channel, const VizParams& params);

struct GridStyle {
  int columns = 6;
  int tile = 100;
  int gap = 4;
};

// Tile for one FeatureImage: the image resized to `tile`, channel number at
// the bottom-left; dead channels become a neutral grey tile with a cross.
Image8 render_feature_tile(const FeatureImage& feature, int tile);

struct LayerGrid {
  Image8 image;
  int rows = 0;
  int columns = 0;
  std::vector<FeatureImage> features;
};

LayerGrid visualize_layer_grid(const TrainedModel& model, std::string_view layer_name,
                               const std::vector<int>& channels, const VizParams& params,
                               const GridStyle& style = {});

// Grid of already computed visualisations, in the given order.
LayerGrid assemble_layer_grid(std::vector<FeatureImage> features, const GridStyle& style = {});

// Sidecar JSON written next to every visualisation PNG.
nlohmann::json feature_image_sidecar(const FeatureImage& feature);

// Visualisations keyed by (layer, channel[, position]), persisted as PNG +
// sidecar JSON when a directory is given. Computation is serialised per key:
// concurrent requests for one key compute it once.
class VizCache {
 public:
  explicit VizCache(std::filesystem::path dir = {});

  static std::string key(std::string_view layer_name, int channel,
                         std::optional<Position> position = std::nullopt);
  // File name (relative to the cache directory) of a key's PNG.
  static std::string png_name(std::string_view layer_name, int channel,
                              std::optional<Position> position = std::nullopt);

  const std::filesystem::path& dir() const { return dir_; }
  bool contains(std::string_view layer_name, int channel,
                std::optional<Position> position = std::nullopt) const;
  std::optional<FeatureImage> find(std::string_view layer_name, int channel,
                                   std::optional<Position> position = std::nullopt) const;
  void put(const FeatureImage& feature);
  FeatureImage get_or_compute(const TrainedModel& model, std::string_view layer_name, int channel,
                              const VizParams& params);

 private:
  std::shared_ptr<std::mutex> key_mutex(const std::string& key);

  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  mutable std::map<std::string, FeatureImage> entries_;
  std::mutex key_mutexes_guard_;
  std::map<std::string, std::shared_ptr<std::mutex>> key_mutexes_;
};

}  // namespace idt
