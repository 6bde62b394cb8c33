#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "idt/cellcrop.hpp"
#include "idt/image.hpp"
#include "idt/model.hpp"

namespace idt {

// Activation at spatial location (row, col), channel `channel` of a layer.
// Its string form is "<row>_<col>_<channel>", e.g. "6_5_9".
struct FeatureId {
  std::string layer_name;
  int row = 0;
  int col = 0;
  int channel = 0;
  friend bool operator==(const FeatureId&, const FeatureId&) = default;
};

// Row-major, channel fastest: index = row*W*C + col*C + channel.
std::size_t feature_index(const FeatureId& id, Shape3 layer_shape);
FeatureId feature_id_of(std::size_t index, Shape3 layer_shape, std::string layer_name = {});

std::string format_feature_name(const FeatureId& id);
// Parses "<int>_<int>_<int>"; throws BadFeatureName. No range check.
FeatureId parse_feature_name(std::string_view name, std::string layer_name = {});
// Parses and range-checks against the layer shape; throws OutOfRange.
std::size_t feature_index_of_name(std::string_view name, Shape3 layer_shape);

struct FeatureMap {
  std::string layer_name;
  Tensor3 values;
};

FeatureMap forward_features(const TrainedModel& model, const Image8& image,
                            std::string_view layer_name);

// One row per image: the flattened FeatureMap of `layer_name`, with the class
// label index, source path and split of the image.
struct FeatureTable {
  std::string layer_name;
  Shape3 layer_shape;
  std::vector<std::string> class_order;
  std::vector<double> values;  // rows x cols, row-major
  std::vector<int> labels;
  std::vector<std::string> paths;
  std::vector<Split> splits;

  std::size_t rows() const { return labels.size(); }
  std::size_t cols() const { return layer_shape.size(); }
  int n_classes() const { return static_cast<int>(class_order.size()); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(values).subspan(i * cols(), cols());
  }
  double at(std::size_t row_index, std::size_t col) const { return values[row_index * cols() + col]; }

  void append_row(std::span<const double> row_values, int label, std::string path, Split split);
  FeatureTable subset(Split split) const;
  // Identity of every row index within the full table for a split.
  std::vector<std::size_t> row_indices(Split split) const;
};

enum class SplitSelector { kAll, kTrain, kTest };

FeatureTable extract_feature_vectors(const TrainedModel& model, const DatasetManifest& manifest,
                                     std::string_view layer_name,
                                     SplitSelector which = SplitSelector::kAll);

// Binary file: "IDTFEAT1\n", one JSON header line (layer, shape, classes,
// rows, per-row label/path/split), then rows*cols little-endian float64.
void save_feature_table(const std::filesystem::path& path, const FeatureTable& table);
FeatureTable load_feature_table(const std::filesystem::path& path);

struct DeadChannel {
  int channel = 0;
  double max_activation = 0.0;
  friend bool operator==(const DeadChannel&, const DeadChannel&) = default;
};

// Channels whose maximum activation over every image and position in the
// manifest stays below threshold.
std::vector<DeadChannel> dead_channel_report(const TrainedModel& model,
                                             const DatasetManifest& manifest,
                                             std::string_view layer_name, double threshold);
std::vector<DeadChannel> dead_channel_report(const TrainedModel& model,
                                             std::span<const Image8> images,
                                             std::string_view layer_name, double threshold);

}  // namespace idt
