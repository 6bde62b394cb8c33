#include "idt/features.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include "idt/error.hpp"
#include "idt/parallel.hpp"
#include "idt/raster.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

namespace {

bool in_shape(const FeatureId& id, Shape3 s) {
  return id.row >= 0 && id.row < s.height && id.col >= 0 && id.col < s.width && id.channel >= 0 &&
         id.channel < s.channels;
}

std::string shape_string(Shape3 s) {
  return "(" + std::to_string(s.height) + "," + std::to_string(s.width) + "," +
         std::to_string(s.channels) + ")";
}

}  // namespace

std::size_t feature_index(const FeatureId& id, Shape3 s) {
  if (!in_shape(id, s)) {
    throw Error(ErrorCode::kOutOfRange,
                "feature " + format_feature_name(id) + " outside layer shape " + shape_string(s));
  }
  return (static_cast<std::size_t>(id.row) * s.width + id.col) * s.channels + id.channel;
}

FeatureId feature_id_of(std::size_t index, Shape3 s, std::string layer_name) {
  if (index >= s.size()) {
    throw Error(ErrorCode::kOutOfRange,
                "index " + std::to_string(index) + " outside layer shape " + shape_string(s));
  }
  FeatureId id;
  id.layer_name = std::move(layer_name);
  id.channel = static_cast<int>(index % s.channels);
  id.col = static_cast<int>((index / s.channels) % s.width);
  id.row = static_cast<int>(index / (static_cast<std::size_t>(s.channels) * s.width));
  return id;
}

std::string format_feature_name(const FeatureId& id) {
  return std::to_string(id.row) + "_" + std::to_string(id.col) + "_" + std::to_string(id.channel);
}

FeatureId parse_feature_name(std::string_view name, std::string layer_name) {
  int parts[3];
  const char* p = name.data();
  const char* end = name.data() + name.size();
  for (int i = 0; i < 3; ++i) {
    if (p == end || *p < '0' || *p > '9') {
      throw Error(ErrorCode::kBadFeatureName, "'" + std::string(name) + "' is not row_col_channel");
    }
    const auto [next, ec] = std::from_chars(p, end, parts[i]);
    if (ec != std::errc{}) {
      throw Error(ErrorCode::kBadFeatureName, "'" + std::string(name) + "' is not row_col_channel");
    }
    p = next;
    if (i < 2) {
      if (p == end || *p != '_') {
        throw Error(ErrorCode::kBadFeatureName, "'" + std::string(name) + "' is not row_col_channel");
      }
      ++p;
    }
  }
  if (p != end) {
    throw Error(ErrorCode::kBadFeatureName, "'" + std::string(name) + "' is not row_col_channel");
  }
  return {std::move(layer_name), parts[0], parts[1], parts[2]};
}

std::size_t feature_index_of_name(std::string_view name, Shape3 layer_shape) {
  return feature_index(parse_feature_name(name), layer_shape);
}

FeatureMap forward_features(const TrainedModel& model, const Image8& image,
                            std::string_view layer_name) {
  const int layer = model.layer_index(layer_name);
  ForwardTrace trace = forward(model, normalize_input(model, to_unit(image)), layer, false);
  BlockTrace& bt = trace.blocks.back();
  return {std::string(layer_name), bt.has_pool ? std::move(bt.pooled) : std::move(bt.activated)};
}

void FeatureTable::append_row(std::span<const double> row_values, int label, std::string path,
                              Split split) {
  if (row_values.size() != cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "row width differs from the table width");
  }
  values.insert(values.end(), row_values.begin(), row_values.end());
  labels.push_back(label);
  paths.push_back(std::move(path));
  splits.push_back(split);
}

std::vector<std::size_t> FeatureTable::row_indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rows(); ++i)
    if (splits[i] == split) out.push_back(i);
  return out;
}

FeatureTable FeatureTable::subset(Split split) const {
  FeatureTable out;
  out.layer_name = layer_name;
  out.layer_shape = layer_shape;
  out.class_order = class_order;
  for (std::size_t i : row_indices(split)) out.append_row(row(i), labels[i], paths[i], splits[i]);
  return out;
}

FeatureTable extract_feature_vectors(const TrainedModel& model, const DatasetManifest& manifest,
                                     std::string_view layer_name, SplitSelector which) {
  FeatureTable table;
  table.layer_name = std::string(layer_name);
  table.layer_shape = model.layer_shape(layer_name);
  table.class_order = model.class_order;

  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const Split s = manifest.entries[i].split;
    if (which == SplitSelector::kAll || (which == SplitSelector::kTrain && s == Split::kTrain) ||
        (which == SplitSelector::kTest && s == Split::kTest)) {
      chosen.push_back(i);
    }
  }
  const std::size_t cols = table.cols();
  table.values.resize(chosen.size() * cols);
  table.labels.resize(chosen.size());
  table.paths.resize(chosen.size());
  table.splits.resize(chosen.size());
  parallel_for(static_cast<std::ptrdiff_t>(chosen.size()), [&](std::ptrdiff_t r) {
    const ManifestEntry& e = manifest.entries[chosen[r]];
    const CellImage cell = load_cell(manifest, e);
    const FeatureMap fm = forward_features(model, cell.pixels, layer_name);
    std::copy(fm.values.data.begin(), fm.values.data.end(), table.values.begin() + r * cols);
    table.labels[r] = manifest.class_index(e.class_label);
    table.paths[r] = manifest.absolute_path(e).string();
    table.splits[r] = e.split;
  });
  return table;
}

void save_feature_table(const fs::path& path, const FeatureTable& table) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  json splits = json::array();
  for (Split s : table.splits) splits.push_back(split_name(s));
  const json header = {{"layer", table.layer_name},
                       {"shape",
                        {table.layer_shape.height, table.layer_shape.width,
                         table.layer_shape.channels}},
                       {"class_order", table.class_order},
                       {"rows", table.rows()},
                       {"labels", table.labels},
                       {"paths", table.paths},
                       {"splits", std::move(splits)}};
  std::ofstream out(path, std::ios::binary);
  out << "IDTFEAT1\n" << header.dump() << "\n";
  out.write(reinterpret_cast<const char*>(table.values.data()),
            static_cast<std::streamsize>(table.values.size() * sizeof(double)));
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

FeatureTable load_feature_table(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != "IDTFEAT1") throw Error(ErrorCode::kIo, path.string() + " is not a feature table");
  std::getline(in, header_line);
  const json header = json::parse(header_line);
  FeatureTable table;
  table.layer_name = header.at("layer").get<std::string>();
  const auto shape = header.at("shape").get<std::vector<int>>();
  table.layer_shape = {shape.at(0), shape.at(1), shape.at(2)};
  table.class_order = header.at("class_order").get<std::vector<std::string>>();
  table.labels = header.at("labels").get<std::vector<int>>();
  table.paths = header.at("paths").get<std::vector<std::string>>();
  for (const auto& s : header.at("splits")) table.splits.push_back(parse_split(s.get<std::string>()));
  const std::size_t rows = header.at("rows").get<std::size_t>();
  if (table.labels.size() != rows || table.paths.size() != rows || table.splits.size() != rows) {
    throw Error(ErrorCode::kIo, "inconsistent feature table header in " + path.string());
  }
  table.values.resize(rows * table.cols());
  in.read(reinterpret_cast<char*>(table.values.data()),
          static_cast<std::streamsize>(table.values.size() * sizeof(double)));
  if (!in) throw Error(ErrorCode::kIo, "truncated feature table " + path.string());
  return table;
}

std::vector<DeadChannel> dead_channel_report(const TrainedModel& model,
                                             std::span<const Image8> images,
                                             std::string_view layer_name, double threshold) {
  const Shape3 shape = model.layer_shape(layer_name);
  std::vector<std::vector<double>> per_image(images.size());
  parallel_for(static_cast<std::ptrdiff_t>(images.size()), [&](std::ptrdiff_t i) {
    const FeatureMap fm = forward_features(model, images[i], layer_name);
    std::vector<double> mx(shape.channels, 0.0);
    for (std::size_t j = 0; j < fm.values.data.size(); ++j) {
      const int c = static_cast<int>(j % shape.channels);
      mx[c] = std::max(mx[c], fm.values.data[j]);
    }
    per_image[i] = std::move(mx);
  });
  std::vector<DeadChannel> report;
  for (int c = 0; c < shape.channels; ++c) {
    double mx = 0.0;
    for (const auto& v : per_image) mx = std::max(mx, v[c]);
    if (mx < threshold) report.push_back({c, mx});
  }
  return report;
}

std::vector<DeadChannel> dead_channel_report(const TrainedModel& model,
                                             const DatasetManifest& manifest,
                                             std::string_view layer_name, double threshold) {
  if (manifest.entries.empty()) throw Error(ErrorCode::kEmptyTable, "manifest has no images");
  std::vector<Image8> images(manifest.entries.size());
  parallel_for(static_cast<std::ptrdiff_t>(images.size()), [&](std::ptrdiff_t i) {
    images[i] = load_cell(manifest, manifest.entries[i]).pixels;
  });
  return dead_channel_report(model, images, layer_name, threshold);
}

}  // namespace idt
