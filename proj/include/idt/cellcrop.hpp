#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "idt/image.hpp"
#include "json.hpp"

namespace idt {

inline constexpr int kCellSize = 100;

struct RawImage {
  Image8 pixels;
  std::string source_path;
  std::string class_label;
};

// Always exactly kCellSize x kCellSize x 3.
struct CellImage {
  Image8 pixels;
  std::string class_label;
  std::string source_path;
};

// Half-open pixel box: rows [row_min, row_max), cols [col_min, col_max).
struct BBox {
  int row_min = 0;
  int col_min = 0;
  int row_max = 0;
  int col_max = 0;

  int height() const { return row_max - row_min; }
  int width() const { return col_max - col_min; }
  bool contains(int row, int col) const {
    return row >= row_min && row < row_max && col >= col_min && col < col_max;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

// Stain mask: hue on the arc [hue_lo, hue_hi] (degrees, wrapping when
// lo > hi) and saturation above min_saturation. Components are 4-connected.
struct ColorDetectParams {
  double hue_lo = 200.0;
  double hue_hi = 350.0;
  double min_saturation = 0.25;
  int min_area = 400;
};

bool mask_pixel(const Image8& image, int row, int col, const ColorDetectParams& params);

BBox detect_cell_region(const RawImage& image, const ColorDetectParams& params = {});
CellImage extract_cell(const RawImage& image, const BBox& bbox);

enum class Split { kTrain, kTest };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct ManifestEntry {
  std::string path;  // relative to the manifest root
  std::string class_label;
  Split split = Split::kTrain;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> classes;  // sorted; defines label indices
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  double split_fraction = 0.8;

  int class_index(std::string_view label) const;
  std::vector<std::size_t> indices(Split split) const;
  std::filesystem::path absolute_path(const ManifestEntry& entry) const { return root / entry.path; }
};

DatasetManifest build_manifest(const std::filesystem::path& dataset_root, double split_fraction,
                               std::uint64_t seed);

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

CellImage load_cell(const DatasetManifest& manifest, const ManifestEntry& entry);

struct SynthClass {
  std::string name;
  double hue = 0.0;  // degrees
  double hue_jitter = 8.0;
  double saturation = 0.6;
  double value = 0.75;
  int radius_min = 22;
  int radius_max = 34;
  double texture_noise = 0.06;  // per-pixel RGB noise amplitude, [0,1] units
};

struct SynthSpec {
  std::vector<SynthClass> classes;
  int n_per_class = 200;
  int image_size = 160;
  double split_fraction = 0.8;
};

SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json synth_spec_to_json(const SynthSpec& spec);
// The two-class pink-vs-blue stand-in used by tests and the acceptance run.
SynthSpec default_synth_spec(int n_per_class);

RawImage synth_image(const SynthClass& cls, int image_size, std::uint64_t seed);
DatasetManifest synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir,
                              std::uint64_t seed);

struct ExtractReport {
  int extracted = 0;
  std::vector<std::string> skipped;  // source paths with no detectable cell
};

// Crops every image under <in_dir>/<class>/ into <out_dir>/<class>/<stem>.png
// (or .jpg). Images run in parallel; each output is written by one worker.
ExtractReport extract_directory(const std::filesystem::path& in_dir,
                                const std::filesystem::path& out_dir,
                                const ColorDetectParams& params, bool jpeg = false);

}  // namespace idt
