#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "idt/cellcrop.hpp"
#include "idt/dtree.hpp"
#include "idt/error.hpp"
#include "idt/illuminate.hpp"
#include "idt/model.hpp"
#include "json.hpp"

namespace idt {

// Declarative form of every pipeline flag. JSON sections: data, model, viz,
// tree, illuminate; plus top-level seed and out.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "idt_out";

  // data: synthetic (default), raw images needing extraction, or crops.
  std::optional<SynthSpec> synth;
  std::filesystem::path raw_dir;
  std::filesystem::path crops_dir;
  ColorDetectParams detect;
  bool jpeg_crops = false;
  double split_fraction = 0.8;

  std::string preset = "cnn4";
  std::string layer;  // empty: the preset's designated layer
  HyperParams train;

  VizParams viz;
  std::string viz_channels = "0..23";  // layer grid; empty skips the grid
  bool positioned_objective = false;

  TreeParams tree;
  std::vector<std::string> exclude;
  int examples_per_node = 9;
};

PipelineConfig default_pipeline_config();
nlohmann::json pipeline_config_to_json(const PipelineConfig& cfg);
// Fields absent from `j` keep their value in `base`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = default_pipeline_config());
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string resolved_layer(const PipelineConfig& cfg);

// A module error tagged with the pipeline stage it came from.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, ErrorCode code, const std::string& detail);
  const std::string& stage() const { return stage_; }
  ErrorCode code() const { return code_; }

 private:
  std::string stage_;
  ErrorCode code_;
};

// "0..23", "1,5,9", or a mix ("0..3,9"); each entry must be < n_channels.
std::vector<int> parse_channel_list(std::string_view spec, int n_channels);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
// Hash of every regular file's relative path and bytes under `dir`, in sorted order.
std::uint64_t hash_directory(const std::filesystem::path& dir);

// Exclusive advisory lock on <dir>/.idt.lock, released on destruction or
// process exit. Throws Busy when held elsewhere.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

// Writes `content` only when the file is missing or differs, so unchanged
// outputs keep their timestamps. Returns true when written.
bool write_if_changed(const std::filesystem::path& path, const std::string& content);

// ---- stages, usable on their own by the CLI ----

DatasetManifest resolve_dataset(const std::filesystem::path& data, double split_fraction, std::uint64_t seed);

TrainedModel run_train_stage(const DatasetManifest& manifest, const PipelineConfig& cfg,
                             const std::filesystem::path& checkpoint_dir);
FeatureTable run_features_stage(const TrainedModel& model, const DatasetManifest& manifest,
                                const std::string& layer, const std::filesystem::path& out_file);
// Layer grid PNG plus per-channel PNG + JSON in `out_dir`.
LayerGrid run_viz_stage(const TrainedModel& model, const std::string& layer,
                        const std::vector<int>& channels, const VizParams& params,
                        const std::filesystem::path& out_dir);
DecisionTree run_tree_stage(const FeatureTable& table, TreeParams params,
                            const std::vector<std::string>& exclude,
                            const std::filesystem::path& out_file);
IlluminatedTree run_illuminate_stage(const DecisionTree& tree, const TrainedModel& model,
                                     const FeatureTable& table, const IlluminateOptions& opts,
                                     const std::filesystem::path& out_dir);

struct StageOutcome {
  std::string stage;
  bool ran = false;  // false: skipped, outputs were up to date
};

struct PipelineReport {
  std::vector<StageOutcome> stages;
  nlohmann::json metrics;
};

// Full pipeline into cfg.out. Stages skip when their outputs exist and their
// input hash is unchanged, unless `force`. Throws StageError.
PipelineReport run_pipeline(const PipelineConfig& cfg, bool force = false);

IlluminateOptions illuminate_options_of(const PipelineConfig& cfg);

}  // namespace idt
