#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "idt/dtree.hpp"
#include "idt/features.hpp"
#include "idt/featviz.hpp"
#include "idt/model.hpp"
#include "json.hpp"

namespace idt {

struct IlluminateOptions {
  VizParams viz;
  bool positioned_objective = false;  // visualise the exact (row, col) instead of the channel mean
  int examples_per_node = 9;
  bool compute_missing_viz = true;  // false: reference cache entries without filling them
};

nlohmann::json illuminate_options_to_json(const IlluminateOptions& opts);
IlluminateOptions illuminate_options_from_json(const nlohmann::json& j);

struct ExampleRef {
  std::size_t row = 0;  // row of the feature table
  std::string path;
  int label = 0;
  Split split = Split::kTrain;
  friend bool operator==(const ExampleRef&, const ExampleRef&) = default;
};

struct NodeAnnotation {
  int node_id = 0;
  // Internal nodes only.
  std::string feature_name;
  std::string viz_ref;  // PNG path relative to the output directory
  int viz_channel = -1;
  std::optional<Position> viz_position;
  std::optional<bool> viz_dead;  // unset while the visualisation is not computed
  std::optional<ClassFlow> flow;
  // Every node: table rows routed here, in table order.
  std::size_t n_routed = 0;
  std::vector<ExampleRef> examples;  // first examples_per_node of them
  friend bool operator==(const NodeAnnotation&, const NodeAnnotation&) = default;
};

struct TreeMetrics {
  double tree_train_acc = 0.0;
  std::optional<double> tree_test_acc;
  std::optional<double> cnn_test_acc;
  friend bool operator==(const TreeMetrics&, const TreeMetrics&) = default;
};

nlohmann::json tree_metrics_to_json(const TreeMetrics& m);

struct IlluminatedTree {
  DecisionTree tree;
  std::vector<NodeAnnotation> nodes;  // parallel to tree.nodes
  TreeMetrics metrics;
  std::vector<std::string> excluded;  // feature names excluded when fitting
  friend bool operator==(const IlluminatedTree&, const IlluminatedTree&) = default;
};

inline constexpr const char* kAssetDirName = "assets";

// `table` holds every row (train and test); class flow is measured on the
// train rows, examples are routed from all rows. `cache` supplies and stores
// the node visualisations. `model` may be null when every visualisation is
// already cached or compute_missing_viz is off. Throws LayerMismatch when the
// tree width differs from the table's layer.
IlluminatedTree build_illuminated_tree(const DecisionTree& tree, const TrainedModel* model,
                                       const FeatureTable& table, VizCache& cache,
                                       const IlluminateOptions& opts,
                                       std::optional<double> cnn_test_acc = std::nullopt);

nlohmann::json illuminated_tree_to_json(const IlluminatedTree& itree);
IlluminatedTree illuminated_tree_from_json(const nlohmann::json& j);
void save_illuminated_tree(const std::filesystem::path& path, const IlluminatedTree& itree);
IlluminatedTree load_illuminated_tree(const std::filesystem::path& path);

struct SvgStyle {
  int card_width = 170;
  int card_height = 124;
  int leaf_height = 64;
  int thumb = 64;
  int h_gap = 24;
  int level_gap = 84;
  int margin = 20;
};

std::string render_tree_svg(const IlluminatedTree& itree, const SvgStyle& style = {});

// Everything needed to reopen a session: written as session.json by the
// pipeline and read by `idt serve`. Paths are relative to the session file.
struct SessionConfig {
  std::filesystem::path model_dir;
  std::filesystem::path features;
  std::filesystem::path asset_dir;
  TreeParams base_params;
  IlluminateOptions options;
};

nlohmann::json session_config_to_json(const SessionConfig& cfg);
SessionConfig session_config_from_json(const nlohmann::json& j);

struct SessionEntry {
  std::size_t index = 0;
  std::vector<std::string> requested;  // names passed to the rebuild
  int max_depth = 0;
  IlluminatedTree itree;
};

nlohmann::json session_entry_summary(const SessionEntry& entry);

// Exclude-and-rebuild history over a fixed feature table. Entry 0 is the
// baseline fitted with the base parameters. Rebuilds are serialised.
class Session {
 public:
  Session(FeatureTable table, std::optional<TrainedModel> model, TreeParams base,
          IlluminateOptions opts, std::filesystem::path asset_dir,
          std::optional<double> cnn_test_acc = std::nullopt);

  // Loads the model, table and parameters named by `session_file`.
  static std::unique_ptr<Session> open(const std::filesystem::path& session_file);

  std::shared_ptr<const SessionEntry> latest() const;
  std::shared_ptr<const SessionEntry> entry(std::size_t index) const;
  std::vector<std::shared_ptr<const SessionEntry>> history() const;
  std::size_t history_size() const;

  // Refits with base exclusions plus `names`. Throws BadFeatureName or
  // OutOfRange for invalid names.
  std::shared_ptr<const SessionEntry> rebuild_with_exclusions(
      const std::vector<std::string>& names, std::optional<int> max_depth = std::nullopt);
  // Same, but throws Busy instead of waiting when a rebuild is running.
  std::shared_ptr<const SessionEntry> try_rebuild_with_exclusions(
      const std::vector<std::string>& names, std::optional<int> max_depth = std::nullopt);

  const FeatureTable& table() const { return table_; }
  const TreeParams& base_params() const { return base_; }
  const IlluminateOptions& options() const { return opts_; }
  const std::filesystem::path& asset_root() const { return asset_root_; }
  VizCache& viz_cache() { return cache_; }
  bool has_model() const { return model_.has_value(); }
  const TrainedModel* model() const { return model_ ? &*model_ : nullptr; }

  // Called inside the rebuild critical section, before fitting (tests).
  void set_fit_hook(std::function<void()> hook) { fit_hook_ = std::move(hook); }

 private:
  std::shared_ptr<const SessionEntry> rebuild_locked(const std::vector<std::string>& names,
                                                     std::optional<int> max_depth);
  std::shared_ptr<SessionEntry> make_entry(const std::vector<std::string>& names,
                                           const TreeParams& params);

  FeatureTable table_;
  FeatureTable train_;
  std::optional<TrainedModel> model_;
  TreeParams base_;
  IlluminateOptions opts_;
  std::filesystem::path asset_root_;  // directory that contains assets/
  VizCache cache_;
  std::optional<double> cnn_test_acc_;
  std::function<void()> fit_hook_;

  std::mutex rebuild_mutex_;
  mutable std::mutex history_mutex_;
  std::vector<std::shared_ptr<const SessionEntry>> history_;
};

}  // namespace idt
