#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "idt/features.hpp"
#include "json.hpp"

namespace idt {

enum class Criterion { kGini, kEntropy };

struct TreeParams {
  int max_depth = 4;
  int min_samples_split = 2;
  int min_samples_leaf = 1;
  std::set<std::size_t> excluded_features;
  Criterion criterion = Criterion::kGini;
  std::uint64_t seed = 0;  // recorded only; fitting is fully deterministic
};

// Internal nodes route a sample LEFT when its feature value is strictly
// greater than the threshold, and RIGHT otherwise. This is the reverse of
// the usual `<=`-goes-left library convention.
struct TreeNode {
  int id = 0;
  bool leaf = true;
  std::size_t feature_index = 0;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int predicted_class = 0;
  std::vector<int> histogram;  // training samples per class reaching the node
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct DecisionTree {
  std::string layer_name;
  Shape3 layer_shape;  // n_features == layer_shape.size()
  std::vector<std::string> class_order;
  std::vector<TreeNode> nodes;  // nodes[0] is the root; ids equal indices (pre-order)

  std::size_t n_features() const { return layer_shape.size(); }
  int n_classes() const { return static_cast<int>(class_order.size()); }
  const TreeNode& root() const { return nodes.front(); }
  int depth() const;
  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

// 1 - sum p_k^2. Throws EmptyNode when the counts sum to zero.
double gini(std::span<const int> counts);
double entropy(std::span<const int> counts);

struct NodeSplit {
  std::size_t feature_index = 0;
  double threshold = 0.0;
  double impurity_decrease = 0.0;
  std::size_t n_left = 0;
  std::size_t n_right = 0;
};

// Row-major samples (n x n_features) and their labels.
struct SampleView {
  std::span<const double> values;
  std::size_t n_features = 0;
  std::span<const int> labels;
  int n_classes = 0;

  std::size_t size() const { return labels.size(); }
  double at(std::size_t row, std::size_t feature) const { return values[row * n_features + feature]; }
};

SampleView view_of(const FeatureTable& table);

// Best split over the non-excluded features, candidate thresholds at
// midpoints of consecutive distinct values. Maximises the impurity decrease;
// ties go to the lowest feature index, then the lowest threshold. A split
// with zero decrease is still returned (balanced XOR needs one at the root);
// nullopt means no candidate exists: every usable feature is constant or
// excluded, or min_samples_leaf rules out every threshold. `rows` restricts
// the search to a subset of the sample rows (all rows when empty).
std::optional<NodeSplit> best_split(const SampleView& samples, const std::set<std::size_t>& excluded,
                                int min_samples_leaf = 1, Criterion criterion = Criterion::kGini,
                                std::span<const std::size_t> rows = {});

namespace reference {
// Serial implementation of the same contract, kept for tests and benchmarks.
std::optional<NodeSplit> best_split(const SampleView& samples, const std::set<std::size_t>& excluded,
                                int min_samples_leaf = 1, Criterion criterion = Criterion::kGini,
                                std::span<const std::size_t> rows = {});
}  // namespace reference

// Greedy recursive partitioning; stops at max_depth, min_samples_split,
// purity, or when no split exists. Never splits on an excluded feature.
DecisionTree fit_tree(const FeatureTable& table, const TreeParams& params);

// Throws DimensionMismatch on a wrong-length vector.
int predict(const DecisionTree& tree, std::span<const double> vector);
// Node ids visited from root to leaf.
std::vector<int> decision_path(const DecisionTree& tree, std::span<const double> vector);

double tree_accuracy(const DecisionTree& tree, const FeatureTable& table);

struct ClassFlow {
  int node_id = 0;
  std::vector<int> left_counts;
  std::vector<int> right_counts;
  std::vector<double> fraction_left;   // 0 for classes absent at the node
  std::vector<double> fraction_right;
  friend bool operator==(const ClassFlow&, const ClassFlow&) = default;
};

// One entry per internal node, in node-id order.
std::vector<ClassFlow> class_flow(const DecisionTree& tree, const FeatureTable& table);

nlohmann::json tree_to_json(const DecisionTree& tree);
DecisionTree tree_from_json(const nlohmann::json& j);
void save_tree(const std::filesystem::path& path, const DecisionTree& tree);
DecisionTree load_tree(const std::filesystem::path& path);

}  // namespace idt
