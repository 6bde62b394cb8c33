#include "idt/dtree.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "idt/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

double gini(std::span<const int> counts) {
  long total = 0;
  for (int c : counts) total += c;
  if (total <= 0) throw Error(ErrorCode::kEmptyNode, "gini of an empty node");
  double sum_sq = 0.0;
  for (int c : counts) {
    const double p = static_cast<double>(c) / total;
    sum_sq += p * p;
  }
  return 1.0 - sum_sq;
}

double entropy(std::span<const int> counts) {
  long total = 0;
  for (int c : counts) total += c;
  if (total <= 0) throw Error(ErrorCode::kEmptyNode, "entropy of an empty node");
  double h = 0.0;
  for (int c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log2(p);
  }
  return h;
}

SampleView view_of(const FeatureTable& table) {
  return {table.values, table.cols(), table.labels, table.n_classes()};
}

namespace {

// Split quality, larger is better. For Gini the score is the exact rational
// sum_k cL_k^2/nL + sum_k cR_k^2/nR (maximising it minimises the weighted
// child impurity), compared by cross-multiplication so ties are exact. For
// entropy the score is -(nL*H_L + nR*H_R).
struct Score {
  __int128 num = 0;
  __int128 den = 1;
  double approx = 0.0;
};

__int128 sum_sq(std::span<const int> counts) {
  __int128 s = 0;
  for (int c : counts) s += static_cast<__int128>(c) * c;
  return s;
}

double weighted_entropy(std::span<const int> counts, long n) {
  return n > 0 ? n * entropy(counts) : 0.0;
}

Score split_score(std::span<const int> left, long n_left, std::span<const int> right, long n_right,
                  Criterion criterion) {
  Score s;
  if (criterion == Criterion::kGini) {
    s.num = sum_sq(left) * n_right + sum_sq(right) * n_left;
    s.den = static_cast<__int128>(n_left) * n_right;
  } else {
    s.approx = -(weighted_entropy(left, n_left) + weighted_entropy(right, n_right));
  }
  return s;
}

Score parent_score(std::span<const int> counts, long n, Criterion criterion) {
  Score s;
  if (criterion == Criterion::kGini) {
    s.num = sum_sq(counts);
    s.den = n;
  } else {
    s.approx = -weighted_entropy(counts, n);
  }
  return s;
}

bool better(const Score& a, const Score& b, Criterion criterion) {
  if (criterion == Criterion::kGini) return a.num * b.den > b.num * a.den;
  return a.approx > b.approx;
}

double decrease_of(const Score& split, const Score& parent, long n, Criterion criterion) {
  if (criterion == Criterion::kGini) {
    const double s = static_cast<double>(split.num) / static_cast<double>(split.den);
    const double p = static_cast<double>(parent.num) / static_cast<double>(parent.den);
    return (s - p) / n;
  }
  return (split.approx - parent.approx) / n;
}

double midpoint(double lo, double hi) {
  const double mid = lo + (hi - lo) / 2.0;
  // Adjacent doubles: keep lo so that hi > threshold still holds.
  return mid < hi ? mid : lo;
}

struct Candidate {
  NodeSplit split;
  Score score;
};

std::vector<std::size_t> resolve_rows(const SampleView& samples, std::span<const std::size_t> rows) {
  if (!rows.empty()) return {rows.begin(), rows.end()};
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  return all;
}

std::vector<int> histogram_of(const SampleView& samples, std::span<const std::size_t> rows) {
  std::vector<int> h(samples.n_classes, 0);
  for (std::size_t r : rows) ++h[samples.labels[r]];
  return h;
}

// Sorted sweep over one feature. Thresholds are visited in increasing
// order and only strict improvements replace the incumbent, so the lowest
// threshold wins ties.
std::optional<Candidate> best_for_feature(const SampleView& samples, std::size_t feature,
                                          std::span<const std::size_t> rows,
                                          std::span<const int> parent_hist, int min_leaf,
                                          Criterion criterion,
                                          std::vector<std::pair<double, int>>& scratch) {
  const long n = static_cast<long>(rows.size());
  scratch.clear();
  for (std::size_t r : rows) scratch.emplace_back(samples.at(r, feature), samples.labels[r]);
  std::sort(scratch.begin(), scratch.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  if (scratch.front().first == scratch.back().first) return std::nullopt;

  std::vector<int> right(samples.n_classes, 0);  // values <= threshold
  std::vector<int> left(parent_hist.begin(), parent_hist.end());
  std::optional<Candidate> best;
  for (long i = 0; i + 1 < n; ++i) {
    ++right[scratch[i].second];
    --left[scratch[i].second];
    if (scratch[i].first == scratch[i + 1].first) continue;
    const long n_right = i + 1, n_left = n - n_right;
    if (n_right < min_leaf || n_left < min_leaf) continue;
    const Score s = split_score(left, n_left, right, n_right, criterion);
    if (!best || better(s, best->score, criterion)) {
      best = Candidate{{feature, midpoint(scratch[i].first, scratch[i + 1].first), 0.0,
                        static_cast<std::size_t>(n_left), static_cast<std::size_t>(n_right)},
                       s};
    }
  }
  return best;
}

std::optional<NodeSplit> finish(std::optional<Candidate> best, std::span<const int> parent_hist,
                                long n, Criterion criterion) {
  if (!best) return std::nullopt;
  const Score parent = parent_score(parent_hist, n, criterion);
  best->split.impurity_decrease = std::max(0.0, decrease_of(best->score, parent, n, criterion));
  return best->split;
}

}  // namespace

std::optional<NodeSplit> best_split(const SampleView& samples, const std::set<std::size_t>& excluded,
                                    int min_samples_leaf, Criterion criterion,
                                    std::span<const std::size_t> rows_in) {
  const std::vector<std::size_t> rows = resolve_rows(samples, rows_in);
  if (rows.size() < 2) return std::nullopt;
  const std::vector<int> parent_hist = histogram_of(samples, rows);

  const auto n_features = static_cast<std::ptrdiff_t>(samples.n_features);
  std::vector<std::optional<Candidate>> per_feature(samples.n_features);
#pragma omp parallel
  {
    std::vector<std::pair<double, int>> scratch;
    scratch.reserve(rows.size());
#pragma omp for schedule(dynamic, 64)
    for (std::ptrdiff_t f = 0; f < n_features; ++f) {
      if (excluded.count(static_cast<std::size_t>(f))) continue;
      per_feature[f] = best_for_feature(samples, static_cast<std::size_t>(f), rows, parent_hist,
                                        min_samples_leaf, criterion, scratch);
    }
  }
  // Feature-order reduction; strict comparison keeps the lowest index on ties.
  std::optional<Candidate> best;
  for (auto& cand : per_feature) {
    if (cand && (!best || better(cand->score, best->score, criterion))) best = cand;
  }
  return finish(best, parent_hist, static_cast<long>(rows.size()), criterion);
}

namespace reference {

std::optional<NodeSplit> best_split(const SampleView& samples, const std::set<std::size_t>& excluded,
                                    int min_samples_leaf, Criterion criterion,
                                    std::span<const std::size_t> rows_in) {
  const std::vector<std::size_t> rows = resolve_rows(samples, rows_in);
  if (rows.size() < 2) return std::nullopt;
  const std::vector<int> parent_hist = histogram_of(samples, rows);
  const long n = static_cast<long>(rows.size());

  // Direct enumeration: every feature, every midpoint, count both sides.
  std::optional<Candidate> best;
  for (std::size_t f = 0; f < samples.n_features; ++f) {
    if (excluded.count(f)) continue;
    std::vector<double> distinct;
    for (std::size_t r : rows) distinct.push_back(samples.at(r, f));
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    for (std::size_t i = 0; i + 1 < distinct.size(); ++i) {
      const double thr = midpoint(distinct[i], distinct[i + 1]);
      std::vector<int> left(samples.n_classes, 0), right(samples.n_classes, 0);
      long n_left = 0;
      for (std::size_t r : rows) {
        if (samples.at(r, f) > thr) {
          ++left[samples.labels[r]];
          ++n_left;
        } else {
          ++right[samples.labels[r]];
        }
      }
      const long n_right = n - n_left;
      if (n_left < min_samples_leaf || n_right < min_samples_leaf) continue;
      const Score s = split_score(left, n_left, right, n_right, criterion);
      if (!best || better(s, best->score, criterion)) {
        best = Candidate{{f, thr, 0.0, static_cast<std::size_t>(n_left),
                          static_cast<std::size_t>(n_right)},
                         s};
      }
    }
  }
  return finish(best, parent_hist, n, criterion);
}

}  // namespace reference

int DecisionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int deepest = 0;
  for (const TreeNode& node : nodes) {
    if (node.leaf) continue;
    d[node.left] = d[node.right] = d[node.id] + 1;
    deepest = std::max(deepest, d[node.id] + 1);
  }
  return deepest;
}

namespace {

int majority(std::span<const int> hist) {
  int best = 0;
  for (std::size_t k = 1; k < hist.size(); ++k)
    if (hist[k] > hist[best]) best = static_cast<int>(k);
  return best;
}

void grow(DecisionTree& tree, const SampleView& samples, const TreeParams& params,
          std::vector<std::size_t> rows, int depth) {
  const int id = static_cast<int>(tree.nodes.size());
  TreeNode node;
  node.id = id;
  node.histogram = histogram_of(samples, rows);
  node.predicted_class = majority(node.histogram);
  tree.nodes.push_back(node);

  const bool pure =
      std::count_if(node.histogram.begin(), node.histogram.end(), [](int c) { return c > 0; }) <= 1;
  if (depth >= params.max_depth || static_cast<int>(rows.size()) < params.min_samples_split || pure) {
    return;
  }
  const auto split = best_split(samples, params.excluded_features, params.min_samples_leaf,
                                params.criterion, rows);
  if (!split) return;

  std::vector<std::size_t> left_rows, right_rows;
  for (std::size_t r : rows) {
    (samples.at(r, split->feature_index) > split->threshold ? left_rows : right_rows).push_back(r);
  }
  rows.clear();
  rows.shrink_to_fit();

  tree.nodes[id].leaf = false;
  tree.nodes[id].feature_index = split->feature_index;
  tree.nodes[id].threshold = split->threshold;
  tree.nodes[id].left = static_cast<int>(tree.nodes.size());
  grow(tree, samples, params, std::move(left_rows), depth + 1);
  tree.nodes[id].right = static_cast<int>(tree.nodes.size());
  grow(tree, samples, params, std::move(right_rows), depth + 1);
}

}  // namespace

DecisionTree fit_tree(const FeatureTable& table, const TreeParams& params) {
  if (table.rows() == 0) throw Error(ErrorCode::kEmptyTable, "cannot fit a tree on an empty table");
  if (params.max_depth < 0 || params.min_samples_split < 2 || params.min_samples_leaf < 1) {
    throw Error(ErrorCode::kInvalidArgument, "invalid tree parameters");
  }
  for (std::size_t f : params.excluded_features) {
    if (f >= table.cols()) {
      throw Error(ErrorCode::kOutOfRange, "excluded feature " + std::to_string(f) + " out of range");
    }
  }
  DecisionTree tree;
  tree.layer_name = table.layer_name;
  tree.layer_shape = table.layer_shape;
  tree.class_order = table.class_order;
  std::vector<std::size_t> rows(table.rows());
  std::iota(rows.begin(), rows.end(), 0);
  grow(tree, view_of(table), params, std::move(rows), 0);
  return tree;
}

std::vector<int> decision_path(const DecisionTree& tree, std::span<const double> vector) {
  if (vector.size() != tree.n_features()) {
    throw Error(ErrorCode::kDimensionMismatch, "vector has " + std::to_string(vector.size()) +
                                                   " features, tree expects " +
                                                   std::to_string(tree.n_features()));
  }
  std::vector<int> path;
  int id = 0;
  while (true) {
    path.push_back(id);
    const TreeNode& node = tree.nodes[id];
    if (node.leaf) return path;
    id = vector[node.feature_index] > node.threshold ? node.left : node.right;
  }
}

int predict(const DecisionTree& tree, std::span<const double> vector) {
  return tree.nodes[decision_path(tree, vector).back()].predicted_class;
}

double tree_accuracy(const DecisionTree& tree, const FeatureTable& table) {
  if (table.rows() == 0) throw Error(ErrorCode::kEmptyTable, "cannot score on an empty table");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < table.rows(); ++i)
    if (predict(tree, table.row(i)) == table.labels[i]) ++correct;
  return static_cast<double>(correct) / table.rows();
}

std::vector<ClassFlow> class_flow(const DecisionTree& tree, const FeatureTable& table) {
  if (table.rows() == 0) throw Error(ErrorCode::kEmptyTable, "cannot compute flow on an empty table");
  const int k_n = tree.n_classes();
  std::vector<ClassFlow> flows(tree.nodes.size());
  for (const TreeNode& node : tree.nodes) {
    flows[node.id].node_id = node.id;
    flows[node.id].left_counts.assign(k_n, 0);
    flows[node.id].right_counts.assign(k_n, 0);
  }
  for (std::size_t i = 0; i < table.rows(); ++i) {
    const auto path = decision_path(tree, table.row(i));
    for (std::size_t p = 0; p + 1 < path.size(); ++p) {
      const TreeNode& node = tree.nodes[path[p]];
      auto& counts = path[p + 1] == node.left ? flows[node.id].left_counts : flows[node.id].right_counts;
      ++counts[table.labels[i]];
    }
  }
  std::vector<ClassFlow> out;
  for (const TreeNode& node : tree.nodes) {
    if (node.leaf) continue;
    ClassFlow f = std::move(flows[node.id]);
    f.fraction_left.assign(k_n, 0.0);
    f.fraction_right.assign(k_n, 0.0);
    for (int k = 0; k < k_n; ++k) {
      const int total = f.left_counts[k] + f.right_counts[k];
      if (total == 0) continue;
      f.fraction_left[k] = static_cast<double>(f.left_counts[k]) / total;
      f.fraction_right[k] = static_cast<double>(f.right_counts[k]) / total;
    }
    out.push_back(std::move(f));
  }
  return out;
}

json tree_to_json(const DecisionTree& tree) {
  json nodes = json::array();
  for (const TreeNode& n : tree.nodes) {
    json j = {{"id", n.id},
              {"feature", nullptr},
              {"feature_index", nullptr},
              {"threshold", nullptr},
              {"left", nullptr},
              {"right", nullptr},
              {"histogram", n.histogram},
              {"predicted_class", n.predicted_class}};
    if (!n.leaf) {
      j["feature"] = format_feature_name(feature_id_of(n.feature_index, tree.layer_shape));
      j["feature_index"] = n.feature_index;
      j["threshold"] = n.threshold;
      j["left"] = n.left;
      j["right"] = n.right;
    }
    nodes.push_back(std::move(j));
  }
  return {{"format", "idt-tree-1"},
          {"layer_name", tree.layer_name},
          {"layer_shape", {tree.layer_shape.height, tree.layer_shape.width, tree.layer_shape.channels}},
          {"class_order", tree.class_order},
          {"nodes", std::move(nodes)}};
}

DecisionTree tree_from_json(const json& j) {
  DecisionTree tree;
  tree.layer_name = j.at("layer_name").get<std::string>();
  const auto shape = j.at("layer_shape").get<std::vector<int>>();
  tree.layer_shape = {shape.at(0), shape.at(1), shape.at(2)};
  tree.class_order = j.at("class_order").get<std::vector<std::string>>();
  for (const auto& jn : j.at("nodes")) {
    TreeNode n;
    n.id = jn.at("id").get<int>();
    n.histogram = jn.at("histogram").get<std::vector<int>>();
    n.predicted_class = jn.at("predicted_class").get<int>();
    n.leaf = jn.at("feature").is_null();
    if (!n.leaf) {
      n.feature_index = feature_index_of_name(jn.at("feature").get<std::string>(), tree.layer_shape);
      n.threshold = jn.at("threshold").get<double>();
      n.left = jn.at("left").get<int>();
      n.right = jn.at("right").get<int>();
    }
    tree.nodes.push_back(std::move(n));
  }
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    if (tree.nodes[i].id != static_cast<int>(i)) {
      throw Error(ErrorCode::kInvalidArgument, "tree node ids must equal their positions");
    }
  }
  return tree;
}

void save_tree(const fs::path& path, const DecisionTree& tree) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << tree_to_json(tree).dump(2) << "\n";
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

DecisionTree load_tree(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  return tree_from_json(json::parse(in));
}

}  // namespace idt
