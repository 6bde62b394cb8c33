#include "idt/illuminate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "idt/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

json illuminate_options_to_json(const IlluminateOptions& opts) {
  return {{"viz", viz_params_to_json(opts.viz)},
          {"positioned_objective", opts.positioned_objective},
          {"examples_per_node", opts.examples_per_node},
          {"compute_missing_viz", opts.compute_missing_viz}};
}

IlluminateOptions illuminate_options_from_json(const json& j) {
  IlluminateOptions o;
  if (j.contains("viz")) o.viz = viz_params_from_json(j.at("viz"));
  o.positioned_objective = j.value("positioned_objective", o.positioned_objective);
  o.examples_per_node = j.value("examples_per_node", o.examples_per_node);
  o.compute_missing_viz = j.value("compute_missing_viz", o.compute_missing_viz);
  return o;
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> number_or_null(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

json tree_metrics_to_json(const TreeMetrics& m) {
  return {{"tree_train_acc", m.tree_train_acc},
          {"tree_test_acc", optional_number(m.tree_test_acc)},
          {"cnn_test_acc", optional_number(m.cnn_test_acc)}};
}

namespace {

TreeMetrics tree_metrics_from_json(const json& j) {
  TreeMetrics m;
  m.tree_train_acc = j.at("tree_train_acc").get<double>();
  m.tree_test_acc = number_or_null(j, "tree_test_acc");
  m.cnn_test_acc = number_or_null(j, "cnn_test_acc");
  return m;
}

std::vector<std::string> names_of(const std::set<std::size_t>& features, Shape3 shape) {
  std::vector<std::string> out;
  for (std::size_t f : features) out.push_back(format_feature_name(feature_id_of(f, shape)));
  return out;
}

}  // namespace

IlluminatedTree build_illuminated_tree(const DecisionTree& tree, const TrainedModel* model,
                                       const FeatureTable& table, VizCache& cache,
                                       const IlluminateOptions& opts,
                                       std::optional<double> cnn_test_acc) {
  if (tree.n_features() != table.cols() || tree.layer_shape != table.layer_shape) {
    throw Error(ErrorCode::kLayerMismatch,
                "tree has " + std::to_string(tree.n_features()) + " features, layer " +
                    table.layer_name + " has " + std::to_string(table.cols()));
  }
  if (model) {
    const Shape3 shape = model->layer_shape(tree.layer_name);
    if (shape != tree.layer_shape) {
      throw Error(ErrorCode::kLayerMismatch, "tree width does not match layer " + tree.layer_name +
                                                 " of the model");
    }
  }

  IlluminatedTree it;
  it.tree = tree;
  it.nodes.resize(tree.nodes.size());
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) it.nodes[i].node_id = static_cast<int>(i);

  // Visualisations: one per distinct cache key, shared between nodes.
  for (const TreeNode& node : tree.nodes) {
    if (node.leaf) continue;
    NodeAnnotation& a = it.nodes[node.id];
    const FeatureId fid = feature_id_of(node.feature_index, tree.layer_shape, tree.layer_name);
    a.feature_name = format_feature_name(fid);
    a.viz_channel = fid.channel;
    if (opts.positioned_objective) a.viz_position = Position{fid.row, fid.col};
    a.viz_ref = std::string(kAssetDirName) + "/" +
                VizCache::png_name(tree.layer_name, fid.channel, a.viz_position);

    VizParams params = opts.viz;
    params.position = a.viz_position;
    std::optional<FeatureImage> viz;
    if (opts.compute_missing_viz && model) {
      viz = cache.get_or_compute(*model, tree.layer_name, fid.channel, params);
    } else {
      viz = cache.find(tree.layer_name, fid.channel, a.viz_position);
    }
    if (viz) a.viz_dead = viz->dead;
  }

  // Class flow on the rows the tree was fitted on.
  const FeatureTable train = table.subset(Split::kTrain);
  if (train.rows() > 0) {
    for (ClassFlow& f : class_flow(tree, train)) it.nodes[f.node_id].flow = std::move(f);
  }

  // Examples routed from every row, in table order.
  const auto k = static_cast<std::size_t>(std::max(0, opts.examples_per_node));
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (int id : decision_path(tree, table.row(r))) {
      NodeAnnotation& a = it.nodes[id];
      ++a.n_routed;
      if (a.examples.size() < k) a.examples.push_back({r, table.paths[r], table.labels[r], table.splits[r]});
    }
  }

  it.metrics.tree_train_acc = train.rows() > 0 ? tree_accuracy(tree, train) : 0.0;
  const FeatureTable test = table.subset(Split::kTest);
  if (test.rows() > 0) it.metrics.tree_test_acc = tree_accuracy(tree, test);
  it.metrics.cnn_test_acc = cnn_test_acc;
  if (!cnn_test_acc && model) it.metrics.cnn_test_acc = model->metrics.final_test_acc;
  return it;
}

namespace {

json flow_to_json(const ClassFlow& f) {
  return {{"left_counts", f.left_counts},
          {"right_counts", f.right_counts},
          {"fraction_left", f.fraction_left},
          {"fraction_right", f.fraction_right}};
}

ClassFlow flow_from_json(int node_id, const json& j) {
  ClassFlow f;
  f.node_id = node_id;
  f.left_counts = j.at("left_counts").get<std::vector<int>>();
  f.right_counts = j.at("right_counts").get<std::vector<int>>();
  f.fraction_left = j.at("fraction_left").get<std::vector<double>>();
  f.fraction_right = j.at("fraction_right").get<std::vector<double>>();
  return f;
}

}  // namespace

json illuminated_tree_to_json(const IlluminatedTree& it) {
  json nodes = json::array();
  for (const NodeAnnotation& a : it.nodes) {
    const bool internal = !it.tree.nodes[a.node_id].leaf;
    json examples = json::array();
    for (const ExampleRef& e : a.examples) {
      examples.push_back(
          {{"row", e.row}, {"path", e.path}, {"label", e.label}, {"split", split_name(e.split)}});
    }
    json j = {{"id", a.node_id},
              {"feature_name", internal ? json(a.feature_name) : json(nullptr)},
              {"viz_ref", internal ? json(a.viz_ref) : json(nullptr)},
              {"viz_channel", internal ? json(a.viz_channel) : json(nullptr)},
              {"viz_position", nullptr},
              {"viz_dead", a.viz_dead ? json(*a.viz_dead) : json(nullptr)},
              {"flow", a.flow ? flow_to_json(*a.flow) : json(nullptr)},
              {"n_routed", a.n_routed},
              {"examples", std::move(examples)}};
    if (a.viz_position) j["viz_position"] = {a.viz_position->row, a.viz_position->col};
    nodes.push_back(std::move(j));
  }
  return {{"format", "idt-itree-1"},
          {"tree", tree_to_json(it.tree)},
          {"nodes", std::move(nodes)},
          {"metrics", tree_metrics_to_json(it.metrics)},
          {"excluded", it.excluded}};
}

IlluminatedTree illuminated_tree_from_json(const json& j) {
  if (j.value("format", "") != "idt-itree-1") {
    throw Error(ErrorCode::kInvalidArgument, "not an illuminated tree document");
  }
  IlluminatedTree it;
  it.tree = tree_from_json(j.at("tree"));
  for (const json& jn : j.at("nodes")) {
    NodeAnnotation a;
    a.node_id = jn.at("id").get<int>();
    if (!jn.at("feature_name").is_null()) {
      a.feature_name = jn.at("feature_name").get<std::string>();
      a.viz_ref = jn.at("viz_ref").get<std::string>();
      a.viz_channel = jn.at("viz_channel").get<int>();
    }
    if (!jn.at("viz_position").is_null()) {
      a.viz_position = Position{jn.at("viz_position").at(0).get<int>(), jn.at("viz_position").at(1).get<int>()};
    }
    if (!jn.at("viz_dead").is_null()) a.viz_dead = jn.at("viz_dead").get<bool>();
    if (!jn.at("flow").is_null()) a.flow = flow_from_json(a.node_id, jn.at("flow"));
    a.n_routed = jn.at("n_routed").get<std::size_t>();
    for (const json& e : jn.at("examples")) {
      a.examples.push_back({e.at("row").get<std::size_t>(), e.at("path").get<std::string>(),
                            e.at("label").get<int>(), parse_split(e.at("split").get<std::string>())});
    }
    it.nodes.push_back(std::move(a));
  }
  if (it.nodes.size() != it.tree.nodes.size()) {
    throw Error(ErrorCode::kInvalidArgument, "node annotations do not match the tree");
  }
  it.metrics = tree_metrics_from_json(j.at("metrics"));
  it.excluded = j.at("excluded").get<std::vector<std::string>>();
  return it;
}

void save_illuminated_tree(const fs::path& path, const IlluminatedTree& itree) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << illuminated_tree_to_json(itree).dump(2) << "\n";
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

IlluminatedTree load_illuminated_tree(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  return illuminated_tree_from_json(json::parse(in));
}

// ---- SVG ----

namespace {

constexpr std::array<const char*, 8> kClassColours = {"#e0559a", "#3b6fd4", "#f2a33a", "#3aa76d",
                                                      "#8a5cc7", "#c94c3b", "#5bb5c9", "#8c8c3a"};

const char* class_colour(int k) { return kClassColours[static_cast<std::size_t>(k) % kClassColours.size()]; }

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

int percent(double fraction) { return static_cast<int>(std::lround(100.0 * fraction)); }

struct Layout {
  std::vector<double> x;  // card centre
  std::vector<int> level;
  int n_leaves = 0;
  int depth = 0;
};

double place(const DecisionTree& t, int id, int level, Layout& L, double slot) {
  L.level[id] = level;
  L.depth = std::max(L.depth, level);
  const TreeNode& n = t.nodes[id];
  if (n.leaf) {
    L.x[id] = (L.n_leaves + 0.5) * slot;
    ++L.n_leaves;
  } else {
    const double xl = place(t, n.left, level + 1, L, slot);
    const double xr = place(t, n.right, level + 1, L, slot);
    L.x[id] = (xl + xr) / 2.0;
  }
  return L.x[id];
}

}  // namespace

std::string render_tree_svg(const IlluminatedTree& it, const SvgStyle& s) {
  const DecisionTree& t = it.tree;
  Layout L;
  L.x.assign(t.nodes.size(), 0.0);
  L.level.assign(t.nodes.size(), 0);
  const double slot = s.card_width + s.h_gap;
  if (!t.nodes.empty()) place(t, 0, 0, L, slot);

  const int row_h = s.card_height + s.level_gap;
  const int width = static_cast<int>(std::max(1, L.n_leaves) * slot) + 2 * s.margin;
  const int height = (L.depth + 1) * row_h - s.level_gap + 2 * s.margin + 40;
  auto top = [&](int id) { return s.margin + 40 + L.level[id] * row_h; };
  auto cx = [&](int id) { return s.margin + L.x[id]; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\""
    << width << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " " << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";

  // Header with metrics and class legend.
  std::string header = "tree train " + fmt(it.metrics.tree_train_acc, "%.3f");
  if (it.metrics.tree_test_acc) header += "  tree test " + fmt(*it.metrics.tree_test_acc, "%.3f");
  if (it.metrics.cnn_test_acc) header += "  cnn test " + fmt(*it.metrics.cnn_test_acc, "%.3f");
  o << "<text class=\"metrics\" x=\"" << s.margin << "\" y=\"" << s.margin + 4 << "\">"
    << escape_xml(header) << "</text>\n";
  for (int k = 0; k < t.n_classes(); ++k) {
    const int lx = s.margin + k * 110;
    o << "<rect x=\"" << lx << "\" y=\"" << s.margin + 12 << "\" width=\"10\" height=\"10\" fill=\""
      << class_colour(k) << "\"/><text x=\"" << lx + 14 << "\" y=\"" << s.margin + 21 << "\">"
      << escape_xml(t.class_order[k]) << "</text>\n";
  }

  // Edges first so cards paint over them.
  for (const TreeNode& n : t.nodes) {
    if (n.leaf) continue;
    const NodeAnnotation& a = it.nodes[n.id];
    const double x0 = cx(n.id);
    const double y0 = top(n.id) + s.card_height;
    for (int side = 0; side < 2; ++side) {
      const int child = side == 0 ? n.left : n.right;
      const double x1 = cx(child);
      const double y1 = top(child);
      o << "<line class=\"edge\" x1=\"" << fmt(x0, "%.1f") << "\" y1=\"" << fmt(y0, "%.1f")
        << "\" x2=\"" << fmt(x1, "%.1f") << "\" y2=\"" << fmt(y1, "%.1f")
        << "\" stroke=\"#555555\" stroke-width=\"1.5\"/>\n";
      const double lx = (x0 + x1) / 2.0 + (side == 0 ? -6 : 6);
      const double ly = (y0 + y1) / 2.0 - 4;
      const char* anchor = side == 0 ? "end" : "start";
      o << "<text class=\"branch\" x=\"" << fmt(lx, "%.1f") << "\" y=\"" << fmt(ly - 12, "%.1f")
        << "\" text-anchor=\"" << anchor << "\" font-style=\"italic\">"
        << (side == 0 ? "&gt; " : "&lt;= ") << fmt(n.threshold) << "</text>\n";
      if (!a.flow) continue;
      const auto& frac = side == 0 ? a.flow->fraction_left : a.flow->fraction_right;
      const auto& l = a.flow->left_counts;
      const auto& r = a.flow->right_counts;
      for (int k = 0; k < t.n_classes(); ++k) {
        if (l[k] + r[k] == 0) continue;
        o << "<text class=\"flow\" x=\"" << fmt(lx, "%.1f") << "\" y=\"" << fmt(ly + 12 * k, "%.1f")
          << "\" text-anchor=\"" << anchor << "\" fill=\"" << class_colour(k) << "\">"
          << escape_xml(t.class_order[k]) << " " << percent(frac[k]) << "%</text>\n";
      }
    }
  }

  for (const TreeNode& n : t.nodes) {
    const NodeAnnotation& a = it.nodes[n.id];
    const double x = cx(n.id) - s.card_width / 2.0;
    const int y = top(n.id);
    if (!n.leaf) {
      o << "<g class=\"node internal\" data-node=\"" << n.id << "\">\n"
        << "<rect x=\"" << fmt(x, "%.1f") << "\" y=\"" << y << "\" width=\"" << s.card_width
        << "\" height=\"" << s.card_height
        << "\" rx=\"6\" fill=\"#f7f7f7\" stroke=\"#333333\"/>\n"
        << "<image x=\"" << fmt(cx(n.id) - s.thumb / 2.0, "%.1f") << "\" y=\"" << y + 6
        << "\" width=\"" << s.thumb << "\" height=\"" << s.thumb << "\" href=\""
        << escape_xml(a.viz_ref) << "\" xlink:href=\"" << escape_xml(a.viz_ref) << "\"/>\n"
        << "<text x=\"" << fmt(cx(n.id), "%.1f") << "\" y=\"" << y + s.thumb + 22
        << "\" text-anchor=\"middle\" font-weight=\"bold\">" << escape_xml(a.feature_name)
        << "</text>\n"
        << "<text x=\"" << fmt(cx(n.id), "%.1f") << "\" y=\"" << y + s.thumb + 38
        << "\" text-anchor=\"middle\">&gt; " << fmt(n.threshold) << "</text>\n"
        << "</g>\n";
      continue;
    }
    long total = 0;
    for (int c : n.histogram) total += c;
    const double bar_w = s.card_width - 16;
    o << "<g class=\"node leaf\" data-node=\"" << n.id << "\">\n"
      << "<rect x=\"" << fmt(x, "%.1f") << "\" y=\"" << y << "\" width=\"" << s.card_width
      << "\" height=\"" << s.leaf_height << "\" rx=\"6\" fill=\"#ffffff\" stroke=\""
      << class_colour(n.predicted_class) << "\" stroke-width=\"2\"/>\n";
    double bx = x + 8;
    for (int k = 0; k < t.n_classes(); ++k) {
      if (total == 0 || n.histogram[k] == 0) continue;
      const double w = bar_w * n.histogram[k] / static_cast<double>(total);
      o << "<rect class=\"hist\" x=\"" << fmt(bx, "%.2f") << "\" y=\"" << y + 8 << "\" width=\""
        << fmt(w, "%.2f") << "\" height=\"14\" fill=\"" << class_colour(k) << "\"/>\n";
      bx += w;
    }
    std::string counts;
    for (std::size_t k = 0; k < n.histogram.size(); ++k) {
      if (k) counts += " / ";
      counts += std::to_string(n.histogram[k]);
    }
    o << "<text x=\"" << fmt(cx(n.id), "%.1f") << "\" y=\"" << y + 36
      << "\" text-anchor=\"middle\">" << counts << "</text>\n"
      << "<text x=\"" << fmt(cx(n.id), "%.1f") << "\" y=\"" << y + 54
      << "\" text-anchor=\"middle\" font-weight=\"bold\">"
      << escape_xml(t.class_order.empty() ? std::to_string(n.predicted_class)
                                          : t.class_order[n.predicted_class])
      << "</text>\n</g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// ---- Session ----

json session_config_to_json(const SessionConfig& c) {
  json base = {{"max_depth", c.base_params.max_depth},
               {"min_samples_split", c.base_params.min_samples_split},
               {"min_samples_leaf", c.base_params.min_samples_leaf},
               {"criterion", c.base_params.criterion == Criterion::kGini ? "gini" : "entropy"},
               {"excluded_features", c.base_params.excluded_features}};
  return {{"format", "idt-session-1"},
          {"model_dir", c.model_dir.generic_string()},
          {"features", c.features.generic_string()},
          {"asset_dir", c.asset_dir.generic_string()},
          {"tree", std::move(base)},
          {"illuminate", illuminate_options_to_json(c.options)}};
}

SessionConfig session_config_from_json(const json& j) {
  SessionConfig c;
  c.model_dir = j.value("model_dir", "");
  c.features = j.at("features").get<std::string>();
  c.asset_dir = j.value("asset_dir", ".");
  const json& t = j.at("tree");
  c.base_params.max_depth = t.value("max_depth", c.base_params.max_depth);
  c.base_params.min_samples_split = t.value("min_samples_split", c.base_params.min_samples_split);
  c.base_params.min_samples_leaf = t.value("min_samples_leaf", c.base_params.min_samples_leaf);
  c.base_params.criterion = t.value("criterion", "gini") == "entropy" ? Criterion::kEntropy : Criterion::kGini;
  if (t.contains("excluded_features")) {
    c.base_params.excluded_features = t.at("excluded_features").get<std::set<std::size_t>>();
  }
  if (j.contains("illuminate")) c.options = illuminate_options_from_json(j.at("illuminate"));
  return c;
}

json session_entry_summary(const SessionEntry& e) {
  const TreeNode& root = e.itree.tree.root();
  return {{"index", e.index},
          {"requested", e.requested},
          {"excluded", e.itree.excluded},
          {"max_depth", e.max_depth},
          {"n_nodes", e.itree.tree.nodes.size()},
          {"root_feature", root.leaf ? json(nullptr) : json(e.itree.nodes[0].feature_name)},
          {"metrics", tree_metrics_to_json(e.itree.metrics)}};
}

Session::Session(FeatureTable table, std::optional<TrainedModel> model, TreeParams base,
                 IlluminateOptions opts, fs::path asset_root, std::optional<double> cnn_test_acc)
    : table_(std::move(table)),
      model_(std::move(model)),
      base_(std::move(base)),
      opts_(std::move(opts)),
      asset_root_(std::move(asset_root)),
      cache_(asset_root_.empty() ? fs::path{} : asset_root_ / kAssetDirName),
      cnn_test_acc_(cnn_test_acc) {
  if (!model_) opts_.compute_missing_viz = false;
  if (!cnn_test_acc_ && model_) cnn_test_acc_ = model_->metrics.final_test_acc;
  train_ = table_.subset(Split::kTrain);
  if (train_.rows() == 0) train_ = table_;
  history_.push_back(make_entry({}, base_));
}

std::unique_ptr<Session> Session::open(const fs::path& session_file) {
  std::ifstream in(session_file);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + session_file.string());
  const SessionConfig cfg = session_config_from_json(json::parse(in));
  const fs::path base = session_file.parent_path();
  auto resolve = [&](const fs::path& p) { return p.is_absolute() ? p : base / p; };
  std::optional<TrainedModel> model;
  if (!cfg.model_dir.empty()) model = load_checkpoint(resolve(cfg.model_dir));
  return std::make_unique<Session>(load_feature_table(resolve(cfg.features)), std::move(model),
                                   cfg.base_params, cfg.options, resolve(cfg.asset_dir));
}

std::shared_ptr<SessionEntry> Session::make_entry(const std::vector<std::string>& names,
                                                  const TreeParams& params) {
  auto e = std::make_shared<SessionEntry>();
  e->requested = names;
  e->max_depth = params.max_depth;
  const DecisionTree tree = fit_tree(train_, params);
  e->itree = build_illuminated_tree(tree, model(), table_, cache_, opts_, cnn_test_acc_);
  e->itree.excluded = names_of(params.excluded_features, table_.layer_shape);
  return e;
}

std::shared_ptr<const SessionEntry> Session::latest() const {
  std::lock_guard lock(history_mutex_);
  return history_.back();
}

std::shared_ptr<const SessionEntry> Session::entry(std::size_t index) const {
  std::lock_guard lock(history_mutex_);
  if (index >= history_.size()) {
    throw Error(ErrorCode::kOutOfRange, "no history entry " + std::to_string(index));
  }
  return history_[index];
}

std::vector<std::shared_ptr<const SessionEntry>> Session::history() const {
  std::lock_guard lock(history_mutex_);
  return history_;
}

std::size_t Session::history_size() const {
  std::lock_guard lock(history_mutex_);
  return history_.size();
}

std::shared_ptr<const SessionEntry> Session::rebuild_with_exclusions(
    const std::vector<std::string>& names, std::optional<int> max_depth) {
  std::lock_guard lock(rebuild_mutex_);
  return rebuild_locked(names, max_depth);
}

std::shared_ptr<const SessionEntry> Session::try_rebuild_with_exclusions(
    const std::vector<std::string>& names, std::optional<int> max_depth) {
  std::unique_lock lock(rebuild_mutex_, std::try_to_lock);
  if (!lock.owns_lock()) throw Error(ErrorCode::kBusy, "a rebuild is already in progress");
  return rebuild_locked(names, max_depth);
}

std::shared_ptr<const SessionEntry> Session::rebuild_locked(const std::vector<std::string>& names,
                                                            std::optional<int> max_depth) {
  TreeParams params = base_;
  for (const std::string& name : names) {
    params.excluded_features.insert(feature_index_of_name(name, table_.layer_shape));
  }
  if (max_depth) {
    if (*max_depth < 0) throw Error(ErrorCode::kInvalidArgument, "max_depth must be >= 0");
    params.max_depth = *max_depth;
  }
  if (fit_hook_) fit_hook_();
  std::shared_ptr<SessionEntry> e = make_entry(names, params);
  std::lock_guard lock(history_mutex_);
  e->index = history_.size();
  history_.push_back(e);
  return e;
}

}  // namespace idt
