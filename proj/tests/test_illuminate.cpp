#include <atomic>
#include <condition_variable>
#include <fstream>
#include <random>
#include <regex>
#include <thread>

#include "doctest.h"
#include "helpers.hpp"
#include "idt/error.hpp"
#include "idt/illuminate.hpp"

namespace fs = std::filesystem;
using namespace idt;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an idt::Error");
  return ErrorCode::kIo;
}

// 12x12 input, one valid 3x3 block: layer "L" is 10x10x16.
TrainedModel layer_model() { return test::tiny_model(21, 12, 12, {{"L", 16, 3, 1, 0, false}}); }

// Random activations; the label is planted on feature 6_5_9 so the root
// split is known. Every fourth row is held out.
FeatureTable planted_table(int rows, std::uint64_t seed) {
  const Shape3 shape{10, 10, 16};
  const std::size_t key = feature_index_of_name("6_5_9", shape);
  FeatureTable t;
  t.layer_name = "L";
  t.layer_shape = shape;
  t.class_order = {"blueblob", "pinkblob"};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < rows; ++i) {
    std::vector<double> v(shape.size());
    for (double& x : v) x = u(rng);
    const int label = v[key] > 0.5 ? 1 : 0;
    t.append_row(v, label, "img/" + std::to_string(i) + ".png", i % 4 == 3 ? Split::kTest : Split::kTrain);
  }
  return t;
}

IlluminateOptions quick_opts() {
  IlluminateOptions o;
  o.viz.steps = 4;
  return o;
}

int count(const std::string& hay, const std::string& needle) {
  int n = 0;
  for (std::size_t p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

int png_files(const fs::path& dir) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".png";
  return n;
}

bool uses_feature(const DecisionTree& t, std::size_t f) {
  for (const TreeNode& n : t.nodes)
    if (!n.leaf && n.feature_index == f) return true;
  return false;
}

}  // namespace

TEST_SUITE("illuminate") {

TEST_CASE("root on 6_5_9 carries channel 9's visualisation") {
  const fs::path dir = test::temp_dir("itree_root");
  const TrainedModel m = layer_model();
  const FeatureTable t = planted_table(80, 1);
  TreeParams p;
  p.max_depth = 1;
  const DecisionTree tree = fit_tree(t.subset(Split::kTrain), p);
  REQUIRE(format_feature_name(feature_id_of(tree.root().feature_index, t.layer_shape)) == "6_5_9");

  VizCache cache(dir / kAssetDirName);
  const IlluminatedTree it = build_illuminated_tree(tree, &m, t, cache, quick_opts(), 0.97);
  const NodeAnnotation& root = it.nodes[0];
  CHECK(root.feature_name == "6_5_9");
  CHECK(root.viz_channel == 9);
  CHECK(root.viz_ref == "assets/L_ch9.png");
  CHECK(fs::exists(dir / root.viz_ref));
  REQUIRE(root.viz_dead.has_value());
  const auto cached = cache.find("L", 9);
  REQUIRE(cached);
  CHECK(cached->channel == 9);
  CHECK(*root.viz_dead == cached->dead);
  REQUIRE(root.flow);
  CHECK(root.flow->node_id == 0);

  CHECK(it.metrics.tree_train_acc == tree_accuracy(tree, t.subset(Split::kTrain)));
  REQUIRE(it.metrics.tree_test_acc);
  CHECK(*it.metrics.tree_test_acc == tree_accuracy(tree, t.subset(Split::kTest)));
  CHECK(it.metrics.cnn_test_acc == 0.97);

  // Every internal name maps back to the node's feature index.
  for (const TreeNode& n : tree.nodes)
    if (!n.leaf) CHECK(feature_index_of_name(it.nodes[n.id].feature_name, t.layer_shape) == n.feature_index);

  // Examples: capped, in table order, n_routed counts every row.
  for (const TreeNode& n : tree.nodes) {
    const NodeAnnotation& a = it.nodes[n.id];
    CHECK(a.examples.size() == std::min<std::size_t>(9, a.n_routed));
    for (std::size_t i = 1; i < a.examples.size(); ++i) CHECK(a.examples[i].row > a.examples[i - 1].row);
    for (const ExampleRef& e : a.examples) {
      const auto path = decision_path(tree, t.row(e.row));
      CHECK(std::find(path.begin(), path.end(), n.id) != path.end());
      CHECK(e.path == t.paths[e.row]);
    }
  }
  CHECK(it.nodes[0].n_routed == t.rows());
  CHECK(it.nodes[tree.root().left].n_routed + it.nodes[tree.root().right].n_routed == t.rows());
  fs::remove_all(dir);
}

TEST_CASE("single-leaf tree has no visualisations but has metrics") {
  const fs::path dir = test::temp_dir("itree_leaf");
  const TrainedModel m = layer_model();
  const FeatureTable t = planted_table(20, 2);
  TreeParams p;
  p.max_depth = 0;
  const DecisionTree tree = fit_tree(t, p);
  REQUIRE(tree.nodes.size() == 1);
  VizCache cache(dir);
  const IlluminatedTree it = build_illuminated_tree(tree, &m, t, cache, quick_opts());
  CHECK(it.nodes[0].viz_ref.empty());
  CHECK_FALSE(it.nodes[0].flow);
  CHECK(png_files(dir) == 0);
  CHECK(it.metrics.tree_train_acc > 0.0);
  CHECK(it.metrics.tree_test_acc.has_value());
  CHECK(it.metrics.cnn_test_acc.has_value());
  const std::string svg = render_tree_svg(it);
  CHECK(count(svg, "<g class=\"node") == 1);
  CHECK(count(svg, "class=\"edge\"") == 0);
  fs::remove_all(dir);
}

TEST_CASE("nodes on one channel share a cached visualisation") {
  const fs::path dir = test::temp_dir("itree_share");
  const TrainedModel m = layer_model();
  const FeatureTable t = planted_table(30, 3);
  const Shape3 s = t.layer_shape;
  DecisionTree tree;
  tree.layer_name = "L";
  tree.layer_shape = s;
  tree.class_order = t.class_order;
  tree.nodes = {TreeNode{0, false, feature_index_of_name("6_5_9", s), 0.5, 1, 4, 0, {}},
                TreeNode{1, false, feature_index_of_name("2_3_9", s), 0.5, 2, 3, 0, {}},
                TreeNode{2, true, 0, 0, -1, -1, 1, {}}, TreeNode{3, true, 0, 0, -1, -1, 1, {}},
                TreeNode{4, true, 0, 0, -1, -1, 0, {}}};
  VizCache cache(dir);
  const IlluminatedTree it = build_illuminated_tree(tree, &m, t, cache, quick_opts());
  CHECK(it.nodes[0].viz_ref == it.nodes[1].viz_ref);
  CHECK(it.nodes[0].feature_name == "6_5_9");
  CHECK(it.nodes[1].feature_name == "2_3_9");
  CHECK(png_files(dir) == 1);

  // The positioned objective keys by location, so the two nodes differ.
  IlluminateOptions pos = quick_opts();
  pos.positioned_objective = true;
  const IlluminatedTree it2 = build_illuminated_tree(tree, &m, t, cache, pos);
  CHECK(it2.nodes[0].viz_ref == "assets/L_ch9_at_6_5.png");
  CHECK(it2.nodes[1].viz_ref == "assets/L_ch9_at_2_3.png");
  CHECK(png_files(dir) == 3);

  // Lookup-only mode leaves missing entries unfilled.
  IlluminateOptions lookup = quick_opts();
  lookup.compute_missing_viz = false;
  VizCache empty;
  const IlluminatedTree it3 = build_illuminated_tree(tree, nullptr, t, empty, lookup);
  CHECK_FALSE(it3.nodes[0].viz_dead.has_value());
  CHECK(it3.nodes[0].viz_ref == "assets/L_ch9.png");
  fs::remove_all(dir);
}

TEST_CASE("layer mismatch") {
  const TrainedModel m = layer_model();
  const FeatureTable t = planted_table(10, 4);
  DecisionTree tree = fit_tree(t, TreeParams{});
  tree.layer_shape = {5, 5, 16};
  VizCache cache;
  CHECK(code_of([&] { build_illuminated_tree(tree, &m, t, cache, quick_opts()); }) == ErrorCode::kLayerMismatch);

  FeatureTable narrow;
  narrow.layer_name = "L";
  narrow.layer_shape = {1, 1, 3};
  narrow.class_order = {"a", "b"};
  narrow.append_row(std::vector<double>{1, 2, 3}, 0, "x", Split::kTrain);
  narrow.append_row(std::vector<double>{3, 2, 1}, 1, "y", Split::kTrain);
  const DecisionTree small = fit_tree(narrow, TreeParams{});
  CHECK(code_of([&] { build_illuminated_tree(small, &m, narrow, cache, quick_opts()); }) ==
        ErrorCode::kLayerMismatch);
}

TEST_CASE("svg: structure, flow percentages, determinism") {
  // One feature; class A sends 57 of 100 left, class B sends 88 of 100 right.
  FeatureTable t;
  t.layer_name = "L";
  t.layer_shape = {1, 1, 1};
  t.class_order = {"eosinophil", "neutrophil"};
  for (int i = 0; i < 100; ++i) t.append_row(std::vector<double>{i < 57 ? 1.0 : 0.0}, 0, "a", Split::kTrain);
  for (int i = 0; i < 100; ++i) t.append_row(std::vector<double>{i < 12 ? 1.0 : 0.0}, 1, "b", Split::kTrain);
  TreeParams p;
  p.max_depth = 1;
  const DecisionTree tree = fit_tree(t, p);
  REQUIRE(tree.nodes.size() == 3);
  VizCache cache;
  IlluminateOptions o;
  o.compute_missing_viz = false;
  const IlluminatedTree it = build_illuminated_tree(tree, nullptr, t, cache, o, 0.93);
  REQUIRE(it.nodes[0].flow);
  CHECK(it.nodes[0].flow->fraction_left[0] == doctest::Approx(0.57));
  CHECK(it.nodes[0].flow->fraction_right[1] == doctest::Approx(0.88));

  const std::string svg = render_tree_svg(it);
  CHECK(count(svg, "<g class=\"node") == 3);
  CHECK(count(svg, "<g class=\"node internal\"") == 1);
  CHECK(count(svg, "<line class=\"edge\"") == 2);
  CHECK(svg.find("eosinophil 57%") != std::string::npos);
  CHECK(svg.find("neutrophil 88%") != std::string::npos);
  CHECK(svg.find("eosinophil 43%") != std::string::npos);
  CHECK(svg.find("neutrophil 12%") != std::string::npos);
  CHECK(svg.find("href=\"assets/L_ch0.png\"") != std::string::npos);
  CHECK(svg.find(">0_0_0<") != std::string::npos);
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(render_tree_svg(it) == svg);
  CHECK(render_tree_svg(illuminated_tree_from_json(illuminated_tree_to_json(it))) == svg);
}

TEST_CASE("illuminated tree json round trip") {
  const fs::path dir = test::temp_dir("itree_json");
  const TrainedModel m = layer_model();
  const FeatureTable t = planted_table(60, 5);
  TreeParams p;
  p.max_depth = 3;
  const DecisionTree tree = fit_tree(t.subset(Split::kTrain), p);
  VizCache cache(dir / kAssetDirName);
  IlluminateOptions o = quick_opts();
  o.positioned_objective = true;
  IlluminatedTree it = build_illuminated_tree(tree, &m, t, cache, o, 0.9);
  it.excluded = {"0_0_1", "9_9_15"};
  const auto j = illuminated_tree_to_json(it);
  CHECK(j.at("format") == "idt-itree-1");
  CHECK(illuminated_tree_from_json(j) == it);
  save_illuminated_tree(dir / "itree.json", it);
  CHECK(load_illuminated_tree(dir / "itree.json") == it);
  CHECK(code_of([] { illuminated_tree_from_json(nlohmann::json{{"format", "x"}}); }) ==
        ErrorCode::kInvalidArgument);
  fs::remove_all(dir);
}

TEST_CASE("feature name parsing from the tree's point of view") {
  const FeatureId a = parse_feature_name("6_5_9");
  CHECK((a.row == 6 && a.col == 5 && a.channel == 9));
  const FeatureId b = parse_feature_name("0_0_0");
  CHECK((b.row == 0 && b.col == 0 && b.channel == 0));
  const FeatureId c = parse_feature_name("0_0_20");
  CHECK((c.row == 0 && c.col == 0 && c.channel == 20));
  CHECK(format_feature_name(a) == "6_5_9");
}

}  // TEST_SUITE

TEST_SUITE("session") {

TEST_CASE("exclude and rebuild") {
  const fs::path dir = test::temp_dir("session");
  const FeatureTable t = planted_table(120, 6);
  TreeParams base;
  base.max_depth = 2;
  Session s(t, layer_model(), base, quick_opts(), dir, 0.95);
  REQUIRE(s.history_size() == 1);
  const auto baseline = s.latest();
  const IlluminatedTree baseline_copy = baseline->itree;
  CHECK(baseline->index == 0);
  CHECK(baseline->itree.excluded.empty());
  const std::size_t root = baseline->itree.tree.root().feature_index;
  CHECK(format_feature_name(feature_id_of(root, t.layer_shape)) == "6_5_9");
  CHECK(fs::exists(dir / baseline->itree.nodes[0].viz_ref));

  const auto e1 = s.rebuild_with_exclusions({"6_5_9"});
  CHECK(e1->index == 1);
  CHECK(s.history_size() == 2);
  CHECK(e1->itree.tree.root().feature_index != root);
  CHECK_FALSE(uses_feature(e1->itree.tree, root));
  CHECK(e1->itree.excluded == std::vector<std::string>{"6_5_9"});
  CHECK(e1->itree.metrics.cnn_test_acc == 0.95);
  CHECK(e1->itree.metrics.tree_test_acc.has_value());

  const auto e2 = s.rebuild_with_exclusions({});
  CHECK(e2->itree.tree == baseline->itree.tree);
  CHECK(s.history_size() == 3);

  const auto e3 = s.rebuild_with_exclusions({"6_5_9"}, 1);
  CHECK(e3->itree.tree.depth() <= 1);
  CHECK(e3->max_depth == 1);

  std::vector<std::string> all;
  for (std::size_t f = 0; f < t.cols(); ++f) all.push_back(format_feature_name(feature_id_of(f, t.layer_shape)));
  const auto e4 = s.rebuild_with_exclusions(all);
  REQUIRE(e4->itree.tree.nodes.size() == 1);
  const FeatureTable train = t.subset(Split::kTrain);
  const auto& h = e4->itree.tree.root().histogram;
  CHECK(e4->itree.tree.root().predicted_class == (h[1] > h[0] ? 1 : 0));
  CHECK(h[0] + h[1] == static_cast<int>(train.rows()));

  CHECK(code_of([&] { s.rebuild_with_exclusions({"bogus"}); }) == ErrorCode::kBadFeatureName);
  CHECK(code_of([&] { s.rebuild_with_exclusions({"6_5_16"}); }) == ErrorCode::kOutOfRange);
  CHECK(s.history_size() == 5);

  // History is append-only; entry 0 never changes and every entry honours
  // its exclusions.
  CHECK(s.entry(0)->itree == baseline_copy);
  for (const auto& e : s.history()) {
    for (const std::string& name : e->itree.excluded)
      CHECK_FALSE(uses_feature(e->itree.tree, feature_index_of_name(name, t.layer_shape)));
  }
  CHECK(code_of([&] { s.entry(99); }) == ErrorCode::kOutOfRange);
  fs::remove_all(dir);
}

TEST_CASE("base exclusions carry into every rebuild") {
  const FeatureTable t = planted_table(60, 7);
  TreeParams base;
  base.excluded_features = {feature_index_of_name("6_5_9", t.layer_shape)};
  IlluminateOptions o = quick_opts();
  Session s(t, std::nullopt, base, o, {});
  const std::size_t f = *base.excluded_features.begin();
  CHECK_FALSE(uses_feature(s.latest()->itree.tree, f));
  CHECK(s.latest()->itree.excluded == std::vector<std::string>{"6_5_9"});
  const std::size_t second = s.latest()->itree.tree.root().feature_index;
  const auto e = s.rebuild_with_exclusions({format_feature_name(feature_id_of(second, t.layer_shape))});
  CHECK_FALSE(uses_feature(e->itree.tree, f));
  CHECK_FALSE(uses_feature(e->itree.tree, second));
  CHECK(e->itree.excluded.size() == 2);
}

TEST_CASE("rebuilds are serialised; readers see complete entries") {
  const FeatureTable t = planted_table(60, 8);
  Session s(t, std::nullopt, TreeParams{}, quick_opts(), {});
  std::mutex mu;
  std::condition_variable cv;
  bool entered = false, release = false;
  s.set_fit_hook([&] {
    std::unique_lock lock(mu);
    entered = true;
    cv.notify_all();
    cv.wait(lock, [&] { return release; });
  });
  std::thread worker([&] { s.rebuild_with_exclusions({"6_5_9"}); });
  {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return entered; });
  }
  CHECK(code_of([&] { s.try_rebuild_with_exclusions({}); }) == ErrorCode::kBusy);
  CHECK(s.history_size() == 1);
  CHECK(s.latest()->index == 0);
  {
    std::lock_guard lock(mu);
    release = true;
  }
  cv.notify_all();
  worker.join();
  CHECK(s.history_size() == 2);
  CHECK(s.latest()->index == 1);
  s.set_fit_hook({});
  CHECK(s.try_rebuild_with_exclusions({})->index == 2);
}

TEST_CASE("session file round trip") {
  const fs::path dir = test::temp_dir("session_file");
  const FeatureTable t = planted_table(40, 9);
  TrainedModel m = layer_model();
  m.class_order = t.class_order;
  m.metrics.final_test_acc = 0.875;
  save_checkpoint(dir / "model", m);
  save_feature_table(dir / "features.bin", t);
  SessionConfig cfg;
  cfg.model_dir = "model";
  cfg.features = "features.bin";
  cfg.asset_dir = ".";
  cfg.base_params.max_depth = 2;
  cfg.base_params.excluded_features = {3};
  cfg.options = quick_opts();
  const auto j = session_config_to_json(cfg);
  const SessionConfig back = session_config_from_json(j);
  CHECK(back.model_dir == cfg.model_dir);
  CHECK(back.base_params.max_depth == 2);
  CHECK(back.base_params.excluded_features == cfg.base_params.excluded_features);
  CHECK(back.options.viz.steps == 4);
  std::ofstream(dir / "session.json") << j.dump(2);

  const auto s = Session::open(dir / "session.json");
  CHECK(s->has_model());
  CHECK(s->table().rows() == 40);
  CHECK(s->latest()->itree.metrics.cnn_test_acc == 0.875);
  CHECK(s->latest()->itree.tree.depth() <= 2);
  CHECK(fs::exists(dir / s->latest()->itree.nodes[0].viz_ref));
  const auto summary = session_entry_summary(*s->latest());
  CHECK(summary.at("index") == 0);
  CHECK(summary.contains("metrics"));
  CHECK(code_of([&] { Session::open(dir / "missing.json"); }) == ErrorCode::kIo);
  fs::remove_all(dir);
}

}  // TEST_SUITE
