#include <fstream>
#include <thread>

#include "doctest.h"
#include "helpers.hpp"
#include "idt/pipeline.hpp"

namespace fs = std::filesystem;
using namespace idt;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, bool> ran_by_stage(const PipelineReport& r) {
  std::map<std::string, bool> m;
  for (const auto& s : r.stages) m[s.stage] = s.ran;
  return m;
}

PipelineConfig small_config(const fs::path& out) {
  PipelineConfig c = default_pipeline_config();
  c.synth = default_synth_spec(10);
  c.out = out;
  c.seed = 3;
  c.train.epochs = 1;
  c.train.batch_size = 8;
  c.viz.steps = 2;
  c.viz_channels = "0..1";
  c.tree.max_depth = 2;
  return c;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config json: defaults, partial merge, round trip") {
  const PipelineConfig d = default_pipeline_config();
  CHECK(d.preset == "cnn4");
  CHECK(resolved_layer(d) == "4M");
  REQUIRE(d.synth);
  CHECK(d.synth->n_per_class == 200);

  const PipelineConfig m = pipeline_config_from_json(json::parse(R"({
    "seed": 9, "tree": {"max_depth": 5, "criterion": "entropy", "exclude": ["6_5_9"]},
    "model": {"epochs": 3}, "viz": {"steps": 7, "channels": "1,2"}
  })"));
  CHECK(m.seed == 9);
  CHECK(m.tree.max_depth == 5);
  CHECK(m.tree.criterion == Criterion::kEntropy);
  CHECK(m.exclude == std::vector<std::string>{"6_5_9"});
  CHECK(m.train.epochs == 3);
  CHECK(m.train.batch_size == d.train.batch_size);
  CHECK(m.viz.steps == 7);
  CHECK(m.viz.step_size == d.viz.step_size);
  CHECK(m.viz_channels == "1,2");
  CHECK(m.synth.has_value());

  const PipelineConfig real = pipeline_config_from_json(json{{"data", {{"crops_dir", "/x"}}}});
  CHECK_FALSE(real.synth);
  CHECK(real.crops_dir == "/x");

  const PipelineConfig cnn6 = pipeline_config_from_json(json{{"model", {{"preset", "cnn6"}}}});
  CHECK(resolved_layer(cnn6) == "5M");

  const json j = pipeline_config_to_json(m);
  CHECK(pipeline_config_to_json(pipeline_config_from_json(j)) == j);

  try {
    pipeline_config_from_json(json{{"tree", {{"criterion", "misclassification"}}}});
    FAIL("expected InvalidArgument");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInvalidArgument);
  }
  const fs::path dir = test::temp_dir("pipe_cfg");
  std::ofstream(dir / "bad.json") << "{ nope";
  CHECK_THROWS_AS(load_pipeline_config(dir / "bad.json"), Error);
  CHECK_THROWS_AS(load_pipeline_config(dir / "missing.json"), Error);
  fs::remove_all(dir);
}

TEST_CASE("channel lists") {
  CHECK(parse_channel_list("0..3", 16) == std::vector<int>{0, 1, 2, 3});
  CHECK(parse_channel_list("1,5,9", 16) == std::vector<int>{1, 5, 9});
  CHECK(parse_channel_list("0..2,9", 16) == std::vector<int>{0, 1, 2, 9});
  CHECK(parse_channel_list("7", 16) == std::vector<int>{7});
  CHECK(parse_channel_list("0..23", 128).size() == 24);
  for (const char* bad : {"0..16", "16", "a", "3..1", "", "1,,2", "-1"})
    CHECK_THROWS_AS(parse_channel_list(bad, 16), Error);
}

TEST_CASE("fnv1a and directory hashing") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
  CHECK(fnv1a("bar", fnv1a("foo")) == fnv1a("foobar"));

  const fs::path dir = test::temp_dir("pipe_hash");
  std::ofstream(dir / "a.txt") << "one";
  fs::create_directories(dir / "sub");
  std::ofstream(dir / "sub" / "b.txt") << "two";
  const auto h = hash_directory(dir);
  CHECK(hash_directory(dir) == h);
  std::ofstream(dir / "sub" / "b.txt") << "tw0";
  CHECK(hash_directory(dir) != h);
  std::ofstream(dir / "sub" / "b.txt") << "two";
  CHECK(hash_directory(dir) == h);
  fs::rename(dir / "a.txt", dir / "c.txt");
  CHECK(hash_directory(dir) != h);
  fs::remove_all(dir);
}

TEST_CASE("directory lock and write_if_changed") {
  const fs::path dir = test::temp_dir("pipe_lock");
  {
    DirectoryLock a(dir);
    try {
      DirectoryLock b(dir);
      FAIL("expected Busy");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kBusy);
    }
  }
  CHECK_NOTHROW(DirectoryLock{dir});

  const fs::path f = dir / "out.txt";
  CHECK(write_if_changed(f, "hello"));
  const auto t0 = fs::last_write_time(f);
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  CHECK_FALSE(write_if_changed(f, "hello"));
  CHECK(fs::last_write_time(f) == t0);
  CHECK(write_if_changed(f, "hello!"));
  CHECK(slurp(f) == "hello!");
  fs::remove_all(dir);
}

TEST_CASE("end to end on a tiny synthetic set; reruns skip; stage errors") {
  const fs::path out = test::temp_dir("pipe_run");
  PipelineConfig cfg = small_config(out);
  const PipelineReport r1 = run_pipeline(cfg);
  for (const auto& [stage, ran] : ran_by_stage(r1)) CHECK_MESSAGE(ran, stage);
  for (const char* f : {"config.json", "data/manifest.json", "model/weights.bin", "features.bin", "tree.json",
                        "itree.json", "tree.svg", "metrics.json", "session.json", "assets/4M_grid.png"})
    CHECK_MESSAGE(fs::exists(out / f), f);
  CHECK(r1.metrics.at("layer") == "4M");
  CHECK(r1.metrics.at("tree_depth").get<int>() <= 2);
  const FeatureTable table = load_feature_table(out / "features.bin");
  CHECK(table.layer_shape == Shape3{10, 10, 128});
  CHECK(table.rows() == 20);

  const std::string svg = slurp(out / "tree.svg");
  const auto svg_time = fs::last_write_time(out / "tree.svg");
  const PipelineReport r2 = run_pipeline(cfg);
  for (const auto& [stage, ran] : ran_by_stage(r2)) CHECK_FALSE_MESSAGE(ran, stage);
  CHECK(slurp(out / "tree.svg") == svg);
  CHECK(fs::last_write_time(out / "tree.svg") == svg_time);
  CHECK(r2.metrics == r1.metrics);

  // A tree-only change reruns tree and illuminate, nothing upstream.
  cfg.tree.max_depth = 1;
  const auto r3 = ran_by_stage(run_pipeline(cfg));
  CHECK_FALSE(r3.at("data"));
  CHECK_FALSE(r3.at("train"));
  CHECK_FALSE(r3.at("features"));
  CHECK_FALSE(r3.at("viz"));
  CHECK(r3.at("tree"));
  CHECK(r3.at("illuminate"));

  // Session written by the pipeline opens and reproduces the tree.
  const auto session = Session::open(out / "session.json");
  CHECK(session->latest()->itree.tree == load_tree(out / "tree.json"));

  // Bad layer fails at the features stage.
  cfg.layer = "nope";
  try {
    run_pipeline(cfg);
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "features");
    CHECK(e.code() == ErrorCode::kUnknownLayer);
  }
  cfg.layer.clear();
  cfg.exclude = {"bogus"};
  try {
    run_pipeline(cfg);
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "tree");
    CHECK(e.code() == ErrorCode::kBadFeatureName);
  }

  // A concurrent run on the same directory is refused.
  cfg.exclude.clear();
  {
    DirectoryLock held(out);
    CHECK_THROWS_AS(run_pipeline(cfg), Error);
  }
  fs::remove_all(out);
}

}  // TEST_SUITE
