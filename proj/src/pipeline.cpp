#include "idt/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "idt/features.hpp"
#include "idt/featviz.hpp"
#include "idt/image_io.hpp"
#include "idt/parallel.hpp"
#include "idt/raster.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

PipelineConfig default_pipeline_config() {
  PipelineConfig c;
  c.synth = default_synth_spec(200);
  return c;
}

namespace {

std::string criterion_name(Criterion c) { return c == Criterion::kGini ? "gini" : "entropy"; }

Criterion parse_criterion(const std::string& s) {
  if (s == "gini") return Criterion::kGini;
  if (s == "entropy") return Criterion::kEntropy;
  throw Error(ErrorCode::kInvalidArgument, "unknown criterion '" + s + "'");
}

}  // namespace

json pipeline_config_to_json(const PipelineConfig& c) {
  json data = {{"synth", c.synth ? synth_spec_to_json(*c.synth) : json(nullptr)},
               {"raw_dir", c.raw_dir.generic_string()},
               {"crops_dir", c.crops_dir.generic_string()},
               {"hue_band", {c.detect.hue_lo, c.detect.hue_hi}},
               {"min_saturation", c.detect.min_saturation},
               {"min_area", c.detect.min_area},
               {"jpeg_crops", c.jpeg_crops},
               {"split_fraction", c.split_fraction}};
  json model = {{"preset", c.preset},
                {"layer", resolved_layer(c)},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay}};
  json viz = viz_params_to_json(c.viz);
  viz.erase("seed");
  viz["channels"] = c.viz_channels;
  viz["positioned"] = c.positioned_objective;
  json tree = {{"max_depth", c.tree.max_depth},
               {"min_samples_split", c.tree.min_samples_split},
               {"min_samples_leaf", c.tree.min_samples_leaf},
               {"criterion", criterion_name(c.tree.criterion)},
               {"exclude", c.exclude}};
  return {{"seed", c.seed},
          {"out", c.out.generic_string()},
          {"data", std::move(data)},
          {"model", std::move(model)},
          {"viz", std::move(viz)},
          {"tree", std::move(tree)},
          {"illuminate", {{"examples_per_node", c.examples_per_node}}}};
}

PipelineConfig pipeline_config_from_json(const json& j, PipelineConfig c) {
  c.seed = j.value("seed", c.seed);
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  if (j.contains("data")) {
    const json& d = j.at("data");
    if (d.contains("synth")) {
      if (d.at("synth").is_null()) {
        c.synth.reset();
      } else {
        c.synth = synth_spec_from_json(d.at("synth"));
      }
    }
    if (d.contains("raw_dir")) c.raw_dir = d.at("raw_dir").get<std::string>();
    if (d.contains("crops_dir")) c.crops_dir = d.at("crops_dir").get<std::string>();
    if (d.contains("hue_band")) {
      c.detect.hue_lo = d.at("hue_band").at(0).get<double>();
      c.detect.hue_hi = d.at("hue_band").at(1).get<double>();
    }
    c.detect.min_saturation = d.value("min_saturation", c.detect.min_saturation);
    c.detect.min_area = d.value("min_area", c.detect.min_area);
    c.jpeg_crops = d.value("jpeg_crops", c.jpeg_crops);
    c.split_fraction = d.value("split_fraction", c.split_fraction);
    // Real data replaces the synthetic default unless both are given.
    if ((!c.raw_dir.empty() || !c.crops_dir.empty()) && !d.contains("synth")) c.synth.reset();
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    c.preset = m.value("preset", c.preset);
    c.layer = m.value("layer", c.layer);
    c.train.epochs = m.value("epochs", c.train.epochs);
    c.train.batch_size = m.value("batch_size", c.train.batch_size);
    c.train.learning_rate = m.value("learning_rate", c.train.learning_rate);
    c.train.momentum = m.value("momentum", c.train.momentum);
    c.train.weight_decay = m.value("weight_decay", c.train.weight_decay);
  }
  if (j.contains("viz")) {
    json v = viz_params_to_json(c.viz);
    v.update(j.at("viz"));
    c.viz = viz_params_from_json(v);
    c.viz_channels = j.at("viz").value("channels", c.viz_channels);
    c.positioned_objective = j.at("viz").value("positioned", c.positioned_objective);
  }
  if (j.contains("tree")) {
    const json& t = j.at("tree");
    c.tree.max_depth = t.value("max_depth", c.tree.max_depth);
    c.tree.min_samples_split = t.value("min_samples_split", c.tree.min_samples_split);
    c.tree.min_samples_leaf = t.value("min_samples_leaf", c.tree.min_samples_leaf);
    if (t.contains("criterion")) c.tree.criterion = parse_criterion(t.at("criterion").get<std::string>());
    if (t.contains("exclude")) c.exclude = t.at("exclude").get<std::vector<std::string>>();
  }
  if (j.contains("illuminate")) {
    c.examples_per_node = j.at("illuminate").value("examples_per_node", c.examples_per_node);
  }
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read config " + path.string());
  try {
    return pipeline_config_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, "bad config " + path.string() + ": " + e.what());
  }
}

std::string resolved_layer(const PipelineConfig& cfg) {
  return cfg.layer.empty() ? make_preset(cfg.preset, cfg.seed).feature_layer : cfg.layer;
}

IlluminateOptions illuminate_options_of(const PipelineConfig& cfg) {
  IlluminateOptions o;
  o.viz = cfg.viz;
  o.viz.seed = cfg.seed;
  o.positioned_objective = cfg.positioned_objective;
  o.examples_per_node = cfg.examples_per_node;
  return o;
}

StageError::StageError(std::string stage, ErrorCode code, const std::string& detail)
    : std::runtime_error("stage '" + stage + "' failed: " + detail), stage_(std::move(stage)), code_(code) {}

std::vector<int> parse_channel_list(std::string_view spec, int n_channels) {
  std::vector<int> out;
  auto number = [&](std::string_view s) {
    int v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "bad channel list '" + std::string(spec) + "'");
    }
    if (v < 0 || v >= n_channels) {
      throw Error(ErrorCode::kOutOfRange, "channel " + std::to_string(v) + " not below " +
                                              std::to_string(n_channels));
    }
    return v;
  };
  std::size_t start = 0;
  while (start < spec.size()) {
    std::size_t end = spec.find(',', start);
    if (end == std::string_view::npos) end = spec.size();
    const std::string_view item = spec.substr(start, end - start);
    if (const auto dots = item.find(".."); dots != std::string_view::npos) {
      const int lo = number(item.substr(0, dots));
      const int hi = number(item.substr(dots + 2));
      if (hi < lo) throw Error(ErrorCode::kInvalidArgument, "reversed range '" + std::string(item) + "'");
      for (int c = lo; c <= hi; ++c) out.push_back(c);
    } else {
      out.push_back(number(item));
    }
    start = end + 1;
  }
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "empty channel list");
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_directory(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a("dir");
  std::vector<char> buf(1 << 16);
  for (const fs::path& f : files) {
    h = fnv1a(fs::relative(f, dir).generic_string(), h);
    std::ifstream in(f, std::ios::binary);
    while (in.read(buf.data(), buf.size()) || in.gcount() > 0) {
      h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
    }
  }
  return h;
}

DirectoryLock::DirectoryLock(const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path lock = dir / ".idt.lock";
  fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd_ < 0) throw Error(ErrorCode::kIo, "cannot open " + lock.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw Error(ErrorCode::kBusy, "another pipeline is running in " + dir.string());
  }
}

DirectoryLock::~DirectoryLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

bool write_if_changed(const fs::path& path, const std::string& content) {
  if (fs::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    if (s.str() == content) return false;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  return true;
}

// ---- stages ----

DatasetManifest resolve_dataset(const fs::path& data, double split_fraction, std::uint64_t seed) {
  if (fs::is_regular_file(data)) return load_manifest(data);
  if (!fs::is_directory(data)) throw Error(ErrorCode::kIo, "no dataset at " + data.string());
  return build_manifest(data, split_fraction, seed);
}

TrainedModel run_train_stage(const DatasetManifest& manifest, const PipelineConfig& cfg,
                             const fs::path& checkpoint_dir) {
  // The feature layer is chosen at the features stage; training ignores it.
  TrainedModel model = build_model(make_preset(cfg.preset, cfg.seed), manifest.classes);
  HyperParams hp = cfg.train;
  hp.seed = cfg.seed;
  model = train(std::move(model), manifest, hp, [](const EpochLog& log) {
    std::fprintf(stderr, "  epoch %d  loss %.4f  train acc %.4f\n", log.epoch, log.mean_loss, log.train_acc);
  });
  save_checkpoint(checkpoint_dir, model);
  return model;
}

FeatureTable run_features_stage(const TrainedModel& model, const DatasetManifest& manifest,
                                const std::string& layer, const fs::path& out_file) {
  FeatureTable table = extract_feature_vectors(model, manifest, layer, SplitSelector::kAll);
  save_feature_table(out_file, table);
  return table;
}

LayerGrid run_viz_stage(const TrainedModel& model, const std::string& layer,
                        const std::vector<int>& channels, const VizParams& params,
                        const fs::path& out_dir) {
  VizCache cache(out_dir);
  const Shape3 shape = model.layer_shape(layer);
  for (int ch : channels) {
    if (ch < 0 || ch >= shape.channels) {
      throw Error(ErrorCode::kOutOfRange, "channel " + std::to_string(ch) + " not in layer " + layer);
    }
  }
  std::vector<FeatureImage> features(channels.size());
  parallel_for(static_cast<std::ptrdiff_t>(channels.size()), [&](std::ptrdiff_t i) {
    features[i] = cache.get_or_compute(model, layer, channels[i], params);
  });
  LayerGrid grid = assemble_layer_grid(std::move(features));
  write_png(out_dir / (layer + "_grid.png"), grid.image);
  return grid;
}

DecisionTree run_tree_stage(const FeatureTable& table, TreeParams params,
                            const std::vector<std::string>& exclude, const fs::path& out_file) {
  for (const std::string& name : exclude) {
    params.excluded_features.insert(feature_index_of_name(name, table.layer_shape));
  }
  FeatureTable train = table.subset(Split::kTrain);
  DecisionTree tree = fit_tree(train.rows() > 0 ? train : table, params);
  save_tree(out_file, tree);
  return tree;
}

IlluminatedTree run_illuminate_stage(const DecisionTree& tree, const TrainedModel& model,
                                     const FeatureTable& table, const IlluminateOptions& opts,
                                     const fs::path& out_dir) {
  VizCache cache(out_dir / kAssetDirName);
  IlluminatedTree it = build_illuminated_tree(tree, &model, table, cache, opts);
  save_illuminated_tree(out_dir / "itree.json", it);
  write_if_changed(out_dir / "tree.svg", render_tree_svg(it));
  return it;
}

// ---- pipeline ----

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class Stamps {
 public:
  Stamps(fs::path out, bool force) : dir_(std::move(out) / ".stamps"), force_(force) {}

  // True when `stage` must run: forced, stamp differs, or an output is missing.
  bool stale(const std::string& stage, const std::string& key, const std::vector<fs::path>& outputs) const {
    if (force_) return true;
    for (const auto& p : outputs)
      if (!fs::exists(p)) return true;
    std::ifstream in(dir_ / (stage + ".stamp"));
    std::string prev;
    std::getline(in, prev);
    return prev != key;
  }
  void record(const std::string& stage, const std::string& key) const {
    write_if_changed(dir_ / (stage + ".stamp"), key + "\n");
  }

 private:
  fs::path dir_;
  bool force_;
};

template <class Fn>
auto in_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e.code(), e.what());
  } catch (const std::exception& e) {
    throw StageError(stage, ErrorCode::kIo, e.what());
  }
}

std::string key_of(std::initializer_list<std::string> parts) {
  std::uint64_t h = fnv1a("stage");
  for (const auto& p : parts) h = fnv1a(p + '\x1f', h);
  return hex(h);
}

}  // namespace

PipelineReport run_pipeline(const PipelineConfig& cfg, bool force) {
  const fs::path out = cfg.out;
  DirectoryLock lock(out);
  const Stamps stamps(out, force);
  PipelineReport report;
  const json cj = pipeline_config_to_json(cfg);
  write_if_changed(out / "config.json", cj.dump(2) + "\n");
  const std::string layer = resolved_layer(cfg);
  const std::string seed = std::to_string(cfg.seed);
  auto log = [&](const std::string& stage, bool ran) {
    report.stages.push_back({stage, ran});
    std::fprintf(stderr, "[%s] %s\n", stage.c_str(), ran ? "done" : "up to date");
  };

  // data: synthesise and/or extract into crops, then build the manifest.
  const fs::path crops = !cfg.crops_dir.empty() ? cfg.crops_dir : out / "data" / "crops";
  const fs::path manifest_file = out / "data" / "manifest.json";
  const std::string data_key = in_stage("data", [&] {
    std::string source;
    if (cfg.synth) {
      source = "synth:" + synth_spec_to_json(*cfg.synth).dump();
    } else if (!cfg.raw_dir.empty()) {
      source = "raw:" + hex(hash_directory(cfg.raw_dir));
    } else if (!cfg.crops_dir.empty()) {
      source = "crops:" + hex(hash_directory(cfg.crops_dir));
    } else {
      throw Error(ErrorCode::kInvalidArgument, "no data source configured");
    }
    return key_of({source, cj.at("data").dump(), seed});
  });
  DatasetManifest manifest;
  in_stage("data", [&] {
    const bool ran = stamps.stale("data", data_key, {manifest_file});
    if (ran) {
      if (cfg.synth || !cfg.raw_dir.empty()) {
        fs::path raw = cfg.raw_dir;
        if (cfg.synth) {
          raw = out / "data" / "raw";
          fs::remove_all(raw);
          synth_dataset(*cfg.synth, raw, cfg.seed);
        }
        fs::remove_all(crops);
        const ExtractReport rep = extract_directory(raw, crops, cfg.detect, cfg.jpeg_crops);
        std::fprintf(stderr, "  extracted %d cells, skipped %zu\n", rep.extracted, rep.skipped.size());
      }
      manifest = build_manifest(crops, cfg.split_fraction, cfg.seed);
      save_manifest(manifest_file, manifest);
      stamps.record("data", data_key);
    } else {
      manifest = load_manifest(manifest_file);
    }
    log("data", ran);
  });

  const fs::path ckpt = out / "model";
  json model_cfg = cj.at("model");
  model_cfg.erase("layer");
  const std::string train_key = key_of({data_key, model_cfg.dump(), seed});
  TrainedModel model = in_stage("train", [&] {
    const bool ran = stamps.stale("train", train_key, {ckpt / "config.json", ckpt / "weights.bin"});
    TrainedModel m = ran ? run_train_stage(manifest, cfg, ckpt) : load_checkpoint(ckpt);
    if (ran) stamps.record("train", train_key);
    log("train", ran);
    return m;
  });

  const fs::path feats = out / "features.bin";
  const std::string feat_key = key_of({train_key, layer});
  FeatureTable table = in_stage("features", [&] {
    const bool ran = stamps.stale("features", feat_key, {feats});
    FeatureTable t = ran ? run_features_stage(model, manifest, layer, feats) : load_feature_table(feats);
    if (ran) stamps.record("features", feat_key);
    log("features", ran);
    return t;
  });

  const IlluminateOptions iopts = illuminate_options_of(cfg);
  if (!cfg.viz_channels.empty()) {
    const std::string viz_key = key_of({train_key, layer, cj.at("viz").dump(), seed});
    in_stage("viz", [&] {
      const fs::path grid = out / kAssetDirName / (layer + "_grid.png");
      const bool ran = stamps.stale("viz", viz_key, {grid});
      if (ran) {
        const auto channels = parse_channel_list(cfg.viz_channels, model.layer_shape(layer).channels);
        run_viz_stage(model, layer, channels, iopts.viz, out / kAssetDirName);
        stamps.record("viz", viz_key);
      }
      log("viz", ran);
    });
  }

  const fs::path tree_file = out / "tree.json";
  json tree_cfg = cj.at("tree");
  const std::string tree_key = key_of({feat_key, tree_cfg.dump()});
  DecisionTree tree = in_stage("tree", [&] {
    const bool ran = stamps.stale("tree", tree_key, {tree_file});
    DecisionTree t = ran ? run_tree_stage(table, cfg.tree, cfg.exclude, tree_file) : load_tree(tree_file);
    if (ran) stamps.record("tree", tree_key);
    log("tree", ran);
    return t;
  });

  const std::string ill_key =
      key_of({tree_key, illuminate_options_to_json(iopts).dump(), cj.at("illuminate").dump()});
  IlluminatedTree itree = in_stage("illuminate", [&] {
    const bool ran = stamps.stale("illuminate", ill_key, {out / "itree.json", out / "tree.svg"});
    IlluminatedTree it = ran ? run_illuminate_stage(tree, model, table, iopts, out)
                             : load_illuminated_tree(out / "itree.json");
    if (ran) stamps.record("illuminate", ill_key);
    log("illuminate", ran);
    return it;
  });

  in_stage("report", [&] {
    json metrics = tree_metrics_to_json(itree.metrics);
    metrics["cnn_train_acc"] = model.metrics.final_train_acc;
    metrics["cnn_test_acc"] = model.metrics.final_test_acc;
    metrics["epochs"] = model.metrics.epochs;
    metrics["layer"] = layer;
    metrics["tree_depth"] = tree.depth();
    metrics["tree_nodes"] = tree.nodes.size();
    metrics["root_feature"] = nullptr;
    metrics["root_viz_mean_hue"] = nullptr;
    if (!tree.root().leaf) {
      const NodeAnnotation& root = itree.nodes[0];
      metrics["root_feature"] = root.feature_name;
      metrics["root_viz"] = root.viz_ref;
      const fs::path png = out / root.viz_ref;
      if (fs::exists(png)) metrics["root_viz_mean_hue"] = mean_hue(to_unit(read_image(png)));
    }
    write_if_changed(out / "metrics.json", metrics.dump(2) + "\n");

    SessionConfig sc;
    sc.model_dir = "model";
    sc.features = "features.bin";
    sc.asset_dir = ".";
    sc.base_params = cfg.tree;
    for (const auto& name : cfg.exclude) {
      sc.base_params.excluded_features.insert(feature_index_of_name(name, table.layer_shape));
    }
    sc.options = iopts;
    write_if_changed(out / "session.json", session_config_to_json(sc).dump(2) + "\n");
    report.metrics = std::move(metrics);
  });
  return report;
}

}  // namespace idt
