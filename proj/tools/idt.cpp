// idt: command-line entry point for the illuminated decision tree pipeline.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <thread>

#include "CLI11.hpp"
#include "idt/bestchannel.hpp"
#include "idt/explorer_api.hpp"
#include "idt/features.hpp"
#include "idt/image_io.hpp"
#include "idt/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace idt;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool force = false;
  std::string out;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

PipelineConfig base_config(const Globals& g) {
  PipelineConfig cfg = g.config.empty() ? default_pipeline_config() : load_pipeline_config(g.config);
  if (g.seed_opt->count()) cfg.seed = g.seed;
  if (g.out_opt->count()) cfg.out = g.out;
  return cfg;
}

std::string require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw Error(ErrorCode::kInvalidArgument, std::string("--out ") + what + " is required");
  return g.out;
}

template <class T>
void set_if(const CLI::Option* opt, T& field, const T& value) {
  if (opt->count()) field = value;
}

// Provenance: the resolved configuration next to (or inside) every output.
void echo_config(const PipelineConfig& cfg, const fs::path& out, bool out_is_dir) {
  const fs::path where = out_is_dir ? out / "resolved_config.json" : fs::path(out.string() + ".config.json");
  write_if_changed(where, pipeline_config_to_json(cfg).dump(2) + "\n");
}

std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size() && !s.empty()) {
    std::size_t end = s.find(',', start);
    if (end == std::string::npos) end = s.size();
    if (end > start) out.push_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

ExplorerApi* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Illuminated decision trees over CNN features"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "pipeline config JSON")->check(CLI::ExistingFile);
  g.seed_opt = app.add_option("--seed", g.seed, "random seed");
  app.add_flag("--force", g.force, "rerun stages even when up to date");
  g.out_opt = app.add_option("--out", g.out, "output path");

  std::function<void()> action;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic labelled dataset");
  std::string spec_file;
  int n_per_class = 200;
  synth->add_option("--spec", spec_file, "synthetic spec JSON")->check(CLI::ExistingFile);
  auto* n_opt = synth->add_option("--n", n_per_class, "images per class");
  synth->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      SynthSpec spec = cfg.synth ? *cfg.synth : default_synth_spec(200);
      if (!spec_file.empty()) {
        std::ifstream in(spec_file);
        spec = synth_spec_from_json(json::parse(in));
      }
      set_if(n_opt, spec.n_per_class, n_per_class);
      cfg.synth = spec;
      const fs::path out = require_out(g, "DIR");
      const DatasetManifest m = synth_dataset(spec, out, cfg.seed);
      save_manifest(out / "manifest.json", m);
      echo_config(cfg, out, true);
      std::cout << "wrote " << m.entries.size() << " images in " << m.classes.size() << " classes to "
                << out << "\n";
    };
  });

  // extract
  auto* extract = app.add_subcommand("extract", "crop cells from raw images");
  std::string in_dir, hue_band;
  int min_area = 400;
  bool jpeg = false;
  extract->add_option("--in", in_dir, "raw dataset root")->required()->check(CLI::ExistingDirectory);
  auto* band_opt = extract->add_option("--hue-band", hue_band, "hue band LO:HI in degrees");
  auto* area_opt = extract->add_option("--min-area", min_area, "minimum component area");
  extract->add_flag("--jpeg", jpeg, "write JPEG crops instead of PNG");
  extract->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      if (band_opt->count()) {
        const auto colon = hue_band.find(':');
        if (colon == std::string::npos) throw Error(ErrorCode::kInvalidArgument, "--hue-band expects LO:HI");
        cfg.detect.hue_lo = std::stod(hue_band.substr(0, colon));
        cfg.detect.hue_hi = std::stod(hue_band.substr(colon + 1));
      }
      set_if(area_opt, cfg.detect.min_area, min_area);
      cfg.jpeg_crops = cfg.jpeg_crops || jpeg;
      cfg.raw_dir = in_dir;
      const fs::path out = require_out(g, "DIR");
      const ExtractReport rep = extract_directory(in_dir, out, cfg.detect, cfg.jpeg_crops);
      echo_config(cfg, out, true);
      std::cout << "extracted " << rep.extracted << ", skipped " << rep.skipped.size() << "\n";
      for (const auto& s : rep.skipped) std::cout << "  no cell: " << s << "\n";
    };
  });

  // train
  auto* train_cmd = app.add_subcommand("train", "train a CNN preset");
  std::string data, preset, layer;
  int epochs = 0, batch = 0;
  double lr = 0.0;
  train_cmd->add_option("--data", data, "dataset root or manifest JSON")->required();
  auto* preset_opt = train_cmd->add_option("--preset", preset, "cnn4 or cnn6");
  auto* epochs_opt = train_cmd->add_option("--epochs", epochs, "training epochs");
  auto* batch_opt = train_cmd->add_option("--batch-size", batch, "minibatch size");
  auto* lr_opt = train_cmd->add_option("--lr", lr, "learning rate");
  auto* tlayer_opt = train_cmd->add_option("--layer", layer, "designated feature layer");
  train_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      set_if(preset_opt, cfg.preset, preset);
      set_if(epochs_opt, cfg.train.epochs, epochs);
      set_if(batch_opt, cfg.train.batch_size, batch);
      set_if(lr_opt, cfg.train.learning_rate, lr);
      set_if(tlayer_opt, cfg.layer, layer);
      const fs::path out = require_out(g, "CKPT");
      const DatasetManifest m = resolve_dataset(data, cfg.split_fraction, cfg.seed);
      const TrainedModel model = run_train_stage(m, cfg, out);
      echo_config(cfg, out, true);
      print_json({{"train_acc", model.metrics.final_train_acc},
                  {"test_acc", model.metrics.final_test_acc},
                  {"epochs", model.metrics.epochs}});
    };
  });

  // features
  auto* feats_cmd = app.add_subcommand("features", "export feature vectors of a layer");
  std::string model_dir;
  feats_cmd->add_option("--model", model_dir, "checkpoint directory")->required();
  feats_cmd->add_option("--data", data, "dataset root or manifest JSON")->required();
  auto* flayer_opt = feats_cmd->add_option("--layer", layer, "layer name");
  feats_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      const TrainedModel model = load_checkpoint(model_dir);
      cfg.preset = model.config.preset;
      cfg.layer = flayer_opt->count() ? layer : (cfg.layer.empty() ? model.config.feature_layer : cfg.layer);
      const fs::path out = require_out(g, "FEATS");
      const DatasetManifest m = resolve_dataset(data, cfg.split_fraction, cfg.seed);
      const FeatureTable t = run_features_stage(model, m, cfg.layer, out);
      echo_config(cfg, out, false);
      std::cout << "wrote " << t.rows() << " x " << t.cols() << " features of layer " << t.layer_name << "\n";
    };
  });

  // viz
  auto* viz_cmd = app.add_subcommand("viz", "activation-maximisation images for channels");
  std::string channels;
  int steps = 256;
  viz_cmd->add_option("--model", model_dir, "checkpoint directory")->required();
  auto* vlayer_opt = viz_cmd->add_option("--layer", layer, "layer name");
  auto* ch_opt = viz_cmd->add_option("--channels", channels, "channel list, e.g. 0..23 or 1,5,9");
  auto* steps_opt = viz_cmd->add_option("--steps", steps, "ascent steps");
  viz_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      const TrainedModel model = load_checkpoint(model_dir);
      cfg.preset = model.config.preset;
      cfg.layer = vlayer_opt->count() ? layer : (cfg.layer.empty() ? model.config.feature_layer : cfg.layer);
      set_if(ch_opt, cfg.viz_channels, channels);
      set_if(steps_opt, cfg.viz.steps, steps);
      const fs::path out = require_out(g, "DIR");
      const IlluminateOptions o = illuminate_options_of(cfg);
      const auto list = parse_channel_list(cfg.viz_channels, model.layer_shape(cfg.layer).channels);
      const LayerGrid grid = run_viz_stage(model, cfg.layer, list, o.viz, out);
      echo_config(cfg, out, true);
      int dead = 0;
      for (const auto& f : grid.features) dead += f.dead;
      std::cout << "visualised " << grid.features.size() << " channels (" << dead << " dead) into " << out << "\n";
    };
  });

  // bestchannel
  auto* best_cmd = app.add_subcommand("bestchannel", "best channel image for one input");
  std::string image_file, viz_dir;
  best_cmd->add_option("--model", model_dir, "checkpoint directory")->required();
  best_cmd->add_option("--image", image_file, "input image")->required()->check(CLI::ExistingFile);
  auto* blayer_opt = best_cmd->add_option("--layer", layer, "layer name");
  best_cmd->add_option("--viz-dir", viz_dir, "visualisation cache (default: next to --out)");
  auto* bsteps_opt = best_cmd->add_option("--steps", steps, "ascent steps for missing channels");
  best_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      const TrainedModel model = load_checkpoint(model_dir);
      cfg.preset = model.config.preset;
      cfg.layer = blayer_opt->count() ? layer : (cfg.layer.empty() ? model.config.feature_layer : cfg.layer);
      set_if(bsteps_opt, cfg.viz.steps, steps);
      const fs::path out = require_out(g, "PNG");
      Image8 img = read_image(image_file);
      if (img.height != kCellSize || img.width != kCellSize) {
        RawImage raw{img, image_file, ""};
        img = extract_cell(raw, detect_cell_region(raw, cfg.detect)).pixels;
      }
      const BestChannelMap map = best_channel_map(forward_features(model, img, cfg.layer));
      VizCache cache(viz_dir.empty() ? fs::absolute(out).parent_path() / kAssetDirName : fs::path(viz_dir));
      const VizParams params = illuminate_options_of(cfg).viz;
      const Image8 mosaic = render_best_channel_image(map, [&](int ch) -> std::optional<FeatureImage> {
        return cache.get_or_compute(model, cfg.layer, ch, params);
      });
      write_png(out, mosaic);
      write_if_changed(fs::path(out.string() + ".json"), best_channel_map_to_json(map).dump(2) + "\n");
      echo_config(cfg, out, false);
      std::cout << "wrote " << out << "\n";
    };
  });

  // tree fit | score
  auto* tree_cmd = app.add_subcommand("tree", "fit or score a decision tree");
  tree_cmd->require_subcommand(1);
  auto* fit_cmd = tree_cmd->add_subcommand("fit", "fit a tree on a feature table");
  std::string feats_file, exclude, criterion, tree_file;
  int max_depth = 4, min_leaf = 1;
  fit_cmd->add_option("--feats", feats_file, "feature table")->required()->check(CLI::ExistingFile);
  auto* depth_opt = fit_cmd->add_option("--max-depth", max_depth, "maximum depth");
  auto* leaf_opt = fit_cmd->add_option("--min-samples-leaf", min_leaf, "minimum samples per leaf");
  auto* crit_opt = fit_cmd->add_option("--criterion", criterion, "gini or entropy")->check(CLI::IsMember({"gini", "entropy"}));
  auto* excl_opt = fit_cmd->add_option("--exclude", exclude, "comma-separated feature names");
  fit_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      set_if(depth_opt, cfg.tree.max_depth, max_depth);
      set_if(leaf_opt, cfg.tree.min_samples_leaf, min_leaf);
      if (crit_opt->count()) cfg.tree.criterion = criterion == "entropy" ? Criterion::kEntropy : Criterion::kGini;
      if (excl_opt->count()) cfg.exclude = split_names(exclude);
      const fs::path out = require_out(g, "tree.json");
      const FeatureTable table = load_feature_table(feats_file);
      cfg.layer = table.layer_name;
      const DecisionTree tree = run_tree_stage(table, cfg.tree, cfg.exclude, out);
      echo_config(cfg, out, false);
      json r = {{"depth", tree.depth()}, {"nodes", tree.nodes.size()}};
      const FeatureTable train = table.subset(Split::kTrain), test = table.subset(Split::kTest);
      if (train.rows()) r["train_acc"] = tree_accuracy(tree, train);
      if (test.rows()) r["test_acc"] = tree_accuracy(tree, test);
      print_json(r);
    };
  });
  auto* score_cmd = tree_cmd->add_subcommand("score", "score a tree on a feature table");
  score_cmd->add_option("--tree", tree_file, "tree JSON")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--feats", feats_file, "feature table")->required()->check(CLI::ExistingFile);
  score_cmd->callback([&] {
    action = [&] {
      const DecisionTree tree = load_tree(tree_file);
      const FeatureTable table = load_feature_table(feats_file);
      json r = {{"all_acc", tree_accuracy(tree, table)}};
      const FeatureTable train = table.subset(Split::kTrain), test = table.subset(Split::kTest);
      if (train.rows()) r["train_acc"] = tree_accuracy(tree, train);
      if (test.rows()) r["test_acc"] = tree_accuracy(tree, test);
      print_json(r);
    };
  });

  // illuminate
  auto* ill_cmd = app.add_subcommand("illuminate", "annotate a tree with visualisations");
  ill_cmd->add_option("--tree", tree_file, "tree JSON")->required()->check(CLI::ExistingFile);
  ill_cmd->add_option("--model", model_dir, "checkpoint directory")->required();
  ill_cmd->add_option("--data", data, "dataset root or manifest JSON");
  ill_cmd->add_option("--feats", feats_file, "feature table (skips re-extraction)");
  auto* isteps_opt = ill_cmd->add_option("--steps", steps, "ascent steps");
  ill_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      set_if(isteps_opt, cfg.viz.steps, steps);
      const fs::path out = require_out(g, "DIR");
      const DecisionTree tree = load_tree(tree_file);
      const TrainedModel model = load_checkpoint(model_dir);
      cfg.preset = model.config.preset;
      cfg.layer = tree.layer_name;
      FeatureTable table;
      if (!feats_file.empty()) {
        table = load_feature_table(feats_file);
      } else if (!data.empty()) {
        table = extract_feature_vectors(model, resolve_dataset(data, cfg.split_fraction, cfg.seed),
                                        tree.layer_name);
      } else {
        throw Error(ErrorCode::kInvalidArgument, "--data or --feats is required");
      }
      const IlluminatedTree it = run_illuminate_stage(tree, model, table, illuminate_options_of(cfg), out);
      echo_config(cfg, out, true);
      print_json(tree_metrics_to_json(it.metrics));
    };
  });

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "serve the explorer API");
  std::string session_dir, host = "127.0.0.1", ui_dir;
  int port = 8080;
  bool on_demand = false;
  serve_cmd->add_option("--session", session_dir, "pipeline output directory or session.json")->required();
  serve_cmd->add_option("--port", port, "port (0 picks a free one)");
  serve_cmd->add_option("--host", host, "bind address");
  serve_cmd->add_option("--ui", ui_dir, "static UI bundle to mount at /");
  serve_cmd->add_flag("--on-demand-viz", on_demand, "compute missing visualisations on request");
  serve_cmd->callback([&] {
    action = [&] {
      fs::path file = session_dir;
      if (fs::is_directory(file)) file /= "session.json";
      if (!fs::exists(file)) throw Error(ErrorCode::kIo, "no session at " + file.string());
      ExplorerApi api({on_demand, ui_dir});
      const int bound = api.bind(host, port);
      if (bound < 0) throw Error(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
      g_server = &api;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread loader([&] {
        api.wait_until_ready();
        try {
          api.attach(std::shared_ptr<Session>(Session::open(file)));
          std::cerr << "session loaded\n";
        } catch (const std::exception& e) {
          std::cerr << "error: cannot load session: " << e.what() << "\n";
          api.stop();
        }
      });
      std::cout << "listening on http://" << host << ":" << bound << std::endl;
      api.serve();
      loader.join();
      g_server = nullptr;
    };
  });

  // run
  auto* run_cmd = app.add_subcommand("run", "run the whole pipeline into --out");
  std::string raw_dir, crops_dir, vchannels;
  int rdepth = 4, rsteps = 256, repochs = 0;
  run_cmd->add_option("--raw", raw_dir, "raw labelled images to extract")->check(CLI::ExistingDirectory);
  run_cmd->add_option("--crops", crops_dir, "already extracted 100x100 crops")->check(CLI::ExistingDirectory);
  auto* rn_opt = run_cmd->add_option("--n", n_per_class, "synthetic images per class");
  auto* rpreset_opt = run_cmd->add_option("--preset", preset, "cnn4 or cnn6");
  auto* rlayer_opt = run_cmd->add_option("--layer", layer, "designated feature layer");
  auto* repochs_opt = run_cmd->add_option("--epochs", repochs, "training epochs");
  auto* rdepth_opt = run_cmd->add_option("--max-depth", rdepth, "tree depth");
  auto* rexcl_opt = run_cmd->add_option("--exclude", exclude, "comma-separated feature names");
  auto* rsteps_opt = run_cmd->add_option("--steps", rsteps, "ascent steps");
  auto* rch_opt = run_cmd->add_option("--viz-channels", vchannels, "layer grid channels ('' skips)");
  run_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = base_config(g);
      if (!raw_dir.empty() || !crops_dir.empty()) cfg.synth.reset();
      if (!raw_dir.empty()) cfg.raw_dir = raw_dir;
      if (!crops_dir.empty()) cfg.crops_dir = crops_dir;
      if (rn_opt->count()) {
        if (!cfg.synth) cfg.synth = default_synth_spec(n_per_class);
        cfg.synth->n_per_class = n_per_class;
      }
      set_if(rpreset_opt, cfg.preset, preset);
      set_if(rlayer_opt, cfg.layer, layer);
      set_if(repochs_opt, cfg.train.epochs, repochs);
      set_if(rdepth_opt, cfg.tree.max_depth, rdepth);
      if (rexcl_opt->count()) cfg.exclude = split_names(exclude);
      set_if(rsteps_opt, cfg.viz.steps, rsteps);
      set_if(rch_opt, cfg.viz_channels, vchannels);
      const PipelineReport rep = run_pipeline(cfg, g.force);
      print_json(rep.metrics);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (action) action();
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
