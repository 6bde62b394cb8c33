#include "idt/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "idt/error.hpp"
#include "idt/parallel.hpp"
#include "idt/raster.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

ModelConfig make_preset(std::string_view preset, std::uint64_t seed) {
  ModelConfig config;
  config.preset = std::string(preset);
  config.seed = seed;
  if (preset == "cnn4") {
    config.blocks = {
        {"1", 16, 3, 1, 1, true},
        {"2", 32, 3, 1, 1, true},
        {"3", 64, 3, 1, 1, true},
        {"4M", 128, 3, 1, 0, false},
    };
    config.feature_layer = "4M";
  } else if (preset == "cnn6") {
    config.blocks = {
        {"1", 16, 3, 1, 1, true},
        {"2", 32, 3, 1, 1, true},
        {"3", 64, 3, 1, 1, false},
        {"4", 64, 3, 1, 1, true},
        {"5M", 128, 3, 1, 0, false},
        {"6", 128, 3, 1, 1, false},
    };
    config.feature_layer = "5M";
  } else {
    throw Error(ErrorCode::kInvalidArgument, "unknown preset '" + std::string(preset) + "'");
  }
  return config;
}

std::vector<std::span<double>> Parameters::buffers() {
  std::vector<std::span<double>> out;
  for (auto& c : conv) {
    out.emplace_back(c.weights);
    out.emplace_back(c.bias);
  }
  out.emplace_back(head_weights);
  out.emplace_back(head_bias);
  return out;
}

std::vector<std::span<const double>> Parameters::buffers() const {
  std::vector<std::span<const double>> out;
  for (const auto& c : conv) {
    out.emplace_back(c.weights);
    out.emplace_back(c.bias);
  }
  out.emplace_back(head_weights);
  out.emplace_back(head_bias);
  return out;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const auto& b : buffers()) n += b.size();
  return n;
}

int TrainedModel::layer_index(std::string_view layer_name) const {
  for (std::size_t i = 0; i < config.blocks.size(); ++i)
    if (config.blocks[i].name == layer_name) return static_cast<int>(i);
  throw Error(ErrorCode::kUnknownLayer, "no layer named '" + std::string(layer_name) + "'");
}

kernels::ConvGeometry TrainedModel::block_geometry(int block) const {
  Shape3 in{config.input_height, config.input_width, config.input_channels};
  for (int b = 0;; ++b) {
    const ConvBlockSpec& spec = config.blocks[b];
    const auto g = kernels::ConvGeometry::make(in, spec.out_channels, spec.kernel, spec.stride,
                                               spec.padding);
    if (b == block) return g;
    in = spec.pool ? kernels::maxpool2_shape(g.out) : g.out;
  }
}

std::vector<Shape3> TrainedModel::layer_shapes() const {
  std::vector<Shape3> out;
  for (std::size_t b = 0; b < config.blocks.size(); ++b) {
    const auto g = block_geometry(static_cast<int>(b));
    out.push_back(config.blocks[b].pool ? kernels::maxpool2_shape(g.out) : g.out);
  }
  return out;
}

Shape3 TrainedModel::layer_shape(std::string_view layer_name) const {
  return layer_shapes()[layer_index(layer_name)];
}

TrainedModel build_model(const ModelConfig& config, std::vector<std::string> class_order) {
  if (class_order.size() < 2) throw Error(ErrorCode::kInvalidArgument, "need at least 2 classes");
  if (config.blocks.empty()) throw Error(ErrorCode::kInvalidArgument, "model has no blocks");
  TrainedModel model;
  model.config = config;
  model.class_order = std::move(class_order);
  model.norm.mean.assign(config.input_channels, 0.0);
  model.norm.stddev.assign(config.input_channels, 1.0);
  if (!config.feature_layer.empty()) model.layer_index(config.feature_layer);

  std::mt19937_64 rng(config.seed);
  for (std::size_t b = 0; b < config.blocks.size(); ++b) {
    const auto g = model.block_geometry(static_cast<int>(b));
    ConvParams p;
    p.weights.resize(g.weight_count());
    p.bias.assign(g.out.channels, 0.0);
    // He initialisation for ReLU layers.
    std::normal_distribution<double> dist(
        0.0, std::sqrt(2.0 / (g.kernel * g.kernel * g.in.channels)));
    for (double& w : p.weights) w = dist(rng);
    model.params.conv.push_back(std::move(p));
  }
  // Zero head: an untrained model scores every class equally.
  const int last = config.blocks.back().out_channels;
  model.params.head_weights.assign(static_cast<std::size_t>(last) * model.n_classes(), 0.0);
  model.params.head_bias.assign(model.n_classes(), 0.0);
  return model;
}

TrainedModel build_model(const ModelConfig& config, int n_classes) {
  std::vector<std::string> names;
  for (int k = 0; k < n_classes; ++k) names.push_back(std::to_string(k));
  return build_model(config, std::move(names));
}

Tensor3 normalize_input(const TrainedModel& model, const Tensor3& unit_image) {
  const ModelConfig& cfg = model.config;
  if (unit_image.height != cfg.input_height || unit_image.width != cfg.input_width ||
      unit_image.channels != cfg.input_channels) {
    throw Error(ErrorCode::kDimensionMismatch, "input image does not match the model input shape");
  }
  Tensor3 out = unit_image;
  const int c_n = out.channels;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const int c = static_cast<int>(i % c_n);
    out.data[i] = (out.data[i] - model.norm.mean[c]) / model.norm.stddev[c];
  }
  return out;
}

ForwardTrace forward(const TrainedModel& model, const Tensor3& normalized_input, int last_block,
                     bool with_head) {
  ForwardTrace trace;
  trace.blocks.reserve(last_block + 1);
  const Tensor3* x = &normalized_input;
  for (int b = 0; b <= last_block; ++b) {
    const auto g = model.block_geometry(b);
    const ConvParams& p = model.params.conv[b];
    BlockTrace bt;
    bt.input = *x;
    bt.activated = Tensor3(g.out);
    kernels::conv2d_forward(g, bt.input.span(), p.weights, p.bias, bt.activated.span());
    kernels::relu_inplace(bt.activated.span());
    if (model.config.blocks[b].pool) {
      bt.has_pool = true;
      bt.pooled = Tensor3(kernels::maxpool2_shape(g.out));
      bt.pool_argmax.resize(bt.pooled.data.size());
      kernels::maxpool2_forward(g.out, bt.activated.span(), bt.pooled.span(), bt.pool_argmax);
    }
    trace.blocks.push_back(std::move(bt));
    x = &trace.blocks.back().output();
  }

  if (with_head && last_block + 1 == static_cast<int>(model.config.blocks.size())) {
    const Tensor3& out = *x;
    const int c_n = out.channels;
    const double positions = static_cast<double>(out.height) * out.width;
    trace.pooled_features.assign(c_n, 0.0);
    for (std::size_t i = 0; i < out.data.size(); ++i) trace.pooled_features[i % c_n] += out.data[i];
    for (double& v : trace.pooled_features) v /= positions;
    const int k_n = model.n_classes();
    trace.logits = model.params.head_bias;
    for (int c = 0; c < c_n; ++c) {
      const double f = trace.pooled_features[c];
      for (int k = 0; k < k_n; ++k) trace.logits[k] += f * model.params.head_weights[c * k_n + k];
    }
  }
  return trace;
}

Tensor3 backward(const TrainedModel& model, const ForwardTrace& trace, int from_block,
                 Tensor3 grad_output, Parameters* grads) {
  Tensor3 g = std::move(grad_output);
  for (int b = from_block; b >= 0; --b) {
    const BlockTrace& bt = trace.blocks[b];
    const auto geom = model.block_geometry(b);
    Tensor3 g_act(geom.out);
    if (bt.has_pool) {
      kernels::maxpool2_backward(bt.pool_argmax, g.span(), g_act.span());
    } else {
      g_act = std::move(g);
    }
    kernels::relu_backward_inplace(bt.activated.span(), g_act.span());
    if (grads) {
      kernels::conv2d_backward_weights(geom, bt.input.span(), g_act.span(), grads->conv[b].weights,
                                       grads->conv[b].bias);
    }
    Tensor3 g_in(geom.in);
    kernels::conv2d_backward_data(geom, model.params.conv[b].weights, g_act.span(), g_in.span());
    g = std::move(g_in);
  }
  return g;
}

int argmax_lowest(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = static_cast<int>(i);
  return best;
}

std::vector<double> predict_logits(const TrainedModel& model, const Image8& image) {
  const int last = static_cast<int>(model.config.blocks.size()) - 1;
  return forward(model, normalize_input(model, to_unit(image)), last, true).logits;
}

int predict_class(const TrainedModel& model, const Image8& image) {
  return argmax_lowest(predict_logits(model, image));
}

LabeledImages load_split(const DatasetManifest& manifest, Split split) {
  const auto idx = manifest.indices(split);
  LabeledImages data;
  data.images.resize(idx.size());
  data.labels.resize(idx.size());
  parallel_for(static_cast<std::ptrdiff_t>(idx.size()), [&](std::ptrdiff_t i) {
    const ManifestEntry& e = manifest.entries[idx[i]];
    data.images[i] = load_cell(manifest, e).pixels;
    data.labels[i] = manifest.class_index(e.class_label);
  });
  return data;
}

Normalization compute_normalization(const LabeledImages& data) {
  Normalization norm;
  if (data.images.empty()) return norm;
  const int c_n = data.images.front().channels;
  std::vector<double> sum(c_n, 0.0), sq(c_n, 0.0);
  std::size_t count = 0;
  for (const auto& img : data.images) {
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const double v = img.pixels[i] / 255.0;
      sum[i % c_n] += v;
      sq[i % c_n] += v * v;
    }
    count += img.pixels.size() / c_n;
  }
  norm.mean.resize(c_n);
  norm.stddev.resize(c_n);
  for (int c = 0; c < c_n; ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - mean * mean);
    norm.mean[c] = mean;
    norm.stddev[c] = std::sqrt(var) > 1e-6 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

namespace {

struct SampleResult {
  double loss = 0.0;
  bool correct = false;
};

Parameters zeros_like(const Parameters& p) {
  Parameters z = p;
  for (auto buf : z.buffers()) std::fill(buf.begin(), buf.end(), 0.0);
  return z;
}

// Cross-entropy forward/backward for one sample; gradients accumulate into `grads`.
SampleResult sample_gradient(const TrainedModel& model, const Image8& image, int label,
                             Parameters& grads) {
  const int last = static_cast<int>(model.config.blocks.size()) - 1;
  const ForwardTrace trace = forward(model, normalize_input(model, to_unit(image)), last, true);
  const auto& logits = trace.logits;
  const int k_n = model.n_classes();
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  std::vector<double> prob(k_n);
  double z = 0.0;
  for (int k = 0; k < k_n; ++k) z += prob[k] = std::exp(logits[k] - max_logit);
  for (double& p : prob) p /= z;

  SampleResult result;
  result.loss = -(logits[label] - max_logit - std::log(z));
  result.correct = argmax_lowest(logits) == label;

  std::vector<double> d_logits = prob;
  d_logits[label] -= 1.0;
  const auto& feats = trace.pooled_features;
  const int c_n = static_cast<int>(feats.size());
  std::vector<double> d_feats(c_n, 0.0);
  for (int c = 0; c < c_n; ++c) {
    for (int k = 0; k < k_n; ++k) {
      grads.head_weights[c * k_n + k] += feats[c] * d_logits[k];
      d_feats[c] += model.params.head_weights[c * k_n + k] * d_logits[k];
    }
  }
  for (int k = 0; k < k_n; ++k) grads.head_bias[k] += d_logits[k];

  const Tensor3& out = trace.blocks.back().output();
  Tensor3 g(out.shape());
  const double inv = 1.0 / (static_cast<double>(out.height) * out.width);
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = d_feats[i % c_n] * inv;
  backward(model, trace, last, std::move(g), &grads);
  return result;
}

}  // namespace

TrainedModel train_on(TrainedModel model, const LabeledImages& train_data,
                      const LabeledImages* test_data, const HyperParams& hp,
                      const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_data.size() == 0) throw Error(ErrorCode::kEmptySplit, "train split is empty");
  if (hp.batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch_size must be >= 1");

  const std::size_t n = train_data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(hp.seed);

  Parameters velocity = zeros_like(model.params);
  std::vector<Parameters> sample_grads(std::min<std::size_t>(hp.batch_size, n),
                                       zeros_like(model.params));
  std::vector<SampleResult> results(sample_grads.size());

  double last_loss = 0.0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += hp.batch_size) {
      const std::size_t batch = std::min<std::size_t>(hp.batch_size, n - start);
      parallel_for(static_cast<std::ptrdiff_t>(batch), [&](std::ptrdiff_t i) {
        Parameters& g = sample_grads[i];
        for (auto buf : g.buffers()) std::fill(buf.begin(), buf.end(), 0.0);
        const std::size_t s = order[start + i];
        results[i] = sample_gradient(model, train_data.images[s], train_data.labels[s], g);
      });

      for (std::size_t i = 0; i < batch; ++i) {
        loss_sum += results[i].loss;
        correct += results[i].correct ? 1 : 0;
      }
      if (!std::isfinite(loss_sum)) {
        throw Error(ErrorCode::kDivergedTraining,
                    "non-finite loss in epoch " + std::to_string(epoch + 1));
      }

      // Fixed-order reduction, then momentum SGD.
      auto params = model.params.buffers();
      auto vel = velocity.buffers();
      std::vector<std::vector<std::span<double>>> per_sample;
      per_sample.reserve(batch);
      for (std::size_t i = 0; i < batch; ++i) per_sample.push_back(sample_grads[i].buffers());
      const double inv_batch = 1.0 / static_cast<double>(batch);
      for (std::size_t b = 0; b < params.size(); ++b) {
        for (std::size_t j = 0; j < params[b].size(); ++j) {
          double g = 0.0;
          for (std::size_t i = 0; i < batch; ++i) g += per_sample[i][b][j];
          g = g * inv_batch + hp.weight_decay * params[b][j];
          vel[b][j] = hp.momentum * vel[b][j] - hp.learning_rate * g;
          params[b][j] += vel[b][j];
        }
      }
    }
    last_loss = loss_sum / static_cast<double>(n);
    if (on_epoch) on_epoch({epoch + 1, last_loss, static_cast<double>(correct) / n});
  }

  model.metrics.epochs += hp.epochs;
  model.metrics.final_loss = last_loss;
  model.metrics.final_train_acc = accuracy_on(model, train_data);
  model.metrics.final_test_acc =
      test_data && test_data->size() > 0 ? accuracy_on(model, *test_data) : 0.0;
  return model;
}

TrainedModel train(TrainedModel model, const DatasetManifest& manifest, const HyperParams& hp,
                   const std::function<void(const EpochLog&)>& on_epoch) {
  if (static_cast<int>(manifest.classes.size()) != model.n_classes()) {
    throw Error(ErrorCode::kInvalidArgument, "manifest class count differs from the model head");
  }
  model.class_order = manifest.classes;
  const LabeledImages train_data = load_split(manifest, Split::kTrain);
  if (train_data.size() == 0) throw Error(ErrorCode::kEmptySplit, "train split is empty");
  const LabeledImages test_data = load_split(manifest, Split::kTest);
  model.norm = compute_normalization(train_data);
  return train_on(std::move(model), train_data, &test_data, hp, on_epoch);
}

double accuracy_on(const TrainedModel& model, const LabeledImages& data) {
  if (data.size() == 0) throw Error(ErrorCode::kEmptySplit, "cannot score an empty split");
  std::vector<char> hit(data.size(), 0);
  parallel_for(static_cast<std::ptrdiff_t>(data.size()), [&](std::ptrdiff_t i) {
    hit[i] = predict_class(model, data.images[i]) == data.labels[i];
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / data.size();
}

double evaluate(const TrainedModel& model, const DatasetManifest& manifest, Split split) {
  const LabeledImages data = load_split(manifest, split);
  if (data.size() == 0) {
    throw Error(ErrorCode::kEmptySplit, std::string(split_name(split)) + " split is empty");
  }
  return accuracy_on(model, data);
}

json model_config_to_json(const ModelConfig& config) {
  json blocks = json::array();
  for (const auto& b : config.blocks) {
    blocks.push_back({{"name", b.name},
                      {"out_channels", b.out_channels},
                      {"kernel", b.kernel},
                      {"stride", b.stride},
                      {"padding", b.padding},
                      {"pool", b.pool}});
  }
  return {{"preset", config.preset},
          {"input_shape", {config.input_height, config.input_width, config.input_channels}},
          {"blocks", std::move(blocks)},
          {"feature_layer", config.feature_layer},
          {"seed", config.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig config;
  config.preset = j.at("preset").get<std::string>();
  const auto shape = j.at("input_shape").get<std::vector<int>>();
  config.input_height = shape.at(0);
  config.input_width = shape.at(1);
  config.input_channels = shape.at(2);
  for (const auto& b : j.at("blocks")) {
    config.blocks.push_back({b.at("name").get<std::string>(), b.at("out_channels").get<int>(),
                             b.at("kernel").get<int>(), b.at("stride").get<int>(),
                             b.at("padding").get<int>(), b.at("pool").get<bool>()});
  }
  config.feature_layer = j.at("feature_layer").get<std::string>();
  config.seed = j.at("seed").get<std::uint64_t>();
  return config;
}

void save_checkpoint(const fs::path& dir, const TrainedModel& model) {
  fs::create_directories(dir);
  const json meta = {{"format", "idt-checkpoint-1"},
                     {"config", model_config_to_json(model.config)},
                     {"class_order", model.class_order},
                     {"normalization", {{"mean", model.norm.mean}, {"stddev", model.norm.stddev}}},
                     {"metrics",
                      {{"epochs", model.metrics.epochs},
                       {"final_loss", model.metrics.final_loss},
                       {"final_train_acc", model.metrics.final_train_acc},
                       {"final_test_acc", model.metrics.final_test_acc}}},
                     {"parameter_count", model.params.count()}};
  std::ofstream meta_out(dir / "config.json");
  meta_out << meta.dump(2) << "\n";
  std::ofstream blob(dir / "weights.bin", std::ios::binary);
  for (const auto& buf : model.params.buffers()) {
    blob.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size_bytes()));
  }
  if (!meta_out || !blob) throw Error(ErrorCode::kIo, "cannot write checkpoint " + dir.string());
}

TrainedModel load_checkpoint(const fs::path& dir) {
  std::ifstream meta_in(dir / "config.json");
  if (!meta_in) throw Error(ErrorCode::kIo, "no checkpoint at " + dir.string());
  const json meta = json::parse(meta_in);
  TrainedModel model = build_model(model_config_from_json(meta.at("config")),
                                   meta.at("class_order").get<std::vector<std::string>>());
  model.norm.mean = meta.at("normalization").at("mean").get<std::vector<double>>();
  model.norm.stddev = meta.at("normalization").at("stddev").get<std::vector<double>>();
  const json& m = meta.at("metrics");
  model.metrics = {m.at("epochs").get<int>(), m.at("final_loss").get<double>(),
                   m.at("final_train_acc").get<double>(), m.at("final_test_acc").get<double>()};

  std::ifstream blob(dir / "weights.bin", std::ios::binary);
  for (auto buf : model.params.buffers()) {
    blob.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size_bytes()));
  }
  if (!blob || blob.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::kIo, "weights.bin does not match the checkpoint config in " + dir.string());
  }
  return model;
}

}  // namespace idt
