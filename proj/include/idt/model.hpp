#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "idt/cellcrop.hpp"
#include "idt/image.hpp"
#include "idt/kernels.hpp"
#include "json.hpp"

namespace idt {

// One convolution block: conv -> ReLU -> optional 2x2 max pool. The block
// output is addressable by `name` (e.g. "4M").
struct ConvBlockSpec {
  std::string name;
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool pool = false;
  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

struct ModelConfig {
  std::string preset = "custom";
  int input_height = kCellSize;
  int input_width = kCellSize;
  int input_channels = 3;
  std::vector<ConvBlockSpec> blocks;
  std::string feature_layer;  // designated layer for feature vectors
  std::uint64_t seed = 0;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// cnn4: 100 -> 50 -> 25 -> 12 -> 10x10x128 ("4M").
// cnn6: 100 -> 50 -> 25 -> 25 -> 12 -> 10x10x128 ("5M") -> 10x10x128.
ModelConfig make_preset(std::string_view preset, std::uint64_t seed);

struct ConvParams {
  std::vector<double> weights;  // [k][k][in][out]
  std::vector<double> bias;
  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

struct Parameters {
  std::vector<ConvParams> conv;
  std::vector<double> head_weights;  // [last_channels][n_classes]
  std::vector<double> head_bias;

  // Every parameter buffer in a fixed order (the checkpoint blob order).
  std::vector<std::span<double>> buffers();
  std::vector<std::span<const double>> buffers() const;
  std::size_t count() const;
  friend bool operator==(const Parameters&, const Parameters&) = default;
};

struct Normalization {
  std::vector<double> mean{0.0, 0.0, 0.0};
  std::vector<double> stddev{1.0, 1.0, 1.0};
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct TrainMetrics {
  int epochs = 0;
  double final_loss = 0.0;
  double final_train_acc = 0.0;
  double final_test_acc = 0.0;
};

struct TrainedModel {
  ModelConfig config;
  std::vector<std::string> class_order;
  Parameters params;
  Normalization norm;
  TrainMetrics metrics;

  int n_classes() const { return static_cast<int>(class_order.size()); }
  int layer_index(std::string_view layer_name) const;  // throws UnknownLayer
  Shape3 layer_shape(std::string_view layer_name) const;
  std::vector<Shape3> layer_shapes() const;
  kernels::ConvGeometry block_geometry(int block) const;
};

TrainedModel build_model(const ModelConfig& config, std::vector<std::string> class_order);
TrainedModel build_model(const ModelConfig& config, int n_classes);

// Per-block intermediates retained for backpropagation.
struct BlockTrace {
  Tensor3 input;
  Tensor3 activated;  // post-ReLU conv output
  std::vector<int> pool_argmax;
  Tensor3 pooled;
  bool has_pool = false;

  const Tensor3& output() const { return has_pool ? pooled : activated; }
};

struct ForwardTrace {
  std::vector<BlockTrace> blocks;
  std::vector<double> pooled_features;  // global average pool of the last block
  std::vector<double> logits;
};

// Unit-range image -> network input space.
Tensor3 normalize_input(const TrainedModel& model, const Tensor3& unit_image);

// Runs blocks [0, last_block]; the head runs only when last_block is the
// final block and with_head is set.
ForwardTrace forward(const TrainedModel& model, const Tensor3& normalized_input, int last_block,
                     bool with_head);

// Backpropagates grad_output (shaped like block `from_block`'s output) to
// the network input. When grads is non-null, parameter gradients of blocks
// [0, from_block] are accumulated into it.
Tensor3 backward(const TrainedModel& model, const ForwardTrace& trace, int from_block,
                 Tensor3 grad_output, Parameters* grads);

std::vector<double> predict_logits(const TrainedModel& model, const Image8& image);
// Argmax of logits; ties resolve to the lowest class index.
int predict_class(const TrainedModel& model, const Image8& image);
int argmax_lowest(std::span<const double> values);

struct HyperParams {
  int epochs = 20;
  int batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct LabeledImages {
  std::vector<Image8> images;
  std::vector<int> labels;
  std::size_t size() const { return images.size(); }
};

LabeledImages load_split(const DatasetManifest& manifest, Split split);
Normalization compute_normalization(const LabeledImages& data);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_acc = 0.0;
};

// Deterministic given (model init, hp, data): samples are shuffled with a
// seeded generator and per-sample gradients are reduced in a fixed order.
// Normalization is taken from the model as-is.
TrainedModel train_on(TrainedModel model, const LabeledImages& train_data,
                      const LabeledImages* test_data, const HyperParams& hp,
                      const std::function<void(const EpochLog&)>& on_epoch = {});

// Computes normalization on the train split, trains, records metrics.
TrainedModel train(TrainedModel model, const DatasetManifest& manifest, const HyperParams& hp,
                   const std::function<void(const EpochLog&)>& on_epoch = {});

double accuracy_on(const TrainedModel& model, const LabeledImages& data);
double evaluate(const TrainedModel& model, const DatasetManifest& manifest, Split split);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Checkpoint directory: config.json (config, class order, normalization,
// metrics) plus weights.bin (little-endian float64, Parameters::buffers order).
void save_checkpoint(const std::filesystem::path& dir, const TrainedModel& model);
TrainedModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace idt
