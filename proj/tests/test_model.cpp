#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "idt/error.hpp"
#include "idt/features.hpp"
#include "idt/kernels.hpp"
#include "idt/model.hpp"

namespace fs = std::filesystem;
using namespace idt;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an idt::Error");
  return ErrorCode::kIo;
}

// Weighted sum of one block's output; a generic scalar for gradient checks.
double weighted_output(const TrainedModel& m, const Tensor3& x, int block, const Tensor3& w) {
  const ForwardTrace t = forward(m, x, block, false);
  const Tensor3& out = t.blocks.back().output();
  double s = 0.0;
  for (std::size_t i = 0; i < out.data.size(); ++i) s += out.data[i] * w.data[i];
  return s;
}

bool close(double analytic, double numeric, double tol) {
  return std::abs(analytic - numeric) <= tol * std::max(1.0, std::abs(analytic) + std::abs(numeric));
}

const fs::path& crops_dir() {
  static const fs::path dir = fs::temp_directory_path() / "idt_test_model_crops";
  return dir;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("parallel conv kernels match the serial reference") {
  std::mt19937_64 rng(11);
  struct Case {
    Shape3 in;
    int out_c, k, stride, pad;
  };
  const std::vector<Case> cases = {{{9, 7, 3}, 5, 3, 1, 1}, {{12, 12, 4}, 6, 3, 2, 1},
                                   {{10, 11, 2}, 3, 5, 1, 2}, {{6, 6, 8}, 16, 1, 1, 0},
                                   {{12, 12, 16}, 32, 3, 1, 0}, {{13, 9, 3}, 4, 3, 2, 0}};
  for (const Case& c : cases) {
    const auto g = kernels::ConvGeometry::make(c.in, c.out_c, c.k, c.stride, c.pad);
    const auto in = random_vec(g.in.size(), rng);
    const auto w = random_vec(g.weight_count(), rng);
    const auto b = random_vec(g.out.channels, rng);
    const auto d_out = random_vec(g.out.size(), rng);

    std::vector<double> out_p(g.out.size()), out_r(g.out.size());
    kernels::conv2d_forward(g, in, w, b, out_p);
    kernels::reference::conv2d_forward(g, in, w, b, out_r);
    CHECK(max_abs_diff(out_p, out_r) < 1e-10);

    std::vector<double> din_p(g.in.size(), 7.0), din_r(g.in.size(), -3.0);
    kernels::conv2d_backward_data(g, w, d_out, din_p);
    kernels::reference::conv2d_backward_data(g, w, d_out, din_r);
    CHECK(max_abs_diff(din_p, din_r) < 1e-10);

    std::vector<double> dw_p(g.weight_count(), 1.0), dw_r(g.weight_count(), 1.0);
    std::vector<double> db_p(g.out.channels, 2.0), db_r(g.out.channels, 2.0);
    kernels::conv2d_backward_weights(g, in, d_out, dw_p, db_p);
    kernels::reference::conv2d_backward_weights(g, in, d_out, dw_r, db_r);
    CHECK(max_abs_diff(dw_p, dw_r) < 1e-10);
    CHECK(max_abs_diff(db_p, db_r) < 1e-10);
  }
}

TEST_CASE("conv matches a hand-written direct sum") {
  // 1 input channel, 1 output channel, 3x3 kernel, pad 1 on a 3x3 image.
  const auto g = kernels::ConvGeometry::make({3, 3, 1}, 1, 3, 1, 1);
  const std::vector<double> in = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> w(9, 0.0);
  w[4] = 1.0;  // centre tap
  w[0] = 2.0;  // top-left tap
  std::vector<double> out(9);
  kernels::conv2d_forward(g, in, w, std::vector<double>{0.5}, out);
  // out(r,c) = in(r,c) + 2*in(r-1,c-1) + 0.5
  const std::vector<double> expect = {1.5, 2.5, 3.5, 4.5, 7.5, 10.5, 7.5, 16.5, 19.5};
  CHECK(max_abs_diff(out, expect) == 0.0);
}

TEST_CASE("maxpool picks the first maximum and floors odd sizes") {
  const Shape3 in{3, 5, 1};
  CHECK(kernels::maxpool2_shape(in) == Shape3{1, 2, 1});
  const std::vector<double> v = {1, 4, 4, 0, 9,  //
                                 4, 2, 3, 4, 9,  //
                                 9, 9, 9, 9, 9};
  std::vector<double> out(2);
  std::vector<int> arg(2);
  kernels::maxpool2_forward(in, v, out, arg);
  CHECK(out == std::vector<double>{4, 4});
  CHECK(arg == std::vector<int>{1, 2});

  std::vector<double> d_in(v.size(), 5.0);
  kernels::maxpool2_backward(arg, std::vector<double>{1.0, 2.0}, d_in);
  std::vector<double> expect(v.size(), 0.0);
  expect[1] = 1.0;
  expect[2] = 2.0;
  CHECK(d_in == expect);
}

}  // TEST_SUITE

TEST_SUITE("model") {

TEST_CASE("presets have the declared layer shapes") {
  const TrainedModel m4 = build_model(make_preset("cnn4", 1), 2);
  CHECK(m4.layer_shape("4M") == Shape3{10, 10, 128});
  CHECK(m4.config.feature_layer == "4M");
  const TrainedModel m6 = build_model(make_preset("cnn6", 1), 2);
  CHECK(m6.layer_shape("5M") == Shape3{10, 10, 128});
  CHECK(m6.config.blocks.size() == 6);
  CHECK(m4.config.blocks.size() == 4);

  const Image8 img = to_image8(test::random_tensor({100, 100, 3}, 3));
  CHECK(predict_logits(m6, img).size() == 2);
  CHECK(predict_logits(build_model(make_preset("cnn4", 1), 4), img).size() == 4);
  CHECK(code_of([] { make_preset("cnn5", 0); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([] { build_model(make_preset("cnn4", 0), 1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("initialisation is a function of the seed") {
  const TrainedModel a = build_model(make_preset("cnn4", 9), 2);
  const TrainedModel b = build_model(make_preset("cnn4", 9), 2);
  const TrainedModel c = build_model(make_preset("cnn4", 10), 2);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == c.params);
}

TEST_CASE("forward_features: shape, sign, purity, unknown layer") {
  const TrainedModel m = build_model(make_preset("cnn4", 2), 2);
  for (int i = 0; i < 3; ++i) {
    const Image8 img = to_image8(test::random_tensor({100, 100, 3}, 100 + i));
    const FeatureMap a = forward_features(m, img, "4M");
    CHECK(a.values.shape() == Shape3{10, 10, 128});
    CHECK(*std::min_element(a.values.data.begin(), a.values.data.end()) >= 0.0);
    const FeatureMap b = forward_features(m, img, "4M");
    CHECK(a.values.data == b.values.data);
  }
  CHECK(code_of([&] { forward_features(m, Image8(100, 100, 3), "9Z"); }) == ErrorCode::kUnknownLayer);
  CHECK(code_of([&] { forward_features(m, Image8(50, 50, 3), "4M"); }) == ErrorCode::kDimensionMismatch);
}

TEST_CASE("zero image through a zero-bias network gives a zero map") {
  const TrainedModel m = build_model(make_preset("cnn4", 4), 2);
  for (const auto& c : m.params.conv)
    for (double b : c.bias) REQUIRE(b == 0.0);
  const FeatureMap f = forward_features(m, Image8(100, 100, 3, 0), "4M");
  CHECK(std::all_of(f.values.data.begin(), f.values.data.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("backward matches central differences") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const TrainedModel m = test::tiny_model(seed, 9, 8);
    const int last = static_cast<int>(m.config.blocks.size()) - 1;
    const Tensor3 x = test::random_tensor({9, 8, 3}, seed * 7, -1.0, 1.0);
    const Tensor3 w = test::random_tensor(m.layer_shapes().back(), seed * 13, -1.0, 1.0);

    Parameters grads = m.params;
    for (auto buf : grads.buffers()) std::fill(buf.begin(), buf.end(), 0.0);
    const ForwardTrace t = forward(m, x, last, false);
    const Tensor3 gx = backward(m, t, last, w, &grads);

    const double eps = 1e-6;
    std::mt19937_64 rng(seed);
    for (int k = 0; k < 30; ++k) {
      const std::size_t i = rng() % x.data.size();
      Tensor3 xp = x, xm = x;
      xp.data[i] += eps;
      xm.data[i] -= eps;
      const double fd = (weighted_output(m, xp, last, w) - weighted_output(m, xm, last, w)) / (2 * eps);
      CHECK(close(gx.data[i], fd, 1e-5));
    }
    for (std::size_t b = 0; b < m.params.conv.size(); ++b) {
      for (int k = 0; k < 15; ++k) {
        const bool bias = k % 3 == 0;
        auto& target = bias ? m.params.conv[b].bias : m.params.conv[b].weights;
        const std::size_t i = rng() % target.size();
        TrainedModel mp = m, mm = m;
        (bias ? mp.params.conv[b].bias : mp.params.conv[b].weights)[i] += eps;
        (bias ? mm.params.conv[b].bias : mm.params.conv[b].weights)[i] -= eps;
        const double fd = (weighted_output(mp, x, last, w) - weighted_output(mm, x, last, w)) / (2 * eps);
        const double an = (bias ? grads.conv[b].bias : grads.conv[b].weights)[i];
        CHECK(close(an, fd, 1e-5));
      }
    }
  }
}

TEST_CASE("training: zero epochs, reproducibility, separable data, divergence") {
  TrainedModel m = test::tiny_model(3, 8, 8);
  const LabeledImages train_set = test::colour_images(24, 8, 8, 1);
  const LabeledImages test_set = test::colour_images(10, 8, 8, 2);

  HyperParams hp;
  hp.epochs = 0;
  const TrainedModel same = train_on(m, train_set, &test_set, hp);
  CHECK(same.params == m.params);

  hp.epochs = 6;
  hp.batch_size = 8;
  hp.learning_rate = 0.05;
  hp.seed = 4;
  std::vector<double> losses;
  const TrainedModel a = train_on(m, train_set, &test_set, hp,
                                  [&](const EpochLog& e) { losses.push_back(e.mean_loss); });
  const TrainedModel b = train_on(m, train_set, &test_set, hp);
  CHECK(a.params == b.params);
  CHECK(a.metrics.final_loss == b.metrics.final_loss);
  CHECK(a.metrics.final_test_acc == b.metrics.final_test_acc);
  CHECK(losses.size() == 6);
  CHECK(losses.back() < losses.front());
  CHECK(a.metrics.epochs == 6);
  CHECK(accuracy_on(a, train_set) == 1.0);
  CHECK(a.metrics.final_train_acc == 1.0);

  HyperParams wild = hp;
  wild.learning_rate = 1e200;
  CHECK(code_of([&] { train_on(m, train_set, nullptr, wild); }) == ErrorCode::kDivergedTraining);

  LabeledImages empty;
  CHECK(code_of([&] { train_on(m, empty, nullptr, hp); }) == ErrorCode::kEmptySplit);
  CHECK(code_of([&] { accuracy_on(m, empty); }) == ErrorCode::kEmptySplit);
}

TEST_CASE("accuracy uses argmax with lowest-index ties") {
  CHECK(argmax_lowest(std::vector<double>{1.0, 1.0}) == 0);
  CHECK(argmax_lowest(std::vector<double>{0.0, 2.0, 2.0}) == 1);
  // Zero head: every logit ties, so the model always answers class 0.
  const TrainedModel m = test::tiny_model(5, 8, 8);
  TrainedModel constant = m;
  for (auto& v : constant.params.head_weights) v = 0.0;
  for (auto& v : constant.params.head_bias) v = 0.0;
  const LabeledImages half = test::colour_images(20, 8, 8, 3);
  CHECK(accuracy_on(constant, half) == 0.5);
}

TEST_CASE("checkpoint round trip") {
  const fs::path dir = test::temp_dir("ckpt");
  TrainedModel m = test::tiny_model(6, 8, 8);
  m.class_order = {"blue", "pink"};
  m.metrics = {3, 0.25, 0.9, 0.875};
  save_checkpoint(dir / "m", m);
  const TrainedModel back = load_checkpoint(dir / "m");
  CHECK(back.config == m.config);
  CHECK(back.class_order == m.class_order);
  CHECK(back.params == m.params);
  CHECK(back.norm == m.norm);
  CHECK(back.metrics.epochs == 3);
  CHECK(back.metrics.final_test_acc == 0.875);
  CHECK(code_of([&] { load_checkpoint(dir / "missing"); }) == ErrorCode::kIo);
  CHECK(model_config_from_json(model_config_to_json(make_preset("cnn6", 3))) == make_preset("cnn6", 3));
  fs::remove_all(dir);
}

TEST_CASE("dead channel report") {
  ModelConfig cfg;
  cfg.input_height = cfg.input_width = 6;
  cfg.blocks = {{"toy", 2, 1, 1, 0, false}};
  cfg.feature_layer = "toy";
  TrainedModel m = build_model(cfg, 2);
  // Channel 0 copies the red input plus a positive bias; channel 1 is zero.
  auto& p = m.params.conv[0];
  std::fill(p.weights.begin(), p.weights.end(), 0.0);
  p.weights[0 * 2 + 0] = 1.0;
  p.bias = {0.1, 0.0};
  std::vector<Image8> images;
  for (int i = 0; i < 3; ++i) images.push_back(to_image8(test::random_tensor({6, 6, 3}, 40 + i)));
  const auto report = dead_channel_report(m, images, "toy", 1e-4);
  REQUIRE(report.size() == 1);
  CHECK(report[0] == DeadChannel{1, 0.0});
  CHECK(dead_channel_report(m, images, "toy", 0.0).empty());

  // Zeroing one channel of a random tiny net.
  TrainedModel t = test::tiny_model(8, 8, 8);
  const int last = static_cast<int>(t.config.blocks.size()) - 1;
  const int c_out = t.config.blocks[last].out_channels;
  auto& q = t.params.conv[last];
  for (std::size_t i = 3; i < q.weights.size(); i += c_out) q.weights[i] = 0.0;
  q.bias[3] = 0.0;
  std::vector<Image8> tiny_images;
  for (int i = 0; i < 4; ++i) tiny_images.push_back(to_image8(test::random_tensor({8, 8, 3}, 60 + i)));
  const auto tr = dead_channel_report(t, tiny_images, t.config.feature_layer, 1e-4);
  CHECK(std::find(tr.begin(), tr.end(), DeadChannel{3, 0.0}) != tr.end());
}

}  // TEST_SUITE

TEST_SUITE("features") {

TEST_CASE("feature naming and the index bijection") {
  const Shape3 s{10, 10, 128};
  CHECK(feature_index_of_name("0_0_0", s) == 0);
  CHECK(feature_index_of_name("6_5_9", s) == 6 * 1280 + 5 * 128 + 9);
  CHECK(feature_index_of_name("6_5_9", s) == 8329);
  const FeatureId id = parse_feature_name("0_0_20");
  CHECK(id.row == 0);
  CHECK(id.col == 0);
  CHECK(id.channel == 20);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const FeatureId f = feature_id_of(i, s);
    REQUIRE(feature_index(f, s) == i);
    REQUIRE(feature_index_of_name(format_feature_name(f), s) == i);
  }
  std::mt19937_64 rng(3);
  for (int k = 0; k < 500; ++k) {
    const Shape3 r{int(rng() % 20 + 1), int(rng() % 20 + 1), int(rng() % 200 + 1)};
    const FeatureId f{"", int(rng() % r.height), int(rng() % r.width), int(rng() % r.channels)};
    CHECK(feature_id_of(feature_index(f, r), r) == f);
  }
  for (const char* bad : {"not_a_name", "1_2", "1_2_3_4", "-1_0_0", "1__2", "", "1_2_x", " 1_2_3"})
    CHECK(code_of([&] { parse_feature_name(bad); }) == ErrorCode::kBadFeatureName);
  CHECK(code_of([&] { feature_index_of_name("10_0_0", s); }) == ErrorCode::kOutOfRange);
  CHECK(code_of([&] { feature_index_of_name("0_0_128", s); }) == ErrorCode::kOutOfRange);
  CHECK(code_of([&] { feature_id_of(12800, s); }) == ErrorCode::kOutOfRange);
}

TEST_CASE("untrained cnn4 on a balanced synthetic test split scores near chance") {
  // 200 images per class, half held out: 200 test images.
  const DatasetManifest m = test::synthetic_crops(crops_dir(), 200, 0.5, 21);
  REQUIRE(m.indices(Split::kTest).size() == 200);
  TrainedModel model = build_model(make_preset("cnn4", 5), m.classes);
  const double acc = evaluate(model, m, Split::kTest);
  CHECK(acc == 0.5);
  // A random head too: still inside the +-3 sigma binomial band.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (double& v : model.params.head_weights) v = nd(rng);
  const double acc_random = evaluate(model, m, Split::kTest);
  CHECK(acc_random >= 0.35);
  CHECK(acc_random <= 0.65);
}

TEST_CASE("feature table: width, consistency with forward_features, round trip") {
  const DatasetManifest m = test::synthetic_crops(crops_dir(), 200, 0.5, 21);
  const TrainedModel model = build_model(make_preset("cnn4", 6), m.classes);
  const FeatureTable t = extract_feature_vectors(model, m, "4M");
  CHECK(t.rows() == 400);
  CHECK(t.cols() == 12800);
  const std::size_t k = feature_index_of_name("6_5_9", t.layer_shape);
  for (std::size_t r : {std::size_t{0}, std::size_t{17}, std::size_t{399}}) {
    const FeatureMap fm = forward_features(model, load_cell(m, m.entries[r]).pixels, "4M");
    CHECK(t.at(r, k) == fm.values.at(6, 5, 9));
    CHECK(std::equal(fm.values.data.begin(), fm.values.data.end(), t.row(r).begin()));
    CHECK(t.labels[r] == m.class_index(m.entries[r].class_label));
  }
  CHECK(t.subset(Split::kTrain).rows() + t.subset(Split::kTest).rows() == 400);

  const fs::path dir = test::temp_dir("feats");
  save_feature_table(dir / "f.bin", t);
  const FeatureTable back = load_feature_table(dir / "f.bin");
  CHECK(back.values == t.values);
  CHECK(back.labels == t.labels);
  CHECK(back.paths == t.paths);
  CHECK(back.splits == t.splits);
  CHECK(back.layer_shape == t.layer_shape);
  CHECK(back.class_order == t.class_order);
  fs::remove_all(dir);

  const DatasetManifest all_train = build_manifest(m.root, 1.0, 21);
  const FeatureTable empty = extract_feature_vectors(model, all_train, "4M", SplitSelector::kTest);
  CHECK(empty.rows() == 0);
  CHECK(empty.cols() == 12800);
  CHECK(code_of([&] { evaluate(model, all_train, Split::kTest); }) == ErrorCode::kEmptySplit);
  CHECK(code_of([&] { extract_feature_vectors(model, m, "nope"); }) == ErrorCode::kUnknownLayer);

  const auto dead = dead_channel_report(model, m, "4M", 0.0);
  CHECK(dead.empty());
}

}  // TEST_SUITE
