#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "idt/cellcrop.hpp"
#include "idt/model.hpp"

namespace idt::test {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("idt_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Tensor3 random_tensor(Shape3 s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor3 t(s.height, s.width, s.channels);
  for (double& v : t.data) v = u(rng);
  return t;
}

// Small network on an h x w input with every parameter drawn at random,
// biases and head included, so ReLU boundaries sit at generic positions.
inline TrainedModel tiny_model(std::uint64_t seed, int h = 8, int w = 8,
                               std::vector<ConvBlockSpec> blocks = {}, int n_classes = 2) {
  ModelConfig cfg;
  cfg.input_height = h;
  cfg.input_width = w;
  cfg.blocks = blocks.empty()
                   ? std::vector<ConvBlockSpec>{{"a", 4, 3, 1, 1, true}, {"b", 5, 3, 1, 0, false}}
                   : std::move(blocks);
  cfg.feature_layer = cfg.blocks.back().name;
  cfg.seed = seed;
  TrainedModel m = build_model(cfg, n_classes);
  std::mt19937_64 rng(seed ^ 0x5eed);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto buf : m.params.buffers())
    for (double& v : buf) v = nd(rng);
  m.norm.mean = {0.4, 0.5, 0.6};
  m.norm.stddev = {0.2, 0.25, 0.3};
  return m;
}

// 8-bit images of a flat colour plus noise: label 0 reddish, label 1 bluish.
inline LabeledImages colour_images(int n_per_class, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(-30, 30);
  LabeledImages out;
  for (int i = 0; i < 2 * n_per_class; ++i) {
    const int label = i % 2;
    Image8 img(h, w, 3);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const int base[3] = {label ? 60 : 200, 90, label ? 200 : 60};
        for (int ch = 0; ch < 3; ++ch)
          img.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(base[ch] + noise(rng), 0, 255));
      }
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
  return out;
}

// Synthetic blobs extracted to 100x100 crops under <dir>/crops. Built once
// per (dir, n, seed) and reused by later callers in the same process.
inline DatasetManifest synthetic_crops(const std::filesystem::path& dir, int n_per_class,
                                       double split_fraction, std::uint64_t seed) {
  const auto crops = dir / "crops";
  if (!std::filesystem::exists(crops / ".done")) {
    std::filesystem::remove_all(dir);
    synth_dataset(default_synth_spec(n_per_class), dir / "raw", seed);
    extract_directory(dir / "raw", crops, ColorDetectParams{});
    std::ofstream(crops / ".done").put('1');
  }
  return build_manifest(crops, split_fraction, seed);
}

}  // namespace idt::test
