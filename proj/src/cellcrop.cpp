#include "idt/cellcrop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "idt/error.hpp"
#include "idt/image_io.hpp"
#include "idt/parallel.hpp"
#include "idt/raster.hpp"
#include "idt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idt {

bool mask_pixel(const Image8& image, int row, int col, const ColorDetectParams& params) {
  const Hsv hsv = rgb_to_hsv(image.at(row, col, 0) / 255.0, image.at(row, col, 1) / 255.0,
                             image.at(row, col, 2) / 255.0);
  return hsv.saturation > params.min_saturation &&
         hue_in_band(hsv.hue, params.hue_lo, params.hue_hi);
}

namespace {

int find_root(std::vector<int>& parent, int x) {
  while (parent[x] != x) {
    parent[x] = parent[parent[x]];
    x = parent[x];
  }
  return x;
}

}  // namespace

BBox detect_cell_region(const RawImage& image, const ColorDetectParams& params) {
  const Image8& px = image.pixels;
  if (px.channels != 3) {
    throw Error(ErrorCode::kInvalidArgument, "expected 3 channels in " + image.source_path);
  }
  const int h = px.height, w = px.width;

  // Two-pass labelling with union-find over 4-connected mask pixels.
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  std::vector<int> parent;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!mask_pixel(px, r, c, params)) continue;
      const int up = r > 0 ? label[(r - 1) * w + c] : -1;
      const int left = c > 0 ? label[r * w + c - 1] : -1;
      int id;
      if (up < 0 && left < 0) {
        id = static_cast<int>(parent.size());
        parent.push_back(id);
      } else if (up >= 0 && left >= 0) {
        const int ru = find_root(parent, up), rl = find_root(parent, left);
        id = std::min(ru, rl);
        parent[std::max(ru, rl)] = id;
      } else {
        id = up >= 0 ? up : left;
      }
      label[r * w + c] = id;
    }
  }
  if (parent.empty()) throw Error(ErrorCode::kNoCellFound, "empty mask in " + image.source_path);

  struct Component {
    long area = 0;
    long first = -1;  // raster position of the first pixel
    BBox box{1 << 30, 1 << 30, -1, -1};
  };
  std::vector<Component> comps(parent.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int l = label[r * w + c];
      if (l < 0) continue;
      Component& comp = comps[find_root(parent, l)];
      if (comp.first < 0) comp.first = static_cast<long>(r) * w + c;
      ++comp.area;
      comp.box.row_min = std::min(comp.box.row_min, r);
      comp.box.col_min = std::min(comp.box.col_min, c);
      comp.box.row_max = std::max(comp.box.row_max, r + 1);
      comp.box.col_max = std::max(comp.box.col_max, c + 1);
    }
  }
  const Component* best = nullptr;
  for (const Component& comp : comps) {
    if (comp.area == 0) continue;
    if (!best || comp.area > best->area || (comp.area == best->area && comp.first < best->first)) {
      best = &comp;
    }
  }
  if (best->area < params.min_area) {
    throw Error(ErrorCode::kNoCellFound, "largest component has " + std::to_string(best->area) +
                                             " px in " + image.source_path);
  }
  return best->box;
}

CellImage extract_cell(const RawImage& image, const BBox& bbox) {
  const Image8& px = image.pixels;
  const int side = std::max(bbox.height(), bbox.width());
  const int r0 = bbox.row_min - (side - bbox.height()) / 2;
  const int c0 = bbox.col_min - (side - bbox.width()) / 2;

  Image8 square(side, side, 3);
  for (int r = 0; r < side; ++r) {
    const int sr = std::clamp(r0 + r, 0, px.height - 1);
    for (int c = 0; c < side; ++c) {
      const int sc = std::clamp(c0 + c, 0, px.width - 1);
      for (int ch = 0; ch < 3; ++ch) square.at(r, c, ch) = px.at(sr, sc, ch);
    }
  }
  CellImage out;
  out.pixels = side == kCellSize ? std::move(square) : resize_bilinear(square, kCellSize, kCellSize);
  out.class_label = image.class_label;
  out.source_path = image.source_path;
  return out;
}

std::string_view split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw Error(ErrorCode::kInvalidArgument, "unknown split '" + std::string(name) + "'");
}

int DatasetManifest::class_index(std::string_view label) const {
  const auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) {
    throw Error(ErrorCode::kInvalidArgument, "class '" + std::string(label) + "' not in manifest");
  }
  return static_cast<int>(it - classes.begin());
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) out.push_back(i);
  return out;
}

DatasetManifest build_manifest(const fs::path& dataset_root, double split_fraction,
                               std::uint64_t seed) {
  if (!fs::is_directory(dataset_root)) {
    throw Error(ErrorCode::kIo, "dataset root " + dataset_root.string() + " is not a directory");
  }
  if (split_fraction < 0.0 || split_fraction > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "split_fraction must lie in [0,1]");
  }
  DatasetManifest manifest;
  manifest.root = dataset_root;
  manifest.seed = seed;
  manifest.split_fraction = split_fraction;
  for (const auto& dir : fs::directory_iterator(dataset_root)) {
    if (dir.is_directory()) manifest.classes.push_back(dir.path().filename().string());
  }
  std::sort(manifest.classes.begin(), manifest.classes.end());
  if (manifest.classes.empty()) {
    throw Error(ErrorCode::kEmptyClass, "no class directories under " + dataset_root.string());
  }

  for (std::size_t k = 0; k < manifest.classes.size(); ++k) {
    const std::string& cls = manifest.classes[k];
    std::vector<std::string> files;
    for (const auto& f : fs::directory_iterator(dataset_root / cls)) {
      if (f.is_regular_file() && is_image_file(f.path())) files.push_back(f.path().filename().string());
    }
    if (files.empty()) throw Error(ErrorCode::kEmptyClass, "class '" + cls + "' has no images");
    std::sort(files.begin(), files.end());

    std::vector<std::size_t> order(files.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, k));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(split_fraction * files.size()));
    std::vector<Split> splits(files.size(), Split::kTest);
    for (std::size_t i = 0; i < n_train; ++i) splits[order[i]] = Split::kTrain;

    for (std::size_t i = 0; i < files.size(); ++i) {
      manifest.entries.push_back({cls + "/" + files[i], cls, splits[i]});
    }
  }
  return manifest;
}

json manifest_to_json(const DatasetManifest& manifest) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"path", e.path}, {"class", e.class_label}, {"split", split_name(e.split)}});
  }
  return {{"root", manifest.root.string()},
          {"classes", manifest.classes},
          {"seed", manifest.seed},
          {"split_fraction", manifest.split_fraction},
          {"entries", std::move(entries)}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.root = j.at("root").get<std::string>();
  m.classes = j.at("classes").get<std::vector<std::string>>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.split_fraction = j.value("split_fraction", 0.8);
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("path").get<std::string>(), e.at("class").get<std::string>(),
                         parse_split(e.at("split").get<std::string>())});
  }
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << manifest_to_json(manifest).dump(2) << "\n";
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  return manifest_from_json(json::parse(in));
}

CellImage load_cell(const DatasetManifest& manifest, const ManifestEntry& entry) {
  CellImage cell;
  cell.source_path = manifest.absolute_path(entry).string();
  cell.pixels = read_image(cell.source_path);
  cell.class_label = entry.class_label;
  if (cell.pixels.height != kCellSize || cell.pixels.width != kCellSize) {
    throw Error(ErrorCode::kDimensionMismatch,
                cell.source_path + " is " + std::to_string(cell.pixels.height) + "x" +
                    std::to_string(cell.pixels.width) + ", expected a 100x100 cell crop");
  }
  return cell;
}

// ---------------------------------------------------------------------------
// Synthetic data

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec spec;
  spec.n_per_class = j.value("n_per_class", spec.n_per_class);
  spec.image_size = j.value("image_size", spec.image_size);
  spec.split_fraction = j.value("split_fraction", spec.split_fraction);
  for (const auto& c : j.at("classes")) {
    SynthClass cls;
    cls.name = c.at("name").get<std::string>();
    cls.hue = c.at("hue").get<double>();
    cls.hue_jitter = c.value("hue_jitter", cls.hue_jitter);
    cls.saturation = c.value("saturation", cls.saturation);
    cls.value = c.value("value", cls.value);
    cls.radius_min = c.value("radius_min", cls.radius_min);
    cls.radius_max = c.value("radius_max", cls.radius_max);
    cls.texture_noise = c.value("texture_noise", cls.texture_noise);
    spec.classes.push_back(std::move(cls));
  }
  if (spec.classes.size() < 2) throw Error(ErrorCode::kInvalidArgument, "synth spec needs >= 2 classes");
  if (spec.image_size < 150) throw Error(ErrorCode::kInvalidArgument, "synth image_size must be >= 150");
  return spec;
}

json synth_spec_to_json(const SynthSpec& spec) {
  json classes = json::array();
  for (const auto& c : spec.classes) {
    classes.push_back({{"name", c.name},
                       {"hue", c.hue},
                       {"hue_jitter", c.hue_jitter},
                       {"saturation", c.saturation},
                       {"value", c.value},
                       {"radius_min", c.radius_min},
                       {"radius_max", c.radius_max},
                       {"texture_noise", c.texture_noise}});
  }
  return {{"classes", std::move(classes)},
          {"n_per_class", spec.n_per_class},
          {"image_size", spec.image_size},
          {"split_fraction", spec.split_fraction}};
}

SynthSpec default_synth_spec(int n_per_class) {
  SynthSpec spec;
  spec.n_per_class = n_per_class;
  SynthClass blue;
  blue.name = "blueblob";
  blue.hue = 225.0;
  SynthClass pink;
  pink.name = "pinkblob";
  pink.hue = 318.0;
  spec.classes = {blue, pink};
  return spec;
}

namespace {

std::array<std::uint8_t, 3> to_rgb8(double r, double g, double b) {
  return {static_cast<std::uint8_t>(std::lround(std::clamp(r, 0.0, 1.0) * 255.0)),
          static_cast<std::uint8_t>(std::lround(std::clamp(g, 0.0, 1.0) * 255.0)),
          static_cast<std::uint8_t>(std::lround(std::clamp(b, 0.0, 1.0) * 255.0))};
}

}  // namespace

RawImage synth_image(const SynthClass& cls, int image_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const int n = image_size;
  Tensor3 canvas(n, n, 3);
  const auto bg = hsv_to_rgb({350.0, 0.06, 0.93});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      for (int ch = 0; ch < 3; ++ch) canvas.at(r, c, ch) = bg[ch] + uniform(-0.02, 0.02);

  // A few faint red-cell discs; low saturation keeps them out of the stain mask.
  const int n_rbc = 2 + static_cast<int>(unit(rng) * 3);
  for (int k = 0; k < n_rbc; ++k) {
    const double cy = uniform(0, n), cx = uniform(0, n), rad = uniform(12, 20);
    const auto rgb = hsv_to_rgb({uniform(0.0, 12.0), 0.14, 0.9});
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        if ((r - cy) * (r - cy) + (c - cx) * (c - cx) <= rad * rad)
          for (int ch = 0; ch < 3; ++ch) canvas.at(r, c, ch) = rgb[ch] + uniform(-0.02, 0.02);
  }

  const double radius = uniform(cls.radius_min, cls.radius_max + 1.0);
  const double ry = radius * uniform(0.85, 1.15), rx = radius * uniform(0.85, 1.15);
  const double margin = std::max(ry, rx) + 4.0;
  const double cy = uniform(margin, n - margin), cx = uniform(margin, n - margin);
  const double hue = cls.hue + uniform(-cls.hue_jitter, cls.hue_jitter);
  const auto body = hsv_to_rgb({hue, cls.saturation, cls.value});
  const auto nucleus = hsv_to_rgb({hue, std::min(1.0, cls.saturation * 1.2), cls.value * 0.72});
  const double ny = cy + uniform(-0.25, 0.25) * ry, nx = cx + uniform(-0.25, 0.25) * rx;
  const double nr = radius * uniform(0.35, 0.55);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double dy = (r - cy) / ry, dx = (c - cx) / rx;
      if (dy * dy + dx * dx > 1.0) continue;
      const bool in_nucleus = (r - ny) * (r - ny) + (c - nx) * (c - nx) <= nr * nr;
      const auto& base = in_nucleus ? nucleus : body;
      for (int ch = 0; ch < 3; ++ch) {
        canvas.at(r, c, ch) = base[ch] + uniform(-cls.texture_noise, cls.texture_noise);
      }
    }
  }

  RawImage out;
  out.class_label = cls.name;
  out.pixels = Image8(n, n, 3);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const auto px = to_rgb8(canvas.at(r, c, 0), canvas.at(r, c, 1), canvas.at(r, c, 2));
      for (int ch = 0; ch < 3; ++ch) out.pixels.at(r, c, ch) = px[ch];
    }
  }
  return out;
}

DatasetManifest synth_dataset(const SynthSpec& spec, const fs::path& out_dir, std::uint64_t seed) {
  for (std::size_t k = 0; k < spec.classes.size(); ++k) {
    const SynthClass& cls = spec.classes[k];
    const fs::path dir = out_dir / cls.name;
    fs::create_directories(dir);
    parallel_for(spec.n_per_class, [&](std::ptrdiff_t i) {
      RawImage img = synth_image(cls, spec.image_size, mix_seed(mix_seed(seed, k), i));
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%05d.png", cls.name.c_str(), static_cast<int>(i));
      write_png(dir / name, img.pixels);
    });
  }
  return build_manifest(out_dir, spec.split_fraction, seed);
}

ExtractReport extract_directory(const fs::path& in_dir, const fs::path& out_dir,
                                const ColorDetectParams& params, bool jpeg) {
  struct Job {
    fs::path src;
    fs::path dst;
    std::string label;
  };
  std::vector<Job> jobs;
  std::vector<fs::path> class_dirs;
  for (const auto& d : fs::directory_iterator(in_dir))
    if (d.is_directory()) class_dirs.push_back(d.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir))
      if (f.is_regular_file() && is_image_file(f.path())) files.push_back(f.path());
    std::sort(files.begin(), files.end());
    const std::string label = dir.filename().string();
    fs::create_directories(out_dir / label);
    for (const auto& f : files) {
      fs::path dst = out_dir / label / f.stem();
      dst += jpeg ? ".jpg" : ".png";
      jobs.push_back({f, dst, label});
    }
  }

  std::vector<char> ok(jobs.size(), 0);
  parallel_for(static_cast<std::ptrdiff_t>(jobs.size()), [&](std::ptrdiff_t i) {
    try {
      RawImage raw{read_image(jobs[i].src), jobs[i].src.string(), jobs[i].label};
      const CellImage cell = extract_cell(raw, detect_cell_region(raw, params));
      if (jpeg) {
        write_jpeg(jobs[i].dst, cell.pixels);
      } else {
        write_png(jobs[i].dst, cell.pixels);
      }
      ok[i] = 1;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNoCellFound) throw;
    }
  });
  ExtractReport report;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (ok[i]) {
      ++report.extracted;
    } else {
      report.skipped.push_back(jobs[i].src.string());
    }
  }
  return report;
}

}  // namespace idt
