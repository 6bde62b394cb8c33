#include "idt/bestchannel.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "idt/error.hpp"
#include "idt/raster.hpp"

using nlohmann::json;

namespace idt {

BestChannelMap best_channel_map(const FeatureMap& featmap) {
  const Tensor3& t = featmap.values;
  BestChannelMap map;
  map.layer_name = featmap.layer_name;
  map.height = t.height;
  map.width = t.width;
  map.cells.resize(static_cast<std::size_t>(t.height) * t.width);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < t.height; ++r) {
    for (int c = 0; c < t.width; ++c) {
      const double* v = t.data.data() + t.index(r, c, 0);
      int best = 0;
      for (int ch = 1; ch < t.channels; ++ch)
        if (v[ch] > v[best]) best = ch;
      map.cells[static_cast<std::size_t>(r) * t.width + c] = {best, v[best]};
    }
  }
  return map;
}

json best_channel_map_to_json(const BestChannelMap& map) {
  json cells = json::array();
  for (const auto& cell : map.cells) cells.push_back({cell.channel, cell.activation});
  return {{"layer", map.layer_name}, {"H", map.height}, {"W", map.width}, {"cells", std::move(cells)}};
}

BestChannelMap best_channel_map_from_json(const json& j) {
  BestChannelMap map;
  map.layer_name = j.at("layer").get<std::string>();
  map.height = j.at("H").get<int>();
  map.width = j.at("W").get<int>();
  for (const auto& cell : j.at("cells")) map.cells.push_back({cell.at(0).get<int>(), cell.at(1).get<double>()});
  return map;
}

int tile_side(double activation, double min_activation, double max_activation,
              const MosaicStyle& style) {
  double frac = 1.0;
  if (max_activation > min_activation) {
    const double t = (activation - min_activation) / (max_activation - min_activation);
    frac = style.min_tile_fraction + (1.0 - style.min_tile_fraction) * std::clamp(t, 0.0, 1.0);
  }
  return std::max(1, static_cast<int>(std::lround(frac * style.slot)));
}

Image8 render_best_channel_image(const BestChannelMap& map, const VizLookup& lookup,
                                 const MosaicStyle& style, const Image8* source_image) {
  const int slot = style.slot;
  Image8 out(map.height * slot, map.width * slot, 3, 255);
  if (source_image && style.background_opacity > 0.0) {
    const Image8 bg = resize_bilinear(*source_image, out.height, out.width);
    const double a = std::clamp(style.background_opacity, 0.0, 1.0);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      out.pixels[i] = static_cast<std::uint8_t>(std::lround(a * bg.pixels[i] + (1 - a) * 255.0));
    }
  }
  if (map.cells.empty()) return out;

  double lo = map.cells.front().activation, hi = lo;
  for (const auto& cell : map.cells) {
    lo = std::min(lo, cell.activation);
    hi = std::max(hi, cell.activation);
  }

  std::map<int, Image8> thumbs;
  for (const auto& cell : map.cells) {
    if (thumbs.count(cell.channel)) continue;
    const auto viz = lookup(cell.channel);
    if (!viz) {
      throw Error(ErrorCode::kMissingVisualization,
                  "no visualisation for channel " + std::to_string(cell.channel));
    }
    thumbs.emplace(cell.channel, to_image8(viz->pixels));
  }

  for (int r = 0; r < map.height; ++r) {
    for (int c = 0; c < map.width; ++c) {
      const BestCell& cell = map.at(r, c);
      const int side = tile_side(cell.activation, lo, hi, style);
      const int off = (slot - side) / 2;
      blit(out, resize_bilinear(thumbs.at(cell.channel), side, side), r * slot + off, c * slot + off);
      const std::string label = std::to_string(cell.channel);
      const int w = digit_text_width(label, 1);
      fill_rect(out, (r + 1) * slot - kDigitHeight - 2, c * slot, kDigitHeight + 2, w + 2, {0, 0, 0});
      draw_digits(out, label, (r + 1) * slot - kDigitHeight - 1, c * slot + 1, 1, {255, 255, 255});
    }
  }
  return out;
}

}  // namespace idt
