#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "idt/features.hpp"
#include "idt/featviz.hpp"
#include "idt/image.hpp"
#include "json.hpp"

namespace idt {

struct BestCell {
  int channel = 0;
  double activation = 0.0;
  friend bool operator==(const BestCell&, const BestCell&) = default;
};

// Most-activated channel at every spatial position of a layer.
struct BestChannelMap {
  std::string layer_name;
  int height = 0;
  int width = 0;
  std::vector<BestCell> cells;  // row-major

  const BestCell& at(int row, int col) const { return cells[static_cast<std::size_t>(row) * width + col]; }
  friend bool operator==(const BestChannelMap&, const BestChannelMap&) = default;
};

// Ties resolve to the lowest channel index.
BestChannelMap best_channel_map(const FeatureMap& featmap);

nlohmann::json best_channel_map_to_json(const BestChannelMap& map);
BestChannelMap best_channel_map_from_json(const nlohmann::json& j);

struct MosaicStyle {
  int slot = 40;                    // pixels per spatial cell
  double min_tile_fraction = 0.15;  // tile side for the weakest activation
  double background_opacity = 0.0;  // > 0 blends the source image underneath
};

// Side length in pixels of the tile for `activation`, linear between the
// map's minimum and maximum activation. Equal activations give full tiles.
int tile_side(double activation, double min_activation, double max_activation,
              const MosaicStyle& style);

using VizLookup = std::function<std::optional<FeatureImage>(int channel)>;

// H x W mosaic; each slot holds the referenced channel's visualisation,
// centred and scaled by activation, labelled with the channel number at the
// bottom-left. Throws MissingVisualization when `lookup` misses a channel.
Image8 render_best_channel_image(const BestChannelMap& map, const VizLookup& lookup,
                                 const MosaicStyle& style = {},
                                 const Image8* source_image = nullptr);

}  // namespace idt
