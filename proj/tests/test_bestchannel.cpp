#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "idt/bestchannel.hpp"
#include "idt/error.hpp"

using namespace idt;

namespace {

FeatureMap fmap(Tensor3 t) { return FeatureMap{"L", std::move(t)}; }

// Triple loop over rows, columns and channels; strict > keeps the first maximum.
BestChannelMap brute(const FeatureMap& f) {
  BestChannelMap m;
  m.layer_name = f.layer_name;
  m.height = f.values.height;
  m.width = f.values.width;
  for (int r = 0; r < f.values.height; ++r) {
    for (int c = 0; c < f.values.width; ++c) {
      BestCell best{0, f.values.at(r, c, 0)};
      for (int ch = 0; ch < f.values.channels; ++ch)
        if (f.values.at(r, c, ch) > best.activation) best = {ch, f.values.at(r, c, ch)};
      m.cells.push_back(best);
    }
  }
  return m;
}

std::optional<FeatureImage> red_viz(int channel) {
  FeatureImage f;
  f.pixels = Tensor3(16, 16, 3, 0.0);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c) f.pixels.at(r, c, 0) = 1.0;
  f.channel = channel;
  return f;
}

// Height and width of the red pixels inside one slot.
std::pair<int, int> red_extent(const Image8& img, int slot, int sr, int sc) {
  int r0 = slot, r1 = -1, c0 = slot, c1 = -1;
  for (int r = 0; r < slot; ++r)
    for (int c = 0; c < slot; ++c) {
      const int y = sr * slot + r, x = sc * slot + c;
      if (img.at(y, x, 0) == 255 && img.at(y, x, 1) == 0 && img.at(y, x, 2) == 0) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
    }
  return {r1 - r0 + 1, c1 - c0 + 1};
}

}  // namespace

TEST_SUITE("bestchannel") {

TEST_CASE("uniform map picks channel 0 everywhere") {
  const BestChannelMap m = best_channel_map(fmap(Tensor3(3, 4, 7, 0.25)));
  CHECK(m.height == 3);
  CHECK(m.width == 4);
  for (const auto& cell : m.cells) CHECK(cell == BestCell{0, 0.25});
}

TEST_CASE("hand-built 2x2x3 map") {
  Tensor3 t(2, 2, 3);
  const double v[12] = {0.1, 0.9, 0.3,  //
                        2.0, 2.0, 1.0,  //
                        0.0, 0.0, 0.5,  //
                        4.0, 1.0, 4.5};
  std::copy(std::begin(v), std::end(v), t.data.begin());
  const BestChannelMap m = best_channel_map(fmap(t));
  CHECK(m.at(0, 0) == BestCell{1, 0.9});
  CHECK(m.at(0, 1) == BestCell{0, 2.0});
  CHECK(m.at(1, 0) == BestCell{2, 0.5});
  CHECK(m.at(1, 1) == BestCell{2, 4.5});
  CHECK(m == brute(fmap(t)));
}

TEST_CASE("one-hot peak") {
  Tensor3 t(3, 2, 10);
  t.at(1, 0, 7) = 5.0;
  const BestChannelMap m = best_channel_map(fmap(t));
  CHECK(m.at(1, 0) == BestCell{7, 5.0});
  CHECK(m.at(0, 0) == BestCell{0, 0.0});
}

TEST_CASE("matches the triple loop on random tensors") {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 100; ++k) {
    const Shape3 s{int(rng() % 16 + 1), int(rng() % 16 + 1), int(rng() % 64 + 1)};
    Tensor3 t = test::random_tensor(s, rng());
    // Quantise some tensors so ties are common.
    if (k % 2) for (double& v : t.data) v = std::floor(v * 4) / 4;
    const FeatureMap f = fmap(t);
    REQUIRE(best_channel_map(f) == brute(f));
  }
}

TEST_CASE("tile size grows with activation") {
  MosaicStyle style;
  int prev = 0;
  for (int i = 0; i <= 20; ++i) {
    const int side = tile_side(i * 0.5, 0.0, 10.0, style);
    CHECK(side >= prev);
    prev = side;
  }
  CHECK(tile_side(0.0, 0.0, 10.0, style) == 6);
  CHECK(tile_side(10.0, 0.0, 10.0, style) == 40);
  CHECK(tile_side(3.0, 3.0, 3.0, style) == 40);
}

TEST_CASE("rendered tiles: measured sizes, equal activations, topology") {
  BestChannelMap m;
  m.layer_name = "L";
  m.height = 2;
  m.width = 3;
  m.cells = {{1, 0.0}, {2, 1.0}, {3, 2.0}, {1, 3.0}, {2, 4.0}, {5, 4.0}};
  const MosaicStyle style;
  const Image8 img = render_best_channel_image(m, red_viz, style);
  CHECK(img.height == 2 * style.slot);
  CHECK(img.width == 3 * style.slot);
  std::vector<int> sides;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) {
      const auto [h, w] = red_extent(img, style.slot, r, c);
      CHECK(h == w);
      sides.push_back(w);
    }
  for (std::size_t i = 1; i < sides.size(); ++i) CHECK(sides[i] >= sides[i - 1]);
  CHECK(sides[0] < sides[1]);
  CHECK(sides[4] == sides[5]);
  CHECK(sides[0] == tile_side(0.0, 0.0, 4.0, style));

  BestChannelMap flat = m;
  for (auto& cell : flat.cells) cell.activation = 1.5;
  const Image8 even = render_best_channel_image(flat, red_viz, style);
  // Full tiles: red reaches the top-right corner of every slot.
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) CHECK(even.at(r * 40, c * 40 + 39, 0) == 255);

  CHECK(render_best_channel_image(m, red_viz, style) == img);
}

TEST_CASE("10x10 map gives a 10x10 mosaic with channel labels") {
  Tensor3 t = test::random_tensor({10, 10, 5}, 2);
  const BestChannelMap m = best_channel_map(fmap(t));
  MosaicStyle style;
  style.slot = 20;
  const Image8 img = render_best_channel_image(m, red_viz, style);
  CHECK(img.height == 200);
  CHECK(img.width == 200);
  // Label box at the bottom-left of every slot.
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c) CHECK(img.at(r * 20 + 19, c * 20, 0) == 0);
}

TEST_CASE("missing visualisation") {
  BestChannelMap m;
  m.height = m.width = 1;
  m.cells = {{4, 1.0}};
  const VizLookup none = [](int) { return std::optional<FeatureImage>{}; };
  try {
    render_best_channel_image(m, none);
    FAIL("expected MissingVisualization");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingVisualization);
  }
}

TEST_CASE("json round trip and background blend") {
  const BestChannelMap m = best_channel_map(fmap(test::random_tensor({4, 3, 6}, 5)));
  const auto j = best_channel_map_to_json(m);
  CHECK(j.at("H") == 4);
  CHECK(j.at("W") == 3);
  CHECK(j.at("cells").size() == 12);
  CHECK(best_channel_map_from_json(j) == m);

  MosaicStyle style;
  style.background_opacity = 1.0;
  const Image8 black(10, 10, 3, 0);
  const Image8 img = render_best_channel_image(m, red_viz, style, &black);
  // Slot margins show the source image instead of white.
  bool dark_margin = false;
  for (int r = 0; r < img.height && !dark_margin; ++r)
    for (int c = 0; c < img.width; ++c)
      if (img.at(r, c, 0) == 0 && img.at(r, c, 1) == 0 && img.at(r, c, 2) == 0 && r % 40 < 20) {
        dark_margin = true;
        break;
      }
  CHECK(dark_margin);
}

}  // TEST_SUITE
