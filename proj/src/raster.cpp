#include "idt/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>

namespace idt {

Tensor3 to_unit(const Image8& image) {
  Tensor3 out(image.height, image.width, image.channels);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) out.data[i] = image.pixels[i] / 255.0;
  return out;
}

Image8 to_image8(const Tensor3& image) {
  Image8 out(image.height, image.width, image.channels);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const double v = std::clamp(image.data[i], 0.0, 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

Hsv rgb_to_hsv(double r, double g, double b) {
  const double max = std::max({r, g, b});
  const double min = std::min({r, g, b});
  const double delta = max - min;
  Hsv out;
  out.value = max;
  out.saturation = max > 0.0 ? delta / max : 0.0;
  if (delta <= 0.0) return out;
  double h;
  if (max == r) {
    h = std::fmod((g - b) / delta, 6.0);
  } else if (max == g) {
    h = (b - r) / delta + 2.0;
  } else {
    h = (r - g) / delta + 4.0;
  }
  h *= 60.0;
  if (h < 0.0) h += 360.0;
  if (h >= 360.0) h -= 360.0;
  out.hue = h;
  return out;
}

std::array<double, 3> hsv_to_rgb(const Hsv& hsv) {
  const double c = hsv.value * hsv.saturation;
  double hp = std::fmod(hsv.hue, 360.0);
  if (hp < 0) hp += 360.0;
  hp /= 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = hsv.value - c;
  return {r + m, g + m, b + m};
}

bool hue_in_band(double hue, double lo, double hi) {
  if (lo <= hi) return hue >= lo && hue <= hi;
  return hue >= lo || hue <= hi;
}

double mean_hue(const Tensor3& image) {
  double sx = 0.0, sy = 0.0;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const Hsv hsv = rgb_to_hsv(image.at(r, c, 0), image.at(r, c, 1), image.at(r, c, 2));
      const double rad = hsv.hue * std::numbers::pi / 180.0;
      sx += hsv.saturation * std::cos(rad);
      sy += hsv.saturation * std::sin(rad);
    }
  }
  if (std::hypot(sx, sy) < 1e-12) return -1.0;
  double deg = std::atan2(sy, sx) * 180.0 / std::numbers::pi;
  if (deg < 0) deg += 360.0;
  return deg;
}

Image8 resize_bilinear(const Image8& src, int out_height, int out_width) {
  Image8 out(out_height, out_width, src.channels);
  const double sy = static_cast<double>(src.height) / out_height;
  const double sx = static_cast<double>(src.width) / out_width;
  for (int r = 0; r < out_height; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int c = 0; c < out_width; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < src.channels; ++ch) {
        const double top = src.at(y0, x0, ch) * (1 - wx) + src.at(y0, x1, ch) * wx;
        const double bot = src.at(y1, x0, ch) * (1 - wx) + src.at(y1, x1, ch) * wx;
        out.at(r, c, ch) = static_cast<std::uint8_t>(std::lround(top * (1 - wy) + bot * wy));
      }
    }
  }
  return out;
}

void fill_rect(Image8& dst, int row, int col, int height, int width, Rgb color) {
  const int r0 = std::max(row, 0), r1 = std::min(row + height, dst.height);
  const int c0 = std::max(col, 0), c1 = std::min(col + width, dst.width);
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c)
      for (int ch = 0; ch < 3; ++ch) dst.at(r, c, ch) = color[ch];
}

void blit(Image8& dst, const Image8& src, int row, int col) {
  for (int r = 0; r < src.height; ++r) {
    const int dr = row + r;
    if (dr < 0 || dr >= dst.height) continue;
    for (int c = 0; c < src.width; ++c) {
      const int dc = col + c;
      if (dc < 0 || dc >= dst.width) continue;
      for (int ch = 0; ch < dst.channels; ++ch) dst.at(dr, dc, ch) = src.at(r, c, ch);
    }
  }
}

void draw_line(Image8& dst, int r0, int c0, int r1, int c1, Rgb color) {
  const int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
  const int steps = std::max(dr, dc);
  for (int i = 0; i <= steps; ++i) {
    const double t = steps == 0 ? 0.0 : static_cast<double>(i) / steps;
    fill_rect(dst, static_cast<int>(std::lround(r0 + t * (r1 - r0))),
              static_cast<int>(std::lround(c0 + t * (c1 - c0))), 1, 1, color);
  }
}

namespace {

// Rows of a 3x5 glyph, bit 2 = leftmost column.
constexpr std::array<std::array<std::uint8_t, 5>, 10> kGlyphs = {{
    {7, 5, 5, 5, 7},  // 0
    {2, 6, 2, 2, 7},  // 1
    {7, 1, 7, 4, 7},  // 2
    {7, 1, 7, 1, 7},  // 3
    {5, 5, 7, 1, 1},  // 4
    {7, 4, 7, 1, 7},  // 5
    {7, 4, 7, 5, 7},  // 6
    {7, 1, 1, 1, 1},  // 7
    {7, 5, 7, 5, 7},  // 8
    {7, 5, 7, 1, 7},  // 9
}};

}  // namespace

int digit_text_width(std::string_view text, int scale) {
  if (text.empty()) return 0;
  return static_cast<int>(text.size()) * 4 * scale - scale;
}

void draw_digits(Image8& dst, std::string_view text, int row, int col, int scale, Rgb color) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch < '0' || ch > '9') continue;
    const auto& glyph = kGlyphs[static_cast<std::size_t>(ch - '0')];
    const int x0 = col + static_cast<int>(i) * 4 * scale;
    for (int gy = 0; gy < 5; ++gy)
      for (int gx = 0; gx < 3; ++gx)
        if (glyph[gy] & (4 >> gx)) fill_rect(dst, row + gy * scale, x0 + gx * scale, scale, scale, color);
  }
}

}  // namespace idt
