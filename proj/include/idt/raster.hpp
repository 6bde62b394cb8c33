#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "idt/image.hpp"

namespace idt {

struct Hsv {
  double hue = 0.0;         // degrees in [0, 360)
  double saturation = 0.0;  // [0, 1]
  double value = 0.0;       // [0, 1]
};

Hsv rgb_to_hsv(double r, double g, double b);
std::array<double, 3> hsv_to_rgb(const Hsv& hsv);

// True when `hue` lies on the arc from lo to hi (degrees). lo > hi wraps
// through 0.
bool hue_in_band(double hue, double lo, double hi);

// Saturation-weighted circular mean hue over an RGB [0,1] image, in degrees.
// Returns a negative value when the image carries no saturation.
double mean_hue(const Tensor3& image);

using Rgb = std::array<std::uint8_t, 3>;

// Bilinear resample with pixel-centre alignment; coordinates outside the
// source are clamped (edge replication).
Image8 resize_bilinear(const Image8& src, int out_height, int out_width);

void fill_rect(Image8& dst, int row, int col, int height, int width, Rgb color);
void blit(Image8& dst, const Image8& src, int row, int col);
void draw_line(Image8& dst, int r0, int c0, int r1, int c1, Rgb color);

// 3x5 bitmap digits, scaled by `scale`; (row, col) is the top-left corner.
// Non-digit characters render as blanks.
void draw_digits(Image8& dst, std::string_view text, int row, int col, int scale, Rgb color);
int digit_text_width(std::string_view text, int scale);
inline constexpr int kDigitHeight = 5;

}  // namespace idt
