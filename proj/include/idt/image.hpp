#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace idt {

// Interleaved 8-bit image, row-major with the channel index fastest.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int h, int w, int c = 3, std::uint8_t fill = 0)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t index(int row, int col, int ch) const {
    return (static_cast<std::size_t>(row) * width + col) * channels + ch;
  }
  std::uint8_t& at(int row, int col, int ch) { return pixels[index(row, col, ch)]; }
  std::uint8_t at(int row, int col, int ch) const { return pixels[index(row, col, ch)]; }

  bool empty() const { return pixels.empty(); }
  friend bool operator==(const Image8&, const Image8&) = default;
};

struct Shape3 {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

// Dense real-valued H x W x C tensor, channel fastest. Used for network
// activations and for real-valued images in [0,1].
struct Tensor3 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {}
  explicit Tensor3(Shape3 s, double fill = 0.0)
      : Tensor3(s.height, s.width, s.channels, fill) {}

  Shape3 shape() const { return {height, width, channels}; }
  std::size_t index(int row, int col, int ch) const {
    return (static_cast<std::size_t>(row) * width + col) * channels + ch;
  }
  double& at(int row, int col, int ch) { return data[index(row, col, ch)]; }
  double at(int row, int col, int ch) const { return data[index(row, col, ch)]; }

  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }
  friend bool operator==(const Tensor3&, const Tensor3&) = default;
};

// [0,255] -> [0,1]
Tensor3 to_unit(const Image8& image);
// [0,1] -> [0,255], clamped and rounded to nearest.
Image8 to_image8(const Tensor3& image);

}  // namespace idt
