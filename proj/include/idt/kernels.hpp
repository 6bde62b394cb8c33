#pragma once

#include <span>

#include "idt/image.hpp"

// Convolution and pooling kernels over HWC tensors. Weights are laid out
// [ky][kx][in_channel][out_channel] so the innermost loop runs over
// contiguous output channels.
//
// Two implementations share one contract: `reference::` is the direct,
// serial definition kept for testing and benchmarking; the top-level
// functions are the OpenMP-parallel kernels the model uses. Each parallel
// kernel partitions its output so every element is written by one thread,
// which keeps results independent of the thread count.
namespace idt::kernels {

struct ConvGeometry {
  Shape3 in;
  Shape3 out;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  static ConvGeometry make(Shape3 in, int out_channels, int kernel, int stride, int pad);
  std::size_t weight_count() const {
    return static_cast<std::size_t>(kernel) * kernel * in.channels * out.channels;
  }
};

void conv2d_forward(const ConvGeometry& g, std::span<const double> in,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> out);
// Overwrites d_in.
void conv2d_backward_data(const ConvGeometry& g, std::span<const double> weights,
                          std::span<const double> d_out, std::span<double> d_in);
// Accumulates into d_weights and d_bias.
void conv2d_backward_weights(const ConvGeometry& g, std::span<const double> in,
                             std::span<const double> d_out, std::span<double> d_weights,
                             std::span<double> d_bias);

void relu_inplace(std::span<double> values);
// d_values *= (activated > 0)
void relu_backward_inplace(std::span<const double> activated, std::span<double> d_values);

// 2x2 max pool, stride 2, floor on odd sizes. argmax stores the flat input
// index of each output's winner (first maximum in scan order).
Shape3 maxpool2_shape(Shape3 in);
void maxpool2_forward(Shape3 in_shape, std::span<const double> in, std::span<double> out,
                      std::span<int> argmax);
// Overwrites d_in.
void maxpool2_backward(std::span<const int> argmax, std::span<const double> d_out,
                       std::span<double> d_in);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> in,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> out);
void conv2d_backward_data(const ConvGeometry& g, std::span<const double> weights,
                          std::span<const double> d_out, std::span<double> d_in);
void conv2d_backward_weights(const ConvGeometry& g, std::span<const double> in,
                             std::span<const double> d_out, std::span<double> d_weights,
                             std::span<double> d_bias);

}  // namespace reference
}  // namespace idt::kernels
