#include "idt/kernels.hpp"

#include <algorithm>

#include "idt/error.hpp"

namespace idt::kernels {

ConvGeometry ConvGeometry::make(Shape3 in, int out_channels, int kernel, int stride, int pad) {
  ConvGeometry g;
  g.in = in;
  g.kernel = kernel;
  g.stride = stride;
  g.pad = pad;
  g.out.height = (in.height + 2 * pad - kernel) / stride + 1;
  g.out.width = (in.width + 2 * pad - kernel) / stride + 1;
  g.out.channels = out_channels;
  if (g.out.height <= 0 || g.out.width <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "convolution collapses its input");
  }
  return g;
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> in,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> out) {
  const int ih = g.in.height, iw = g.in.width, ic_n = g.in.channels;
  const int oh = g.out.height, ow = g.out.width, oc_n = g.out.channels;
  const int k = g.kernel, s = g.stride, p = g.pad;
  const double* x = in.data();
  const double* w = weights.data();
  const double* b = bias.data();
  double* y = out.data();

#pragma omp parallel for schedule(static)
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* acc = y + (static_cast<std::size_t>(oy) * ow + ox) * oc_n;
      std::copy(b, b + oc_n, acc);
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s - p + ky;
        if (iy < 0 || iy >= ih) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s - p + kx;
          if (ix < 0 || ix >= iw) continue;
          const double* xp = x + (static_cast<std::size_t>(iy) * iw + ix) * ic_n;
          const double* wp = w + static_cast<std::size_t>(ky * k + kx) * ic_n * oc_n;
          for (int ic = 0; ic < ic_n; ++ic) {
            const double xv = xp[ic];
            const double* wr = wp + static_cast<std::size_t>(ic) * oc_n;
#pragma omp simd
            for (int oc = 0; oc < oc_n; ++oc) acc[oc] += xv * wr[oc];
          }
        }
      }
    }
  }
}

void conv2d_backward_data(const ConvGeometry& g, std::span<const double> weights,
                          std::span<const double> d_out, std::span<double> d_in) {
  const int ih = g.in.height, iw = g.in.width, ic_n = g.in.channels;
  const int oh = g.out.height, ow = g.out.width, oc_n = g.out.channels;
  const int k = g.kernel, s = g.stride, p = g.pad;
  const double* w = weights.data();
  const double* dy = d_out.data();
  double* dx = d_in.data();

  // Gather form: each input pixel sums over the outputs that read it.
#pragma omp parallel for schedule(static)
  for (int iy = 0; iy < ih; ++iy) {
    for (int ix = 0; ix < iw; ++ix) {
      double* dxp = dx + (static_cast<std::size_t>(iy) * iw + ix) * ic_n;
      std::fill(dxp, dxp + ic_n, 0.0);
      for (int ky = 0; ky < k; ++ky) {
        const int ny = iy + p - ky;
        if (ny < 0 || ny % s != 0) continue;
        const int oy = ny / s;
        if (oy >= oh) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int nx = ix + p - kx;
          if (nx < 0 || nx % s != 0) continue;
          const int ox = nx / s;
          if (ox >= ow) continue;
          const double* dyp = dy + (static_cast<std::size_t>(oy) * ow + ox) * oc_n;
          const double* wp = w + static_cast<std::size_t>(ky * k + kx) * ic_n * oc_n;
          for (int ic = 0; ic < ic_n; ++ic) {
            const double* wr = wp + static_cast<std::size_t>(ic) * oc_n;
            double sum = 0.0;
#pragma omp simd reduction(+ : sum)
            for (int oc = 0; oc < oc_n; ++oc) sum += wr[oc] * dyp[oc];
            dxp[ic] += sum;
          }
        }
      }
    }
  }
}

void conv2d_backward_weights(const ConvGeometry& g, std::span<const double> in,
                             std::span<const double> d_out, std::span<double> d_weights,
                             std::span<double> d_bias) {
  const int ih = g.in.height, iw = g.in.width, ic_n = g.in.channels;
  const int oh = g.out.height, ow = g.out.width, oc_n = g.out.channels;
  const int k = g.kernel, s = g.stride, p = g.pad;
  const double* x = in.data();
  const double* dy = d_out.data();
  double* dw = d_weights.data();

  // One (ky, kx) slab of the weight gradient per task.
#pragma omp parallel for schedule(static)
  for (int kk = 0; kk < k * k; ++kk) {
    const int ky = kk / k, kx = kk % k;
    double* slab = dw + static_cast<std::size_t>(kk) * ic_n * oc_n;
    for (int oy = 0; oy < oh; ++oy) {
      const int iy = oy * s - p + ky;
      if (iy < 0 || iy >= ih) continue;
      for (int ox = 0; ox < ow; ++ox) {
        const int ix = ox * s - p + kx;
        if (ix < 0 || ix >= iw) continue;
        const double* xp = x + (static_cast<std::size_t>(iy) * iw + ix) * ic_n;
        const double* dyp = dy + (static_cast<std::size_t>(oy) * ow + ox) * oc_n;
        for (int ic = 0; ic < ic_n; ++ic) {
          const double xv = xp[ic];
          double* wr = slab + static_cast<std::size_t>(ic) * oc_n;
#pragma omp simd
          for (int oc = 0; oc < oc_n; ++oc) wr[oc] += xv * dyp[oc];
        }
      }
    }
  }
  for (int pos = 0; pos < oh * ow; ++pos) {
    const double* dyp = dy + static_cast<std::size_t>(pos) * oc_n;
    for (int oc = 0; oc < oc_n; ++oc) d_bias[oc] += dyp[oc];
  }
}

void relu_inplace(std::span<double> values) {
  for (double& v : values) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(std::span<const double> activated, std::span<double> d_values) {
  for (std::size_t i = 0; i < d_values.size(); ++i)
    if (!(activated[i] > 0.0)) d_values[i] = 0.0;
}

Shape3 maxpool2_shape(Shape3 in) { return {in.height / 2, in.width / 2, in.channels}; }

void maxpool2_forward(Shape3 in_shape, std::span<const double> in, std::span<double> out,
                      std::span<int> argmax) {
  const Shape3 os = maxpool2_shape(in_shape);
  const int c_n = in_shape.channels;
  for (int oy = 0; oy < os.height; ++oy) {
    for (int ox = 0; ox < os.width; ++ox) {
      for (int c = 0; c < c_n; ++c) {
        int best = ((2 * oy) * in_shape.width + 2 * ox) * c_n + c;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = ((2 * oy + dy) * in_shape.width + 2 * ox + dx) * c_n + c;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const int o = (oy * os.width + ox) * c_n + c;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
}

void maxpool2_backward(std::span<const int> argmax, std::span<const double> d_out,
                       std::span<double> d_in) {
  std::fill(d_in.begin(), d_in.end(), 0.0);
  for (std::size_t o = 0; o < d_out.size(); ++o) d_in[argmax[o]] += d_out[o];
}

namespace reference {

namespace {

std::size_t w_index(const ConvGeometry& g, int ky, int kx, int ic, int oc) {
  return ((static_cast<std::size_t>(ky) * g.kernel + kx) * g.in.channels + ic) * g.out.channels + oc;
}
std::size_t in_index(const ConvGeometry& g, int y, int x, int c) {
  return (static_cast<std::size_t>(y) * g.in.width + x) * g.in.channels + c;
}
std::size_t out_index(const ConvGeometry& g, int y, int x, int c) {
  return (static_cast<std::size_t>(y) * g.out.width + x) * g.out.channels + c;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> in,
                    std::span<const double> weights, std::span<const double> bias,
                    std::span<double> out) {
  for (int oc = 0; oc < g.out.channels; ++oc) {
    for (int oy = 0; oy < g.out.height; ++oy) {
      for (int ox = 0; ox < g.out.width; ++ox) {
        double sum = bias[oc];
        for (int ky = 0; ky < g.kernel; ++ky) {
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = oy * g.stride - g.pad + ky;
            const int ix = ox * g.stride - g.pad + kx;
            if (iy < 0 || iy >= g.in.height || ix < 0 || ix >= g.in.width) continue;
            for (int ic = 0; ic < g.in.channels; ++ic) {
              sum += in[in_index(g, iy, ix, ic)] * weights[w_index(g, ky, kx, ic, oc)];
            }
          }
        }
        out[out_index(g, oy, ox, oc)] = sum;
      }
    }
  }
}

void conv2d_backward_data(const ConvGeometry& g, std::span<const double> weights,
                          std::span<const double> d_out, std::span<double> d_in) {
  std::fill(d_in.begin(), d_in.end(), 0.0);
  for (int oy = 0; oy < g.out.height; ++oy) {
    for (int ox = 0; ox < g.out.width; ++ox) {
      for (int oc = 0; oc < g.out.channels; ++oc) {
        const double d = d_out[out_index(g, oy, ox, oc)];
        for (int ky = 0; ky < g.kernel; ++ky) {
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = oy * g.stride - g.pad + ky;
            const int ix = ox * g.stride - g.pad + kx;
            if (iy < 0 || iy >= g.in.height || ix < 0 || ix >= g.in.width) continue;
            for (int ic = 0; ic < g.in.channels; ++ic) {
              d_in[in_index(g, iy, ix, ic)] += d * weights[w_index(g, ky, kx, ic, oc)];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weights(const ConvGeometry& g, std::span<const double> in,
                             std::span<const double> d_out, std::span<double> d_weights,
                             std::span<double> d_bias) {
  for (int oy = 0; oy < g.out.height; ++oy) {
    for (int ox = 0; ox < g.out.width; ++ox) {
      for (int oc = 0; oc < g.out.channels; ++oc) {
        const double d = d_out[out_index(g, oy, ox, oc)];
        d_bias[oc] += d;
        for (int ky = 0; ky < g.kernel; ++ky) {
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = oy * g.stride - g.pad + ky;
            const int ix = ox * g.stride - g.pad + kx;
            if (iy < 0 || iy >= g.in.height || ix < 0 || ix >= g.in.width) continue;
            for (int ic = 0; ic < g.in.channels; ++ic) {
              d_weights[w_index(g, ky, kx, ic, oc)] += d * in[in_index(g, iy, ix, ic)];
            }
          }
        }
      }
    }
  }
}

}  // namespace reference
}  // namespace idt::kernels
