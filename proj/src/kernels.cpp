#include "fesnet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fesnet/parallel.hpp"

namespace fesnet {

namespace {

std::string dim_mismatch(const std::string& what, std::size_t got,
                         std::size_t expected) {
  return what + " is " + std::to_string(got) + ", expected " +
         std::to_string(expected);
}

void check_dims(const std::string& operand, const Shape& got,
                const Shape& expected) {
  static const char* kNames[] = {"dim 0", "dim 1", "dim 2", "dim 3"};
  if (got.size() != expected.size()) {
    throw ShapeError(operand + " has rank " + std::to_string(got.size()) +
                     ", expected " + std::to_string(expected.size()) + " " +
                     shape_string(expected));
  }
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (got[i] != expected[i]) {
      const std::string name = i < 4 ? kNames[i] : "dim " + std::to_string(i);
      throw ShapeError(dim_mismatch(operand + " " + name, got[i], expected[i]) +
                       " (shape " + shape_string(got) + " vs " +
                       shape_string(expected) + ")");
    }
  }
}

template <typename T>
void check_conv_operands(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>* b, const ConvSpec& spec) {
  spec.validate();
  require_4d(x, "conv input");
  if (x.channels() != static_cast<std::size_t>(spec.in_channels)) {
    throw ShapeError(dim_mismatch("conv input channels", x.channels(),
                                  static_cast<std::size_t>(spec.in_channels)));
  }
  check_dims("conv weight", w.shape(), spec.weight_shape());
  if (b != nullptr && b->size() != static_cast<std::size_t>(spec.out_channels)) {
    throw ShapeError(dim_mismatch("conv bias length", b->size(),
                                  static_cast<std::size_t>(spec.out_channels)));
  }
  // Throws if the kernel does not fit.
  (void)spec.out_height(x.height());
  (void)spec.out_width(x.width());
}

/// Dot product with eight fixed lanes. The lane structure fixes the
/// summation order and lets the compiler vectorise without reassociation.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

/// Geometry of one im2col panel: output pixels [p0, p0 + count) of image n.
struct Panel {
  std::size_t p0 = 0;
  std::size_t count = 0;
};

struct ConvGeometry {
  std::size_t in_h, in_w, out_h, out_w, kh, kw, stride, dilation;
  long pad;
  std::size_t k_rows;   // in_channels * kh * kw
  std::size_t pixels;   // out_h * out_w
  std::size_t panel;    // pixels per panel

  template <typename T>
  ConvGeometry(const Tensor<T>& x, const ConvSpec& spec)
      : in_h(x.height()),
        in_w(x.width()),
        out_h(spec.out_height(x.height())),
        out_w(spec.out_width(x.width())),
        kh(static_cast<std::size_t>(spec.kernel_h)),
        kw(static_cast<std::size_t>(spec.kernel_w)),
        stride(static_cast<std::size_t>(spec.stride)),
        dilation(static_cast<std::size_t>(spec.dilation)),
        pad(spec.padding),
        k_rows(static_cast<std::size_t>(spec.in_channels) * kh * kw),
        pixels(out_h * out_w) {
    // Keep a panel near 256K elements so it stays cache resident.
    const std::size_t target = std::max<std::size_t>(64, (1u << 18) / k_rows);
    panel = std::min(pixels, target);
  }
};

// Fills col (k_rows x panel.count) from one image.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, const Panel& panel, T* col) {
  parallel::parallel_for(g.k_rows, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      const std::size_t ci = r / (g.kh * g.kw);
      const std::size_t ky = (r / g.kw) % g.kh;
      const std::size_t kx = r % g.kw;
      const T* plane = image + ci * g.in_h * g.in_w;
      T* out = col + r * panel.count;
      std::size_t oy = panel.p0 / g.out_w;
      std::size_t ox = panel.p0 % g.out_w;
      for (std::size_t j = 0; j < panel.count; ++j) {
        const long iy = static_cast<long>(oy * g.stride + ky * g.dilation) - g.pad;
        const long ix = static_cast<long>(ox * g.stride + kx * g.dilation) - g.pad;
        out[j] = (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.in_h) &&
                  ix < static_cast<long>(g.in_w))
                     ? plane[static_cast<std::size_t>(iy) * g.in_w +
                             static_cast<std::size_t>(ix)]
                     : T{0};
        if (++ox == g.out_w) {
          ox = 0;
          ++oy;
        }
      }
    }
  });
}

// Scatter-adds dcol back into one image gradient.
template <typename T>
void col2im(const T* dcol, const ConvGeometry& g, const Panel& panel,
            std::size_t in_channels, T* dimage) {
  const std::size_t taps = g.kh * g.kw;
  parallel::parallel_for(in_channels, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t ci = c0; ci < c1; ++ci) {
      T* plane = dimage + ci * g.in_h * g.in_w;
      for (std::size_t t = 0; t < taps; ++t) {
        const std::size_t r = ci * taps + t;
        const std::size_t ky = t / g.kw;
        const std::size_t kx = t % g.kw;
        const T* in = dcol + r * panel.count;
        std::size_t oy = panel.p0 / g.out_w;
        std::size_t ox = panel.p0 % g.out_w;
        for (std::size_t j = 0; j < panel.count; ++j) {
          const long iy =
              static_cast<long>(oy * g.stride + ky * g.dilation) - g.pad;
          const long ix =
              static_cast<long>(ox * g.stride + kx * g.dilation) - g.pad;
          if (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.in_h) &&
              ix < static_cast<long>(g.in_w)) {
            plane[static_cast<std::size_t>(iy) * g.in_w +
                  static_cast<std::size_t>(ix)] += in[j];
          }
          if (++ox == g.out_w) {
            ox = 0;
            ++oy;
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> conv2d_dense(const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& b, const ConvSpec& spec) {
  const ConvGeometry g(x, spec);
  const std::size_t n_batch = x.batch();
  const std::size_t cout = static_cast<std::size_t>(spec.out_channels);
  const std::size_t cin = static_cast<std::size_t>(spec.in_channels);
  Tensor<T> y({n_batch, cout, g.out_h, g.out_w});
  std::vector<T> col(g.k_rows * g.panel);
  const T* wp = w.ptr();

  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* image = x.ptr() + n * cin * g.in_h * g.in_w;
    for (std::size_t p0 = 0; p0 < g.pixels; p0 += g.panel) {
      const Panel panel{p0, std::min(g.panel, g.pixels - p0)};
      im2col(image, g, panel, col.data());
      const std::size_t blocks = (cout + 3) / 4;
      parallel::parallel_for(blocks, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t blk = b0; blk < b1; ++blk) {
          const std::size_t c0 = blk * 4;
          const std::size_t cn = std::min<std::size_t>(4, cout - c0);
          T* rows[4];
          for (std::size_t i = 0; i < cn; ++i) {
            rows[i] = y.plane_ptr(n, c0 + i) + panel.p0;
            std::fill(rows[i], rows[i] + panel.count, b[c0 + i]);
          }
          if (cn == 4) {
            T* y0 = rows[0];
            T* y1 = rows[1];
            T* y2 = rows[2];
            T* y3 = rows[3];
            for (std::size_t k = 0; k < g.k_rows; ++k) {
              const T w0 = wp[(c0 + 0) * g.k_rows + k];
              const T w1 = wp[(c0 + 1) * g.k_rows + k];
              const T w2 = wp[(c0 + 2) * g.k_rows + k];
              const T w3 = wp[(c0 + 3) * g.k_rows + k];
              const T* cr = col.data() + k * panel.count;
              for (std::size_t j = 0; j < panel.count; ++j) {
                const T c = cr[j];
                y0[j] += w0 * c;
                y1[j] += w1 * c;
                y2[j] += w2 * c;
                y3[j] += w3 * c;
              }
            }
          } else {
            for (std::size_t i = 0; i < cn; ++i) {
              T* yr = rows[i];
              for (std::size_t k = 0; k < g.k_rows; ++k) {
                const T wv = wp[(c0 + i) * g.k_rows + k];
                const T* cr = col.data() + k * panel.count;
                for (std::size_t j = 0; j < panel.count; ++j) yr[j] += wv * cr[j];
              }
            }
          }
        }
      });
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_dense_backward(const Tensor<T>& x, const Tensor<T>& w,
                                   const ConvSpec& spec, const Tensor<T>& dy) {
  const ConvGeometry g(x, spec);
  const std::size_t n_batch = x.batch();
  const std::size_t cout = static_cast<std::size_t>(spec.out_channels);
  const std::size_t cin = static_cast<std::size_t>(spec.in_channels);
  check_dims("conv output gradient", dy.shape(),
             {n_batch, cout, g.out_h, g.out_w});

  ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(w.shape()),
                     Tensor<T>({cout})};
  for (std::size_t co = 0; co < cout; ++co) {
    T acc = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const T* row = dy.plane_ptr(n, co);
      for (std::size_t p = 0; p < g.pixels; ++p) acc += row[p];
    }
    grads.db[co] = acc;
  }

  std::vector<T> col(g.k_rows * g.panel);
  std::vector<T> dcol(g.k_rows * g.panel);
  const T* wp = w.ptr();
  T* dwp = grads.dw.ptr();

  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* image = x.ptr() + n * cin * g.in_h * g.in_w;
    T* dimage = grads.dx.ptr() + n * cin * g.in_h * g.in_w;
    for (std::size_t p0 = 0; p0 < g.pixels; p0 += g.panel) {
      const Panel panel{p0, std::min(g.panel, g.pixels - p0)};
      im2col(image, g, panel, col.data());

      // dw[co][k] += <dy[co], col[k]>
      parallel::parallel_for(cout, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t co = c0; co < c1; ++co) {
          const T* dyr = dy.plane_ptr(n, co) + panel.p0;
          T* dwr = dwp + co * g.k_rows;
          for (std::size_t k = 0; k < g.k_rows; ++k) {
            dwr[k] += dot(dyr, col.data() + k * panel.count, panel.count);
          }
        }
      });

      // dcol[k] = sum_co w[co][k] * dy[co]
      parallel::parallel_for(g.k_rows, [&](std::size_t k0, std::size_t k1) {
        for (std::size_t k = k0; k < k1; ++k) {
          T* out = dcol.data() + k * panel.count;
          std::fill(out, out + panel.count, T{0});
          for (std::size_t co = 0; co < cout; ++co) {
            const T wv = wp[co * g.k_rows + k];
            const T* dyr = dy.plane_ptr(n, co) + panel.p0;
            for (std::size_t j = 0; j < panel.count; ++j) out[j] += wv * dyr[j];
          }
        }
      });
      col2im(dcol.data(), g, panel, cin, dimage);
    }
  }
  return grads;
}

template <typename T>
Tensor<T> conv2d_depthwise(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, const ConvSpec& spec) {
  const ConvGeometry g(x, spec);
  const std::size_t channels = x.channels();
  Tensor<T> y({x.batch(), channels, g.out_h, g.out_w});
  parallel::parallel_for(channels, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      const T* wc = w.ptr() + c * g.kh * g.kw;
      for (std::size_t n = 0; n < x.batch(); ++n) {
        const T* in = x.plane_ptr(n, c);
        T* out = y.plane_ptr(n, c);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            T acc = b[c];
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const long iy =
                  static_cast<long>(oy * g.stride + ky * g.dilation) - g.pad;
              if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const long ix =
                    static_cast<long>(ox * g.stride + kx * g.dilation) - g.pad;
                if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
                acc += wc[ky * g.kw + kx] *
                       in[static_cast<std::size_t>(iy) * g.in_w +
                          static_cast<std::size_t>(ix)];
              }
            }
            out[oy * g.out_w + ox] = acc;
          }
        }
      }
    }
  });
  return y;
}

template <typename T>
ConvGrads<T> conv2d_depthwise_backward(const Tensor<T>& x, const Tensor<T>& w,
                                       const ConvSpec& spec,
                                       const Tensor<T>& dy) {
  const ConvGeometry g(x, spec);
  const std::size_t channels = x.channels();
  check_dims("conv output gradient", dy.shape(),
             {x.batch(), channels, g.out_h, g.out_w});
  ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(w.shape()),
                     Tensor<T>({channels})};
  parallel::parallel_for(channels, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      const T* wc = w.ptr() + c * g.kh * g.kw;
      T* dwc = grads.dw.ptr() + c * g.kh * g.kw;
      T db = 0;
      for (std::size_t n = 0; n < x.batch(); ++n) {
        const T* in = x.plane_ptr(n, c);
        const T* dout = dy.plane_ptr(n, c);
        T* din = grads.dx.plane_ptr(n, c);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const T d = dout[oy * g.out_w + ox];
            db += d;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const long iy =
                  static_cast<long>(oy * g.stride + ky * g.dilation) - g.pad;
              if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const long ix =
                    static_cast<long>(ox * g.stride + kx * g.dilation) - g.pad;
                if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
                const std::size_t idx = static_cast<std::size_t>(iy) * g.in_w +
                                        static_cast<std::size_t>(ix);
                dwc[ky * g.kw + kx] += d * in[idx];
                din[idx] += d * wc[ky * g.kw + kx];
              }
            }
          }
        }
      }
      grads.db[c] = db;
    }
  });
  return grads;
}

}  // namespace

std::size_t ConvSpec::out_extent(std::size_t extent, int kernel) const {
  const long span = static_cast<long>(dilation) * (kernel - 1) + 1;
  const long padded = static_cast<long>(extent) + 2L * padding;
  if (padded < span) {
    throw ShapeError("input extent " + std::to_string(extent) +
                     " is smaller than the dilated kernel span " +
                     std::to_string(span) + " (padding " +
                     std::to_string(padding) + ")");
  }
  return static_cast<std::size_t>((padded - span) / stride + 1);
}

Shape ConvSpec::weight_shape() const {
  const auto kh = static_cast<std::size_t>(kernel_h);
  const auto kw = static_cast<std::size_t>(kernel_w);
  if (depthwise) return {static_cast<std::size_t>(in_channels), 1, kh, kw};
  return {static_cast<std::size_t>(out_channels),
          static_cast<std::size_t>(in_channels), kh, kw};
}

void ConvSpec::validate() const {
  if (kernel_h < 1 || kernel_w < 1) throw ShapeError("kernel extent must be >= 1");
  if (stride < 1) throw ShapeError("stride must be >= 1");
  if (dilation < 1) throw ShapeError("dilation must be >= 1");
  if (padding < 0) throw ShapeError("padding must be >= 0");
  if (in_channels < 1 || out_channels < 1) {
    throw ShapeError("channel counts must be >= 1");
  }
  if (depthwise && in_channels != out_channels) {
    throw ShapeError(dim_mismatch("depthwise out_channels",
                                  static_cast<std::size_t>(out_channels),
                                  static_cast<std::size_t>(in_channels)));
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvSpec& spec) {
  check_conv_operands(x, w, &b, spec);
  return spec.depthwise ? conv2d_depthwise(x, w, b, spec)
                        : conv2d_dense(x, w, b, spec);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                             const ConvSpec& spec, const Tensor<T>& dy) {
  check_conv_operands<T>(x, w, nullptr, spec);
  return spec.depthwise ? conv2d_depthwise_backward(x, w, spec, dy)
                        : conv2d_dense_backward(x, w, spec, dy);
}

namespace {

ConvSpec pointwise_spec(const ConvSpec& depth_spec, std::size_t out_channels) {
  ConvSpec spec;
  spec.kernel_h = spec.kernel_w = 1;
  spec.in_channels = depth_spec.out_channels;
  spec.out_channels = static_cast<int>(out_channels);
  return spec;
}

template <typename T>
void check_separable(const Tensor<T>& w_depth, const Tensor<T>& w_point,
                     const ConvSpec& depth_spec) {
  if (!depth_spec.depthwise) {
    throw ShapeError("separable conv requires a depthwise first stage spec");
  }
  require_4d(w_point, "pointwise weight");
  (void)w_depth;
  if (w_point.dim(1) != static_cast<std::size_t>(depth_spec.out_channels)) {
    throw ShapeError(dim_mismatch("pointwise weight in_channels", w_point.dim(1),
                                  static_cast<std::size_t>(depth_spec.out_channels)));
  }
}

}  // namespace

template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const Tensor<T>& w_depth,
                                   const Tensor<T>& b_depth,
                                   const Tensor<T>& w_point,
                                   const Tensor<T>& b_point,
                                   const ConvSpec& depth_spec) {
  check_separable(w_depth, w_point, depth_spec);
  const Tensor<T> mid = conv2d(x, w_depth, b_depth, depth_spec);
  return conv2d(mid, w_point, b_point, pointwise_spec(depth_spec, w_point.dim(0)));
}

template <typename T>
SeparableGrads<T> depthwise_separable_conv_backward(
    const Tensor<T>& x, const Tensor<T>& w_depth, const Tensor<T>& b_depth,
    const Tensor<T>& w_point, const ConvSpec& depth_spec, const Tensor<T>& dy) {
  check_separable(w_depth, w_point, depth_spec);
  const ConvSpec point = pointwise_spec(depth_spec, w_point.dim(0));
  const Tensor<T> mid = conv2d(x, w_depth, b_depth, depth_spec);
  ConvGrads<T> gp = conv2d_backward(mid, w_point, point, dy);
  ConvGrads<T> gd = conv2d_backward(x, w_depth, depth_spec, gp.dx);
  return {std::move(gd.dx), std::move(gd.dw), std::move(gd.db), std::move(gp.dw),
          std::move(gp.db)};
}

namespace {

template <typename T>
void check_transposed(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                      int stride) {
  if (stride < 1) {
    throw ShapeError("transposed conv stride must be >= 1, got " +
                     std::to_string(stride));
  }
  require_4d(x, "transposed conv input");
  require_4d(w, "transposed conv weight");
  if (w.dim(0) != x.channels()) {
    throw ShapeError(dim_mismatch("transposed conv weight in_channels", w.dim(0),
                                  x.channels()));
  }
  if (b != nullptr && b->size() != w.dim(1)) {
    throw ShapeError(dim_mismatch("transposed conv bias length", b->size(),
                                  w.dim(1)));
  }
}

}  // namespace

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& b, int stride) {
  check_transposed(x, w, &b, stride);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t cin = x.channels(), cout = w.dim(1), kh = w.dim(2),
                    kw = w.dim(3);
  const std::size_t h = x.height(), wd = x.width();
  const std::size_t oh = (h - 1) * s + kh, ow = (wd - 1) * s + kw;
  Tensor<T> y({x.batch(), cout, oh, ow});
  parallel::parallel_for(cout, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t co = c0; co < c1; ++co) {
      for (std::size_t n = 0; n < x.batch(); ++n) {
        T* out = y.plane_ptr(n, co);
        std::fill(out, out + oh * ow, b[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T* in = x.plane_ptr(n, ci);
          const T* k = w.ptr() + (ci * cout + co) * kh * kw;
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < wd; ++j) {
              const T v = in[i * wd + j];
              for (std::size_t a = 0; a < kh; ++a) {
                T* orow = out + (i * s + a) * ow + j * s;
                for (std::size_t c = 0; c < kw; ++c) orow[c] += v * k[a * kw + c];
              }
            }
          }
        }
      }
    }
  });
  return y;
}

template <typename T>
ConvGrads<T> transposed_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                                        int stride, const Tensor<T>& dy) {
  check_transposed<T>(x, w, nullptr, stride);
  const std::size_t s = static_cast<std::size_t>(stride);
  const std::size_t cin = x.channels(), cout = w.dim(1), kh = w.dim(2),
                    kw = w.dim(3);
  const std::size_t h = x.height(), wd = x.width();
  const std::size_t oh = (h - 1) * s + kh, ow = (wd - 1) * s + kw;
  check_dims("transposed conv output gradient", dy.shape(),
             {x.batch(), cout, oh, ow});
  ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(w.shape()),
                     Tensor<T>({cout})};
  for (std::size_t co = 0; co < cout; ++co) {
    T acc = 0;
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const T* d = dy.plane_ptr(n, co);
      for (std::size_t p = 0; p < oh * ow; ++p) acc += d[p];
    }
    grads.db[co] = acc;
  }
  parallel::parallel_for(cin, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t ci = c0; ci < c1; ++ci) {
      for (std::size_t n = 0; n < x.batch(); ++n) {
        const T* in = x.plane_ptr(n, ci);
        T* din = grads.dx.plane_ptr(n, ci);
        for (std::size_t co = 0; co < cout; ++co) {
          const T* d = dy.plane_ptr(n, co);
          const T* k = w.ptr() + (ci * cout + co) * kh * kw;
          T* dk = grads.dw.ptr() + (ci * cout + co) * kh * kw;
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < wd; ++j) {
              const T v = in[i * wd + j];
              T acc = 0;
              for (std::size_t a = 0; a < kh; ++a) {
                const T* drow = d + (i * s + a) * ow + j * s;
                for (std::size_t c = 0; c < kw; ++c) {
                  acc += drow[c] * k[a * kw + c];
                  dk[a * kw + c] += v * drow[c];
                }
              }
              din[i * wd + j] += acc;
            }
          }
        }
      }
    }
  });
  return grads;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Mode mode,
                    BatchNormStats<T>& running, BatchNormCache<T>* cache) {
  require_4d(x, "batchnorm input");
  const std::size_t channels = x.channels();
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{
           &gamma, &beta, &running.mean, &running.var}) {
    if (t->size() != channels) {
      throw ShapeError(dim_mismatch("batchnorm per-channel parameter length",
                                    t->size(), channels));
    }
  }
  const std::size_t plane = x.plane();
  const std::size_t count = x.batch() * plane;
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(channels);

  parallel::parallel_for(channels, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      double mean, var;
      if (mode == Mode::Train) {
        double sum = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n) {
          const T* in = x.plane_ptr(n, c);
          for (std::size_t p = 0; p < plane; ++p) sum += in[p];
        }
        mean = sum / static_cast<double>(count);
        double sq = 0.0;
        for (std::size_t n = 0; n < x.batch(); ++n) {
          const T* in = x.plane_ptr(n, c);
          for (std::size_t p = 0; p < plane; ++p) {
            const double d = in[p] - mean;
            sq += d * d;
          }
        }
        var = sq / static_cast<double>(count);
        const double unbiased =
            count > 1 ? var * static_cast<double>(count) / (count - 1) : var;
        running.mean[c] = static_cast<T>(kBatchNormMomentum * running.mean[c] +
                                         (1.0 - kBatchNormMomentum) * mean);
        running.var[c] = static_cast<T>(kBatchNormMomentum * running.var[c] +
                                        (1.0 - kBatchNormMomentum) * unbiased);
      } else {
        mean = running.mean[c];
        var = running.var[c];
      }
      const double istd = 1.0 / std::sqrt(var + kBatchNormEpsilon);
      inv_std[c] = static_cast<T>(istd);
      const T m = static_cast<T>(mean);
      const T is = static_cast<T>(istd);
      for (std::size_t n = 0; n < x.batch(); ++n) {
        const T* in = x.plane_ptr(n, c);
        T* xh = xhat.plane_ptr(n, c);
        T* out = y.plane_ptr(n, c);
        for (std::size_t p = 0; p < plane; ++p) {
          xh[p] = (in[p] - m) * is;
          out[p] = gamma[c] * xh[p] + beta[c];
        }
      }
    }
  });
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache,
                                     const Tensor<T>& gamma,
                                     const Tensor<T>& dy) {
  const Tensor<T>& xhat = cache.xhat;
  check_dims("batchnorm output gradient", dy.shape(), xhat.shape());
  const std::size_t channels = xhat.channels();
  const std::size_t plane = xhat.plane();
  const double count = static_cast<double>(xhat.batch() * plane);
  BatchNormGrads<T> grads{Tensor<T>(xhat.shape()), Tensor<T>({channels}),
                          Tensor<T>({channels})};
  parallel::parallel_for(channels, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < xhat.batch(); ++n) {
        const T* d = dy.plane_ptr(n, c);
        const T* xh = xhat.plane_ptr(n, c);
        for (std::size_t p = 0; p < plane; ++p) {
          sum_dy += d[p];
          sum_dy_xhat += static_cast<double>(d[p]) * xh[p];
        }
      }
      grads.dgamma[c] = static_cast<T>(sum_dy_xhat);
      grads.dbeta[c] = static_cast<T>(sum_dy);
      const T g = gamma[c];
      const T is = cache.inv_std[c];
      if (cache.mode == Mode::Inference) {
        for (std::size_t n = 0; n < xhat.batch(); ++n) {
          const T* d = dy.plane_ptr(n, c);
          T* dx = grads.dx.plane_ptr(n, c);
          for (std::size_t p = 0; p < plane; ++p) dx[p] = d[p] * g * is;
        }
        continue;
      }
      // dx = g * istd * (dy - mean(dy) - xhat * mean(dy * xhat))
      const T mean_dy = static_cast<T>(sum_dy / count);
      const T mean_dyx = static_cast<T>(sum_dy_xhat / count);
      const T scale = g * is;
      for (std::size_t n = 0; n < xhat.batch(); ++n) {
        const T* d = dy.plane_ptr(n, c);
        const T* xh = xhat.plane_ptr(n, c);
        T* dx = grads.dx.plane_ptr(n, c);
        for (std::size_t p = 0; p < plane; ++p) {
          dx[p] = scale * (d[p] - mean_dy - xh[p] * mean_dyx);
        }
      }
    }
  });
  return grads;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  check_dims("relu output gradient", dy.shape(), x.shape());
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels needs at least one input");
  const Tensor<T>& first = *inputs.front();
  require_4d(first, "concat input 0");
  std::size_t total = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor<T>& t = *inputs[i];
    require_4d(t, "concat input");
    if (t.batch() != first.batch() || t.height() != first.height() ||
        t.width() != first.width()) {
      throw ShapeError("concat input " + std::to_string(i) + " shape " +
                       shape_string(t.shape()) +
                       " disagrees with input 0 shape " +
                       shape_string(first.shape()) +
                       " outside the channel axis");
    }
    total += t.channels();
  }
  const std::size_t plane = first.plane();
  Tensor<T> y({first.batch(), total, first.height(), first.width()});
  for (std::size_t n = 0; n < first.batch(); ++n) {
    std::size_t offset = 0;
    for (const Tensor<T>* t : inputs) {
      const T* src = t->plane_ptr(n, 0);
      std::copy(src, src + t->channels() * plane, y.plane_ptr(n, offset));
      offset += t->channels();
    }
  }
  return y;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& dy,
                                      std::span<const std::size_t> channels) {
  require_4d(dy, "split input");
  std::size_t total = 0;
  for (auto c : channels) total += c;
  if (total != dy.channels()) {
    throw ShapeError(dim_mismatch("split channel total", total, dy.channels()));
  }
  const std::size_t plane = dy.plane();
  std::vector<Tensor<T>> out;
  out.reserve(channels.size());
  std::size_t offset = 0;
  for (auto c : channels) {
    Tensor<T> part({dy.batch(), c, dy.height(), dy.width()});
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      const T* src = dy.plane_ptr(n, offset);
      std::copy(src, src + c * plane, part.plane_ptr(n, 0));
    }
    out.push_back(std::move(part));
    offset += c;
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  require_4d(logits, "softmax input");
  const std::size_t k = logits.channels();
  const std::size_t plane = logits.plane();
  Tensor<T> probs(logits.shape());
  for (std::size_t n = 0; n < logits.batch(); ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      T peak = logits.plane_ptr(n, 0)[p];
      for (std::size_t c = 1; c < k; ++c) {
        peak = std::max(peak, logits.plane_ptr(n, c)[p]);
      }
      T sum = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const T e = std::exp(logits.plane_ptr(n, c)[p] - peak);
        probs.plane_ptr(n, c)[p] = e;
        sum += e;
      }
      for (std::size_t c = 0; c < k; ++c) probs.plane_ptr(n, c)[p] /= sum;
    }
  }
  return probs;
}

template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& probs, const Tensor<T>& target,
                                 const Tensor<T>* weight_mask) {
  require_4d(probs, "loss probabilities");
  const Shape label_shape{probs.batch(), 1, probs.height(), probs.width()};
  check_dims("loss target", target.shape(), label_shape);
  if (weight_mask != nullptr) check_dims("loss mask", weight_mask->shape(), label_shape);

  const std::size_t k = probs.channels();
  const std::size_t plane = probs.plane();
  std::size_t counted = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (weight_mask == nullptr || (*weight_mask)[i] != T{0}) ++counted;
  }
  LossResult<T> result{0.0, Tensor<T>(probs.shape()), counted};
  if (counted == 0) return result;

  const double inv = 1.0 / static_cast<double>(counted);
  double total = 0.0;
  for (std::size_t n = 0; n < probs.batch(); ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t li = n * plane + p;
      if (weight_mask != nullptr && (*weight_mask)[li] == T{0}) continue;
      const auto cls = static_cast<std::size_t>(target[li]);
      if (cls >= k) {
        throw ShapeError("loss target class " + std::to_string(cls) +
                         " out of range for " + std::to_string(k) + " classes");
      }
      const double pt = std::max<double>(probs.plane_ptr(n, cls)[p], kProbabilityFloor);
      total -= std::log(pt);
      for (std::size_t c = 0; c < k; ++c) {
        const double onehot = c == cls ? 1.0 : 0.0;
        result.dlogits.plane_ptr(n, c)[p] =
            static_cast<T>((probs.plane_ptr(n, c)[p] - onehot) * inv);
      }
    }
  }
  result.loss = total * inv;
  return result;
}

#define FESNET_INSTANTIATE(T)                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,                 \
                            const Tensor<T>&, const ConvSpec&);                 \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&,     \
                                        const ConvSpec&, const Tensor<T>&);     \
  template Tensor<T> depthwise_separable_conv(                                  \
      const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
      const Tensor<T>&, const ConvSpec&);                                       \
  template SeparableGrads<T> depthwise_separable_conv_backward(                 \
      const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
      const ConvSpec&, const Tensor<T>&);                                       \
  template Tensor<T> transposed_conv2d(const Tensor<T>&, const Tensor<T>&,      \
                                       const Tensor<T>&, int);                  \
  template ConvGrads<T> transposed_conv2d_backward(                             \
      const Tensor<T>&, const Tensor<T>&, int, const Tensor<T>&);               \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&,              \
                               const Tensor<T>&, Mode, BatchNormStats<T>&,      \
                               BatchNormCache<T>*);                             \
  template BatchNormGrads<T> batchnorm_backward(                                \
      const BatchNormCache<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> relu(const Tensor<T>&);                                    \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> concat_channels(std::span<const Tensor<T>* const>);        \
  template std::vector<Tensor<T>> split_channels(const Tensor<T>&,              \
                                                 std::span<const std::size_t>); \
  template Tensor<T> softmax_channels(const Tensor<T>&);                        \
  template LossResult<T> cross_entropy_loss(const Tensor<T>&, const Tensor<T>&, \
                                            const Tensor<T>*);

FESNET_INSTANTIATE(float)
FESNET_INSTANTIATE(double)

#undef FESNET_INSTANTIATE

}  // namespace fesnet
