#pragma once

// Brute-force reference implementations used as test oracles. Written for
// clarity, not speed: plain nested loops over the definition.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "fesnet/kernels.hpp"
#include "fesnet/rng.hpp"
#include "fesnet/tensor.hpp"

namespace fesnet::oracle {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

/// y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] x[n,c,i*s+u*d-p, j*s+v*d-p]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvSpec& s) {
  const long N = static_cast<long>(x.batch()), C = static_cast<long>(x.channels());
  const long H = static_cast<long>(x.height()), W = static_cast<long>(x.width());
  const long O = s.out_channels;
  const long OH = (H + 2 * s.padding - s.dilation * (s.kernel_h - 1) - 1) / s.stride + 1;
  const long OW = (W + 2 * s.padding - s.dilation * (s.kernel_w - 1) - 1) / s.stride + 1;
  Tensor<T> y({static_cast<std::size_t>(N), static_cast<std::size_t>(O),
               static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  for (long n = 0; n < N; ++n) {
    for (long o = 0; o < O; ++o) {
      for (long i = 0; i < OH; ++i) {
        for (long j = 0; j < OW; ++j) {
          double acc = static_cast<double>(b[static_cast<std::size_t>(o)]);
          const long c0 = s.depthwise ? o : 0, c1 = s.depthwise ? o + 1 : C;
          for (long c = c0; c < c1; ++c) {
            for (long u = 0; u < s.kernel_h; ++u) {
              for (long v = 0; v < s.kernel_w; ++v) {
                const long yy = i * s.stride + u * s.dilation - s.padding;
                const long xx = j * s.stride + v * s.dilation - s.padding;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                const long wc = s.depthwise ? 0 : c;
                acc += static_cast<double>(
                           w[static_cast<std::size_t>(((o * (s.depthwise ? 1 : C) + wc) *
                                                           s.kernel_h + u) * s.kernel_w + v)]) *
                       static_cast<double>(x.at(static_cast<std::size_t>(n),
                                                static_cast<std::size_t>(c),
                                                static_cast<std::size_t>(yy),
                                                static_cast<std::size_t>(xx)));
              }
            }
          }
          y.at(static_cast<std::size_t>(n), static_cast<std::size_t>(o),
               static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = static_cast<T>(acc);
        }
      }
    }
  }
  return y;
}

/// Scatter form: every input pixel adds x * w[c,o,:,:] at (i*s, j*s).
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                            int stride) {
  const std::size_t N = x.batch(), C = x.channels(), H = x.height(), W = x.width();
  const std::size_t O = w.dim(1), K = w.dim(2);
  const std::size_t OH = (H - 1) * stride + K, OW = (W - 1) * stride + K;
  Tensor<double> acc({N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t i = 0; i < OH; ++i) {
        for (std::size_t j = 0; j < OW; ++j) acc.at(n, o, i, j) = b[o];
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t u = 0; u < K; ++u) {
              for (std::size_t v = 0; v < K; ++v) {
                acc.at(n, o, i * stride + u, j * stride + v) +=
                    static_cast<double>(x.at(n, c, i, j)) *
                    static_cast<double>(w[((c * O + o) * K + u) * K + v]);
              }
            }
          }
        }
      }
    }
  }
  return acc.template cast<T>();
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() /
                 ("fesnet_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fesnet::oracle
