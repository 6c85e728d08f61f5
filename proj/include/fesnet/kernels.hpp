#pragma once

// Forward/backward numeric kernels. Every function here is pure: outputs
// are freshly allocated and inputs are never modified (except the running
// statistics argument of batchnorm in training mode).

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fesnet/tensor.hpp"

namespace fesnet {

struct ConvSpec {
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int dilation = 1;
  int padding = 0;
  int in_channels = 1;
  int out_channels = 1;
  /// One kh x kw filter per input channel; requires out == in.
  bool depthwise = false;

  /// floor((extent + 2p - d(k-1) - 1) / s) + 1; throws if the receptive
  /// field does not fit.
  std::size_t out_extent(std::size_t extent, int kernel) const;
  std::size_t out_height(std::size_t h) const { return out_extent(h, kernel_h); }
  std::size_t out_width(std::size_t w) const { return out_extent(w, kernel_w); }
  Shape weight_shape() const;
  std::size_t weight_count() const { return shape_volume(weight_shape()); }
  void validate() const;

  static ConvSpec same(int in, int out, int kernel) {
    return ConvSpec{kernel, kernel, 1, 1, kernel / 2, in, out, false};
  }
};

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

/// Dense or depthwise 2-D convolution (cross-correlation), NCHW, zero
/// padding. Weight layout (out, in, kh, kw); depthwise uses (C, 1, kh, kw).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvSpec& spec);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                             const ConvSpec& spec, const Tensor<T>& dy);

template <typename T>
struct SeparableGrads {
  Tensor<T> dx;
  Tensor<T> dw_depth;
  Tensor<T> db_depth;
  Tensor<T> dw_point;
  Tensor<T> db_point;
};

/// Depthwise kh x kw convolution followed by a 1x1 channel-mixing
/// convolution. `depth_spec` must be depthwise; the pointwise stage maps
/// depth_spec.out_channels to w_point.dim(0) channels.
template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const Tensor<T>& w_depth,
                                   const Tensor<T>& b_depth,
                                   const Tensor<T>& w_point,
                                   const Tensor<T>& b_point,
                                   const ConvSpec& depth_spec);

template <typename T>
SeparableGrads<T> depthwise_separable_conv_backward(
    const Tensor<T>& x, const Tensor<T>& w_depth, const Tensor<T>& b_depth,
    const Tensor<T>& w_point, const ConvSpec& depth_spec, const Tensor<T>& dy);

/// Transposed convolution without padding. Weight layout (in, out, k, k);
/// output extent is (H - 1) * stride + k, i.e. H * stride when k == stride.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w,
                            const Tensor<T>& b, int stride);

template <typename T>
ConvGrads<T> transposed_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                                        int stride, const Tensor<T>& dy);

enum class Mode { Train, Inference };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

/// Values saved by the forward pass for batchnorm_backward.
template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  Mode mode = Mode::Train;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

/// Per-channel batch normalisation. In Train mode the batch statistics are
/// used and `running` is updated as running = 0.9 * running + 0.1 * batch
/// (unbiased variance). In Inference mode `running` is read only.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Mode mode,
                    BatchNormStats<T>& running,
                    BatchNormCache<T>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache,
                                     const Tensor<T>& gamma,
                                     const Tensor<T>& dy);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Gradient passes only where x > 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> inputs);

/// Inverse of concat_channels for gradients: splits dy into consecutive
/// channel ranges of the given sizes.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& dy,
                                      std::span<const std::size_t> channels);

/// Softmax over the channel axis with max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

template <typename T>
struct LossResult {
  double loss = 0.0;
  /// Gradient with respect to the logits that produced `probs`.
  Tensor<T> dlogits;
  std::size_t pixels = 0;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean negative log-likelihood of the class indices in `target`
/// (N x 1 x H x W, values 0/1/...) under `probs` (N x K x H x W). Pixels
/// where `weight_mask` is zero are ignored.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& probs, const Tensor<T>& target,
                                 const Tensor<T>* weight_mask = nullptr);

}  // namespace fesnet
