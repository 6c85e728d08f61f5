#pragma once

// Stateful layers: each owns its parameters and gradient buffers and caches
// what its backward pass needs. A layer must be run forward before backward;
// gradients accumulate until zero_grad().

#include <cstdint>
#include <string>
#include <vector>

#include "fesnet/kernels.hpp"
#include "fesnet/rng.hpp"
#include "fesnet/tensor.hpp"

namespace fesnet {

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;  // null for non-trainable buffers
  /// Gradient is identically zero by construction (a bias feeding a
  /// train-mode batchnorm, whose mean subtraction cancels it).
  bool structural_zero = false;
};

template <typename T>
struct ParamSet {
  std::vector<ParamRef<T>> trainable;
  std::vector<ParamRef<T>> buffers;

  /// Trainable tensors followed by buffers, in registration order.
  std::vector<ParamRef<T>> all() const {
    std::vector<ParamRef<T>> out = trainable;
    out.insert(out.end(), buffers.begin(), buffers.end());
    return out;
  }
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  explicit Conv2d(const ConvSpec& spec);

  /// He normal weights (std sqrt(2 / fan_in)), zero bias.
  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamSet<T>& set, const std::string& prefix);
  void zero_grad();

  ConvSpec spec;
  Tensor<T> weight, bias, weight_grad, bias_grad;

 private:
  Tensor<T> input_;
};

/// Depthwise kxk conv followed by a 1x1 pointwise conv, each with a bias.
template <typename T>
class SeparableConv2d {
 public:
  SeparableConv2d() = default;
  SeparableConv2d(int in_channels, int out_channels, int kernel);

  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamSet<T>& set, const std::string& prefix);
  void zero_grad();

  Conv2d<T> depthwise;
  Conv2d<T> pointwise;
};

template <typename T>
class TransposedConv2d {
 public:
  TransposedConv2d() = default;
  TransposedConv2d(int in_channels, int out_channels, int kernel, int stride);

  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamSet<T>& set, const std::string& prefix);
  void zero_grad();

  int stride = 1;
  Tensor<T> weight, bias, weight_grad, bias_grad;

 private:
  Tensor<T> input_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamSet<T>& set, const std::string& prefix);
  void zero_grad();

  Mode mode = Mode::Train;
  Tensor<T> gamma, beta, gamma_grad, beta_grad;
  BatchNormStats<T> running;

 private:
  BatchNormCache<T> cache_;
};

/// conv -> batchnorm -> relu
template <typename T, typename Conv>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(Conv conv, int out_channels)
      : conv(std::move(conv)), bn(out_channels) {}

  void init(Rng& rng) { conv.init(rng); }
  Tensor<T> forward(const Tensor<T>& x) {
    pre_relu_ = bn.forward(conv.forward(x));
    return relu(pre_relu_);
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    return conv.backward(bn.backward(relu_backward(pre_relu_, dy)));
  }
  void collect(ParamSet<T>& set, const std::string& prefix) {
    const std::size_t first = set.trainable.size();
    conv.collect(set, prefix + ".conv");
    if (bn.mode == Mode::Train) {
      for (std::size_t i = first; i < set.trainable.size(); ++i) {
        if (set.trainable[i].name.ends_with(".bias")) {
          set.trainable[i].structural_zero = true;
        }
      }
    }
    bn.collect(set, prefix + ".bn");
  }
  void zero_grad() {
    conv.zero_grad();
    bn.zero_grad();
  }
  void set_mode(Mode m) { bn.mode = m; }

  /// Folds the on/off pattern of the last forward's ReLU into `h`.
  void hash_relu_pattern(std::uint64_t& h) const {
    for (std::size_t i = 0; i < pre_relu_.size(); ++i) {
      h = (h ^ (pre_relu_[i] > T{0} ? 1u : 0u)) * 0x100000001b3ULL;
    }
  }

  Conv conv;
  BatchNorm2d<T> bn;

 private:
  Tensor<T> pre_relu_;
};

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& grad);

}  // namespace fesnet
