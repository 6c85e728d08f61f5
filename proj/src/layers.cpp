#include "fesnet/layers.hpp"

#include <algorithm>
#include <cmath>

namespace fesnet {

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& grad) {
  if (!into.same_shape(grad)) {
    throw ShapeError("gradient " + shape_string(grad.shape()) +
                     " does not match buffer " + shape_string(into.shape()));
  }
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += grad[i];
}

namespace {

template <typename T>
void he_normal(Tensor<T>& w, double fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : w.data()) v = static_cast<T>(rng.normal() * std);
}

}  // namespace

template <typename T>
Conv2d<T>::Conv2d(const ConvSpec& s)
    : spec(s),
      weight(s.weight_shape()),
      bias({static_cast<std::size_t>(s.out_channels)}),
      weight_grad(s.weight_shape()),
      bias_grad({static_cast<std::size_t>(s.out_channels)}) {
  spec.validate();
}

template <typename T>
void Conv2d<T>::init(Rng& rng) {
  const double fan_in = static_cast<double>(weight.size()) /
                        static_cast<double>(weight.dim(0));
  he_normal(weight, fan_in, rng);
  bias.fill(T{0});
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  input_ = x;
  return conv2d(x, weight, bias, spec);
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy) {
  ConvGrads<T> g = conv2d_backward(input_, weight, spec, dy);
  accumulate(weight_grad, g.dw);
  accumulate(bias_grad, g.db);
  return std::move(g.dx);
}

template <typename T>
void Conv2d<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.trainable.push_back({prefix + ".weight", &weight, &weight_grad});
  set.trainable.push_back({prefix + ".bias", &bias, &bias_grad});
}

template <typename T>
void Conv2d<T>::zero_grad() {
  weight_grad.fill(T{0});
  bias_grad.fill(T{0});
}

template <typename T>
SeparableConv2d<T>::SeparableConv2d(int in_channels, int out_channels,
                                    int kernel)
    : depthwise(ConvSpec{kernel, kernel, 1, 1, kernel / 2, in_channels,
                         in_channels, true}),
      pointwise(ConvSpec{1, 1, 1, 1, 0, in_channels, out_channels, false}) {}

template <typename T>
void SeparableConv2d<T>::init(Rng& rng) {
  depthwise.init(rng);
  pointwise.init(rng);
}

template <typename T>
Tensor<T> SeparableConv2d<T>::forward(const Tensor<T>& x) {
  return pointwise.forward(depthwise.forward(x));
}

template <typename T>
Tensor<T> SeparableConv2d<T>::backward(const Tensor<T>& dy) {
  return depthwise.backward(pointwise.backward(dy));
}

template <typename T>
void SeparableConv2d<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  depthwise.collect(set, prefix + ".depthwise");
  pointwise.collect(set, prefix + ".pointwise");
}

template <typename T>
void SeparableConv2d<T>::zero_grad() {
  depthwise.zero_grad();
  pointwise.zero_grad();
}

template <typename T>
TransposedConv2d<T>::TransposedConv2d(int in_channels, int out_channels,
                                      int kernel, int s)
    : stride(s) {
  const Shape ws{static_cast<std::size_t>(in_channels),
                 static_cast<std::size_t>(out_channels),
                 static_cast<std::size_t>(kernel),
                 static_cast<std::size_t>(kernel)};
  if (s < 1) throw ShapeError("transposed conv stride must be >= 1");
  weight = Tensor<T>(ws);
  weight_grad = Tensor<T>(ws);
  bias = Tensor<T>({static_cast<std::size_t>(out_channels)});
  bias_grad = Tensor<T>({static_cast<std::size_t>(out_channels)});
}

template <typename T>
void TransposedConv2d<T>::init(Rng& rng) {
  // Each output pixel sees in_channels * (k / stride)^2 taps.
  const double k = static_cast<double>(weight.dim(2));
  const double taps = std::max(1.0, (k / stride) * (k / stride));
  he_normal(weight, static_cast<double>(weight.dim(0)) * taps, rng);
  bias.fill(T{0});
}

template <typename T>
Tensor<T> TransposedConv2d<T>::forward(const Tensor<T>& x) {
  input_ = x;
  return transposed_conv2d(x, weight, bias, stride);
}

template <typename T>
Tensor<T> TransposedConv2d<T>::backward(const Tensor<T>& dy) {
  ConvGrads<T> g = transposed_conv2d_backward(input_, weight, stride, dy);
  accumulate(weight_grad, g.dw);
  accumulate(bias_grad, g.db);
  return std::move(g.dx);
}

template <typename T>
void TransposedConv2d<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.trainable.push_back({prefix + ".weight", &weight, &weight_grad});
  set.trainable.push_back({prefix + ".bias", &bias, &bias_grad});
}

template <typename T>
void TransposedConv2d<T>::zero_grad() {
  weight_grad.fill(T{0});
  bias_grad.fill(T{0});
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int channels) {
  const Shape s{static_cast<std::size_t>(channels)};
  gamma = Tensor<T>(s, T{1});
  beta = Tensor<T>(s);
  gamma_grad = Tensor<T>(s);
  beta_grad = Tensor<T>(s);
  running.mean = Tensor<T>(s);
  running.var = Tensor<T>(s, T{1});
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  return batchnorm(x, gamma, beta, mode, running, &cache_);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& dy) {
  BatchNormGrads<T> g = batchnorm_backward(cache_, gamma, dy);
  accumulate(gamma_grad, g.dgamma);
  accumulate(beta_grad, g.dbeta);
  return std::move(g.dx);
}

template <typename T>
void BatchNorm2d<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.trainable.push_back({prefix + ".gamma", &gamma, &gamma_grad});
  set.trainable.push_back({prefix + ".beta", &beta, &beta_grad});
  set.buffers.push_back({prefix + ".running_mean", &running.mean, nullptr});
  set.buffers.push_back({prefix + ".running_var", &running.var, nullptr});
}

template <typename T>
void BatchNorm2d<T>::zero_grad() {
  gamma_grad.fill(T{0});
  beta_grad.fill(T{0});
}

template class Conv2d<float>;
template class Conv2d<double>;
template class SeparableConv2d<float>;
template class SeparableConv2d<double>;
template class TransposedConv2d<float>;
template class TransposedConv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template void accumulate(Tensor<float>&, const Tensor<float>&);
template void accumulate(Tensor<double>&, const Tensor<double>&);

}  // namespace fesnet
