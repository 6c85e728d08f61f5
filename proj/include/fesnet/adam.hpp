#pragma once

#include <cstdint>

#include "fesnet/tensor.hpp"

namespace fesnet {

/// Raised when an optimizer step sees a NaN or infinite gradient.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t t = 0;
  AdamConfig config;

  AdamState() = default;
  explicit AdamState(const Shape& shape, AdamConfig cfg = {})
      : m(shape), v(shape), config(cfg) {}
};

/// One bias-corrected ADAM update:
///   m = b1 m + (1-b1) g,  v = b2 v + (1-b2) g^2,
///   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
/// Rejects the step, leaving param and state untouched, if any gradient
/// entry is not finite.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
               double lr);

}  // namespace fesnet
