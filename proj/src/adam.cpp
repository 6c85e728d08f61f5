#include "fesnet/adam.hpp"

#include <cmath>
#include <string>

namespace fesnet {

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
               double lr) {
  if (!param.same_shape(grad) || !param.same_shape(state.m) ||
      !param.same_shape(state.v)) {
    throw ShapeError("adam_step: parameter " + shape_string(param.shape()) +
                     ", gradient " + shape_string(grad.shape()) +
                     " and moments " + shape_string(state.m.shape()) +
                     " must be congruent");
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grad[i]))) {
      throw NonFiniteError("adam_step: non-finite gradient at index " +
                           std::to_string(i));
    }
  }
  const auto& c = state.config;
  const std::int64_t t = state.t + 1;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    const double v = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    param[i] = static_cast<T>(param[i] - lr * m_hat / (std::sqrt(v_hat) + c.epsilon));
  }
  state.t = t;
}

template void adam_step(Tensor<float>&, const Tensor<float>&, AdamState<float>&,
                        double);
template void adam_step(Tensor<double>&, const Tensor<double>&,
                        AdamState<double>&, double);

}  // namespace fesnet
