#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fesnet/tensor.hpp"

namespace fesnet {

/// A tensor whose entries are perturbed, paired with the analytic gradient
/// that backward() leaves for it.
struct GradCheckVariable {
  std::string name;
  Tensor<double>* value = nullptr;
  const Tensor<double>* grad = nullptr;
  /// The exact gradient is zero. Such coordinates are held to an absolute
  /// bound instead of the relative error, which would only measure
  /// finite-difference rounding noise.
  bool structural_zero = false;
};

/// Scalar function of some tensors plus its analytic gradient.
struct GradCheckTarget {
  /// Evaluates the scalar at the current variable values.
  std::function<double()> loss;
  /// Evaluates at the current values and fills every variable's grad.
  std::function<void()> backward;
  std::vector<GradCheckVariable> variables;
  /// Optional hash of the ReLU on/off pattern after the most recent
  /// evaluation. Coordinates whose +-eps evaluations change the pattern
  /// straddle a kink, where central differences are invalid; they are
  /// skipped (and redrawn when sampling).
  std::function<std::uint64_t()> relu_pattern;
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Replacement draws allowed per sampled coordinate that hits a kink.
  std::size_t kink_retries = 8;
  /// Coordinates sampled per variable; 0 checks every coordinate.
  std::size_t samples_per_variable = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  /// "<variable>[<index>]" of the worst coordinate.
  std::string worst;
  /// Largest |analytic| or |numeric| over structural-zero coordinates.
  double structural_zero_max_abs = 0.0;
  std::size_t structural_zero_coordinates = 0;
  /// Coordinates skipped because the perturbation crossed a ReLU kink.
  std::size_t kink_skipped = 0;
};

/// Absolute bound for structural-zero coordinates.
inline constexpr double kStructuralZeroBound = 1e-6;

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Compares analytic gradients against central differences
/// (L(v + eps) - L(v - eps)) / (2 eps) and reports the worst relative error.
GradCheckResult gradcheck(GradCheckTarget& target,
                          const GradCheckOptions& options = {});

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
  double tolerance = 0.0;
  bool passed() const {
    return result.max_relative_error < tolerance &&
           result.structural_zero_max_abs < kStructuralZeroBound;
  }
};

inline constexpr double kLayerGradTolerance = 1e-4;
inline constexpr double kModelGradTolerance = 1e-3;

/// 64-bit checks of every layer type FES-Net uses, the composite blocks, and
/// a sampled check of the whole network on a 16x16 input.
std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 1);

}  // namespace fesnet
