#include <array>
#include <cmath>

#include "doctest.h"
#include "fesnet/adam.hpp"
#include "fesnet/gradcheck.hpp"
#include "fesnet/layers.hpp"
#include "support/oracles.hpp"

using namespace fesnet;

namespace {

ConvSpec spec(int k, int s, int d, int p, int in, int out, bool dw = false) {
  return ConvSpec{k, k, s, d, p, in, out, dw};
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 with padding 1") {
  Tensor<float> x({1, 1, 3, 3}, 1.0f), w({1, 1, 3, 3}, 1.0f), b({1});
  const Tensor<float> y = conv2d(x, w, b, spec(3, 1, 1, 1, 1, 1));
  const std::array<float, 9> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == expect[i]);
}

TEST_CASE("conv2d: 1x1 identity weights copy the input") {
  Rng rng(1);
  const auto x = oracle::random_tensor<float>({2, 3, 5, 4}, rng);
  Tensor<float> w({3, 3, 1, 1}), b({3});
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
  CHECK(conv2d(x, w, b, spec(1, 1, 1, 0, 3, 3)) == x);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = 1 + 2 * static_cast<int>(rng.below(2));
    const int s = 1 + static_cast<int>(rng.below(2));
    const int d = 1 + static_cast<int>(rng.below(2));
    const int p = static_cast<int>(rng.below(3));
    const int in = 1 + static_cast<int>(rng.below(4));
    const bool dw = rng.below(3) == 0;
    const int out = dw ? in : 1 + static_cast<int>(rng.below(4));
    const std::size_t h = 5 + rng.below(6), w = 5 + rng.below(6);
    const ConvSpec cs = spec(k, s, d, p, in, out, dw);
    const auto x = oracle::random_tensor<double>({2, static_cast<std::size_t>(in), h, w}, rng);
    const auto wt = oracle::random_tensor<double>(cs.weight_shape(), rng);
    const auto b = oracle::random_tensor<double>({static_cast<std::size_t>(out)}, rng);
    CHECK(oracle::max_abs_diff(conv2d(x, wt, b, cs), oracle::conv2d(x, wt, b, cs)) < 1e-10);
    const auto xf = x.cast<float>(), wf = wt.cast<float>(), bf = b.cast<float>();
    CHECK(oracle::max_abs_diff(conv2d(xf, wf, bf, cs), oracle::conv2d(xf, wf, bf, cs)) < 1e-5);
  }
}

TEST_CASE("conv2d rejects receptive fields larger than the input") {
  Tensor<float> x({1, 1, 2, 2}), w({1, 1, 3, 3}), b({1});
  CHECK_THROWS_AS(conv2d(x, w, b, spec(3, 1, 1, 0, 1, 1)), ShapeError);
}

TEST_CASE("separable conv: parameter count and composition") {
  SeparableConv2d<double> sep(32, 16, 3);
  ParamSet<double> set;
  sep.collect(set, "sep");
  std::size_t weights = 0;
  for (const auto& p : set.trainable) {
    if (p.name.ends_with("weight")) weights += p.value->size();
  }
  CHECK(weights == 32 * 9 + 32 * 16);
  CHECK(weights == 800);
  SeparableConv2d<double> small(3, 64, 3);
  ParamSet<double> s2;
  small.collect(s2, "s");
  std::size_t total = 0;
  for (const auto& p : s2.trainable) total += p.value->size();
  CHECK(total == 3 * 9 + 3 + 3 * 64 + 64);

  Rng rng(3);
  const auto x = oracle::random_tensor<double>({2, 4, 7, 6}, rng);
  const ConvSpec ds = spec(3, 1, 1, 1, 4, 4, true);
  const auto wd = oracle::random_tensor<double>(ds.weight_shape(), rng);
  const auto bd = oracle::random_tensor<double>({4}, rng);
  const auto wp = oracle::random_tensor<double>({5, 4, 1, 1}, rng);
  const auto bp = oracle::random_tensor<double>({5}, rng);
  const auto y = depthwise_separable_conv(x, wd, bd, wp, bp, ds);
  const auto ref =
      oracle::conv2d(oracle::conv2d(x, wd, bd, ds), wp, bp, spec(1, 1, 1, 0, 4, 5));
  CHECK(oracle::max_abs_diff(y, ref) < 1e-10);
}

TEST_CASE("transposed conv: single tap expands to one kernel copy") {
  Tensor<double> x({1, 1, 2, 2}), b({1});
  x.at(0, 0, 1, 0) = 2.0;
  Tensor<double> w({1, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) w[i] = static_cast<double>(i);
  const auto y = transposed_conv2d(x, w, b, 4);
  REQUIRE(y.shape() == Shape{1, 1, 8, 8});
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const double expect = (i >= 4 && j < 4) ? 2.0 * w[(i - 4) * 4 + j] : 0.0;
      CHECK(y.at(0, 0, i, j) == expect);
    }
  }
}

TEST_CASE("transposed conv matches the scatter oracle and is the conv adjoint") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(3);
    const int k = 2 + static_cast<int>(rng.below(3));
    const int s = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    const auto x = oracle::random_tensor<double>({2, c, 3, 4}, rng);
    const auto w = oracle::random_tensor<double>(
        {c, o, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, rng);
    const Tensor<double> zero_b({o});
    const auto y = transposed_conv2d(x, w, zero_b, s);
    CHECK(oracle::max_abs_diff(y, oracle::transposed_conv2d(x, w, zero_b, s)) < 1e-10);

    // <T x, z> == <x, C z>: the same weights read as a strided o -> c conv.
    const auto z = oracle::random_tensor<double>(y.shape(), rng);
    const Tensor<double> cb({c});
    const auto cz = oracle::conv2d(z, w, cb, spec(k, s, 1, 0, static_cast<int>(o),
                                                   static_cast<int>(c)));
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * z[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * cz[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("batchnorm: constant channel maps to beta, batch mean to zero") {
  Tensor<double> x({2, 2, 3, 3});
  Rng rng(5);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 9; ++i) {
      x.plane_ptr(n, 0)[i] = 3.5;
      x.plane_ptr(n, 1)[i] = rng.normal() * 4 + 10;
    }
  }
  Tensor<double> gamma({2}, 1.0), beta({2});
  BatchNormStats<double> running{Tensor<double>({2}), Tensor<double>({2}, 1.0)};
  const auto y = batchnorm(x, gamma, beta, Mode::Train, running);
  double mean1 = 0;
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(y.plane_ptr(n, 0)[i] == 0.0);
      mean1 += y.plane_ptr(n, 1)[i];
    }
  }
  CHECK(std::abs(mean1 / 18) < 1e-12);
  CHECK(running.mean[0] == doctest::Approx(0.1 * 3.5));
  const auto inf = batchnorm(x, gamma, beta, Mode::Inference, running);
  CHECK(inf.at(0, 0, 0, 0) ==
        doctest::Approx((3.5 - running.mean[0]) / std::sqrt(running.var[0] + 1e-5)));
}

TEST_CASE("relu and relu_backward") {
  const Tensor<float> x({3}, std::vector<float>{-1, 0, 2});
  const auto y = relu(x);
  CHECK(y[0] == 0);
  CHECK(y[1] == 0);
  CHECK(y[2] == 2);
  const auto g = relu_backward(x, Tensor<float>({3}, 1.0f));
  CHECK(g[0] == 0);
  CHECK(g[1] == 0);
  CHECK(g[2] == 1);
}

TEST_CASE("concat and split are inverse") {
  Rng rng(2);
  const auto a = oracle::random_tensor<float>({2, 3, 4, 4}, rng);
  const auto b = oracle::random_tensor<float>({2, 5, 4, 4}, rng);
  const std::array<const Tensor<float>*, 2> in{&a, &b};
  const auto c = concat_channels<float>(in);
  CHECK(c.shape() == Shape{2, 8, 4, 4});
  CHECK(c.at(1, 3, 2, 1) == b.at(1, 0, 2, 1));
  const std::array<std::size_t, 2> sizes{3, 5};
  const auto parts = split_channels<float>(c, sizes);
  CHECK(parts[0] == a);
  CHECK(parts[1] == b);
  const Tensor<float> odd({1, 2, 3, 4});
  const std::array<const Tensor<float>*, 2> bad{&a, &odd};
  CHECK_THROWS_AS(concat_channels<float>(bad), ShapeError);
}

TEST_CASE("softmax is stable and cross-entropy has known values") {
  Tensor<double> logits({2, 2, 1, 1}, std::vector<double>{0, 0, 1000, 0});
  const auto p = softmax_channels(logits);
  CHECK(p.at(0, 0, 0, 0) == doctest::Approx(0.5));
  CHECK(p.at(1, 0, 0, 0) == 1.0);
  CHECK(p.at(1, 1, 0, 0) == 0.0);
  const Tensor<double> target({1, 1, 1, 1}, 1.0);
  const Tensor<double> half({1, 2, 1, 1}, 0.5);
  CHECK(cross_entropy_loss(half, target).loss == doctest::Approx(std::log(2.0)));
  const Tensor<double> sure({1, 2, 1, 1}, std::vector<double>{0, 1});
  CHECK(cross_entropy_loss(sure, target).loss == 0.0);
  const Tensor<double> zero_mask({1, 1, 1, 1});
  CHECK(cross_entropy_loss(half, target, &zero_mask).loss == 0.0);
}

TEST_CASE("cross-entropy gradient passes a finite-difference check") {
  Rng rng(9);
  auto logits = oracle::random_tensor<double>({2, 2, 3, 3}, rng);
  Tensor<double> target({2, 1, 3, 3}), mask({2, 1, 3, 3}, 1.0);
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = static_cast<double>(rng.below(2));
  mask[4] = 0.0;
  Tensor<double> grad;
  GradCheckTarget t;
  t.loss = [&] { return cross_entropy_loss(softmax_channels(logits), target, &mask).loss; };
  t.backward = [&] { grad = cross_entropy_loss(softmax_channels(logits), target, &mask).dlogits; };
  t.variables = {{"logits", &logits, &grad}};
  CHECK(gradcheck(t).max_relative_error < 1e-6);
}

TEST_CASE("gradcheck detects a gradient scaled by 1.01") {
  Rng rng(4);
  auto x = oracle::random_tensor<double>({1, 1, 4, 4}, rng);
  Tensor<double> grad;
  GradCheckTarget t;
  t.loss = [&] {
    double s = 0;
    for (double v : x.data()) s += v * v * v;
    return s;
  };
  t.backward = [&] {
    grad = x;
    for (auto& v : grad.data()) v = 1.01 * 3 * v * v;
  };
  t.variables = {{"x", &x, &grad}};
  CHECK(gradcheck(t).max_relative_error > 1e-3);
}

TEST_CASE("adam: zero gradient is a no-op, first step has magnitude lr") {
  Tensor<double> p({3}, std::vector<double>{1, -2, 3});
  AdamState<double> st(p.shape());
  const Tensor<double> before = p;
  adam_step(p, Tensor<double>({3}), st, 1e-3);
  CHECK(p == before);
  const Tensor<double> g({3}, std::vector<double>{0.5, -4, 1e-3});
  AdamState<double> fresh(p.shape());
  adam_step(p, g, fresh, 1e-3);
  CHECK(p[0] == doctest::Approx(1 - 1e-3).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-2 + 1e-3).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(3 - 1e-3).epsilon(1e-4));
}

TEST_CASE("adam matches a scripted three-step recurrence") {
  Tensor<double> p({1}, 0.7);
  AdamState<double> st(p.shape());
  const std::array<double, 3> grads{0.3, -0.1, 0.25};
  double ref = 0.7, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[static_cast<std::size_t>(t - 1)];
    adam_step(p, Tensor<double>({1}, g), st, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    ref -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(std::abs(p[0] - ref) < 1e-10);
  }
  CHECK(st.t == 3);
}

TEST_CASE("adam rejects non-finite gradients without touching state") {
  Tensor<float> p({2}, 1.0f);
  AdamState<float> st(p.shape());
  Tensor<float> g({2}, std::vector<float>{0.1f, NAN});
  CHECK_THROWS_AS(adam_step(p, g, st, 1e-3), NonFiniteError);
  CHECK(p[0] == 1.0f);
  CHECK(st.t == 0);
  CHECK(st.m[0] == 0.0f);
}

TEST_CASE("rng streams are reproducible and label-separated") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng::derive(1, "x", 2, 3), d = Rng::derive(1, "x", 2, 3), e = Rng::derive(1, "y", 2, 3);
  const auto cv = c.next_u64();
  CHECK(cv == d.next_u64());
  CHECK(cv != e.next_u64());
  Rng u(3);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK((x >= 0.0 && x < 1.0));
    CHECK(u.below(7) < 7);
  }
}

TEST_CASE("layer gradient suite passes") {
  for (const auto& c : run_gradcheck_suite(2)) {
    INFO(c.name << " err " << c.result.max_relative_error << " at " << c.result.worst);
    CHECK(c.passed());
  }
}
