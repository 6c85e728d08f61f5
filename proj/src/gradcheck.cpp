#include "fesnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fesnet/kernels.hpp"
#include "fesnet/layers.hpp"
#include "fesnet/model.hpp"
#include "fesnet/rng.hpp"

namespace fesnet {

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

GradCheckResult gradcheck(GradCheckTarget& target,
                          const GradCheckOptions& options) {
  target.backward();
  // Snapshot analytic gradients; the loss evaluations below may overwrite
  // the layer's cached state.
  std::vector<Tensor<double>> analytic;
  analytic.reserve(target.variables.size());
  for (const auto& v : target.variables) analytic.push_back(*v.grad);
  const std::uint64_t base_pattern =
      target.relu_pattern ? target.relu_pattern() : 0;

  Rng rng(options.seed);
  GradCheckResult result;

  // Returns false when the coordinate straddles a kink.
  auto check = [&](std::size_t vi, std::size_t idx) {
    auto& var = target.variables[vi];
    double& x = (*var.value)[idx];
    const double saved = x;
    x = saved + options.epsilon;
    const double plus = target.loss();
    const bool plus_smooth =
        !target.relu_pattern || target.relu_pattern() == base_pattern;
    x = saved - options.epsilon;
    const double minus = target.loss();
    const bool minus_smooth =
        !target.relu_pattern || target.relu_pattern() == base_pattern;
    x = saved;
    if (!plus_smooth || !minus_smooth) {
      ++result.kink_skipped;
      return false;
    }
    const double numeric = (plus - minus) / (2.0 * options.epsilon);
    if (var.structural_zero) {
      result.structural_zero_max_abs =
          std::max({result.structural_zero_max_abs,
                    std::abs(analytic[vi][idx]), std::abs(numeric)});
      ++result.structural_zero_coordinates;
      return true;
    }
    const double err = relative_error(analytic[vi][idx], numeric);
    ++result.coordinates;
    if (err >= result.max_relative_error || result.worst.empty()) {
      result.max_relative_error = err;
      result.worst = var.name + "[" + std::to_string(idx) + "]";
    }
    return true;
  };

  for (std::size_t vi = 0; vi < target.variables.size(); ++vi) {
    const std::size_t n = target.variables[vi].value->size();
    if (options.samples_per_variable == 0 || options.samples_per_variable >= n) {
      for (std::size_t idx = 0; idx < n; ++idx) check(vi, idx);
      continue;
    }
    for (std::size_t s = 0; s < options.samples_per_variable; ++s) {
      for (std::size_t attempt = 0; attempt <= options.kink_retries; ++attempt) {
        if (check(vi, static_cast<std::size_t>(rng.below(n)))) break;
      }
    }
  }
  return result;
}

namespace {

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

double projected(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

// Builds L = <layer(x), r> for a stateful layer exposing forward/backward and
// collect(), then checks the input and every trainable tensor.
template <typename Layer>
GradCheckCase check_layer(const std::string& name, Layer& layer, const Shape& in,
                          Rng& rng, std::size_t samples = 0) {
  Tensor<double> x = random_tensor(in, rng);
  const Tensor<double> probe = layer.forward(x);
  const Tensor<double> r = random_tensor(probe.shape(), rng);
  Tensor<double> dx(in);
  ParamSet<double> params;
  layer.collect(params, name);

  GradCheckTarget target;
  target.loss = [&] { return projected(layer.forward(x), r); };
  target.backward = [&] {
    layer.zero_grad();
    (void)layer.forward(x);
    dx = layer.backward(r);
  };
  target.variables.push_back({"input", &x, &dx});
  if constexpr (requires(const Layer& l, std::uint64_t& h) {
                  l.hash_relu_pattern(h);
                }) {
    target.relu_pattern = [&layer] {
      std::uint64_t h = 0xcbf29ce484222325ULL;
      layer.hash_relu_pattern(h);
      return h;
    };
  }
  for (auto& p : params.trainable) {
    target.variables.push_back({p.name, p.value, p.grad, p.structural_zero});
  }
  GradCheckOptions opts;
  opts.samples_per_variable = samples;
  opts.seed = rng.next_u64();
  return {name, gradcheck(target, opts), kLayerGradTolerance};
}

template <typename Layer>
void randomise(Layer& layer, Rng& rng) {
  ParamSet<double> params;
  layer.collect(params, "");
  for (auto& p : params.trainable) {
    for (auto& v : p.value->data()) v = rng.normal() * 0.5 + (p.name.ends_with("gamma") ? 1.0 : 0.0);
  }
}

struct ReluLayer {
  Tensor<double> input;
  Tensor<double> forward(const Tensor<double>& x) {
    input = x;
    return relu(x);
  }
  Tensor<double> backward(const Tensor<double>& dy) {
    return relu_backward(input, dy);
  }
  void collect(ParamSet<double>&, const std::string&) {}
  void zero_grad() {}
};

struct ConcatLayer {
  std::size_t split_at = 0;
  Tensor<double> forward(const Tensor<double>& x) {
    // Concatenate the two channel halves in swapped order.
    const std::size_t c = x.channels();
    const std::size_t widths[] = {split_at, c - split_at};
    auto parts = split_channels<double>(x, widths);
    const Tensor<double>* order[] = {&parts[1], &parts[0]};
    return concat_channels<double>(order);
  }
  Tensor<double> backward(const Tensor<double>& dy) {
    const std::size_t c = dy.channels();
    const std::size_t widths[] = {c - split_at, split_at};
    auto parts = split_channels<double>(dy, widths);
    const Tensor<double>* order[] = {&parts[1], &parts[0]};
    return concat_channels<double>(order);
  }
  void collect(ParamSet<double>&, const std::string&) {}
  void zero_grad() {}
};

GradCheckCase check_softmax_cross_entropy(Rng& rng) {
  const Shape shape{2, 2, 3, 3};
  Tensor<double> logits = random_tensor(shape, rng, 2.0);
  Tensor<double> target({2, 1, 3, 3});
  Tensor<double> mask({2, 1, 3, 3}, 1.0);
  for (auto& v : target.data()) v = static_cast<double>(rng.below(2));
  mask[4] = 0.0;
  Tensor<double> dlogits(shape);
  GradCheckTarget t;
  t.loss = [&] {
    return cross_entropy_loss(softmax_channels(logits), target, &mask).loss;
  };
  t.backward = [&] {
    dlogits = cross_entropy_loss(softmax_channels(logits), target, &mask).dlogits;
  };
  t.variables.push_back({"logits", &logits, &dlogits});
  return {"softmax+cross_entropy", gradcheck(t), kLayerGradTolerance};
}

GradCheckCase check_full_model(Rng& rng) {
  FesNet<double> model;
  model.init(rng.next_u64());
  model.set_mode(Mode::Train);
  Tensor<double> image = random_tensor({4, 3, 16, 16}, rng);
  Tensor<double> target({4, 1, 16, 16});
  for (auto& v : target.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  Tensor<double> dimage(image.shape());
  ParamSet<double> params = model.parameters();

  GradCheckTarget t;
  t.loss = [&] { return cross_entropy_loss(model.forward(image), target).loss; };
  t.backward = [&] {
    model.zero_grad();
    auto loss = cross_entropy_loss(model.forward(image), target);
    dimage = model.backward(loss.dlogits);
  };
  t.variables.push_back({"image", &image, &dimage});
  t.relu_pattern = [&model] { return model.relu_pattern(); };
  for (auto& p : params.trainable) {
    t.variables.push_back({p.name, p.value, p.grad, p.structural_zero});
  }
  GradCheckOptions opts;
  opts.samples_per_variable = 3;
  // Smaller step: thousands of ReLUs make kink crossings frequent at 1e-5.
  opts.epsilon = 1e-6;
  opts.seed = rng.next_u64();
  return {"fesnet (16x16, sampled)", gradcheck(t, opts), kModelGradTolerance};
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckCase> cases;

  {
    Conv2d<double> conv(ConvSpec::same(3, 4, 3));
    randomise(conv, rng);
    cases.push_back(check_layer("conv2d 3x3", conv, {2, 3, 6, 6}, rng));
  }
  {
    Conv2d<double> conv(ConvSpec{3, 3, 2, 2, 2, 2, 3, false});
    randomise(conv, rng);
    cases.push_back(
        check_layer("conv2d stride2 dilation2", conv, {2, 2, 7, 7}, rng));
  }
  {
    Conv2d<double> conv(ConvSpec::same(4, 3, 1));
    randomise(conv, rng);
    cases.push_back(check_layer("conv2d 1x1", conv, {1, 4, 5, 5}, rng));
  }
  {
    Conv2d<double> conv(ConvSpec{3, 3, 1, 1, 1, 3, 3, true});
    randomise(conv, rng);
    cases.push_back(check_layer("depthwise conv", conv, {2, 3, 5, 5}, rng));
  }
  {
    SeparableConv2d<double> sep(3, 4, 3);
    randomise(sep, rng);
    cases.push_back(check_layer("depthwise separable conv", sep, {2, 3, 5, 5}, rng));
  }
  {
    TransposedConv2d<double> up(3, 2, 4, 4);
    randomise(up, rng);
    cases.push_back(check_layer("transposed conv k4 s4", up, {2, 3, 2, 2}, rng));
  }
  {
    TransposedConv2d<double> up(2, 2, 3, 2);
    randomise(up, rng);
    cases.push_back(check_layer("transposed conv k3 s2", up, {1, 2, 3, 3}, rng));
  }
  {
    BatchNorm2d<double> bn(3);
    randomise(bn, rng);
    cases.push_back(check_layer("batchnorm (train)", bn, {3, 3, 4, 4}, rng));
  }
  {
    BatchNorm2d<double> bn(3);
    randomise(bn, rng);
    for (auto& v : bn.running.mean.data()) v = rng.normal();
    for (auto& v : bn.running.var.data()) v = 0.5 + rng.uniform();
    bn.mode = Mode::Inference;
    cases.push_back(check_layer("batchnorm (inference)", bn, {2, 3, 4, 4}, rng));
  }
  {
    // Keep inputs away from the kink at zero.
    ReluLayer layer;
    Tensor<double> x = random_tensor({2, 3, 4, 4}, rng);
    for (auto& v : x.data()) v = v >= 0 ? v + 0.1 : v - 0.1;
    const Tensor<double> r = random_tensor(x.shape(), rng);
    Tensor<double> dx(x.shape());
    GradCheckTarget t;
    t.loss = [&] { return projected(layer.forward(x), r); };
    t.backward = [&] {
      (void)layer.forward(x);
      dx = layer.backward(r);
    };
    t.variables.push_back({"input", &x, &dx});
    cases.push_back({"relu", gradcheck(t), kLayerGradTolerance});
  }
  {
    ConcatLayer layer{2};
    cases.push_back(check_layer("concat_channels", layer, {2, 5, 3, 3}, rng));
  }
  cases.push_back(check_softmax_cross_entropy(rng));
  {
    ConvBnRelu<double, Conv2d<double>> block(
        Conv2d<double>(ConvSpec::same(3, 4, 3)), 4);
    randomise(block, rng);
    cases.push_back(check_layer("conv+bn+relu", block, {2, 3, 6, 6}, rng));
  }
  {
    PcbBlock<double> pcb(3, 4, PcbWiring::Sequential, 1);
    pcb.init(rng);
    cases.push_back(check_layer("PCB (sequential)", pcb, {2, 3, 8, 8}, rng, 24));
  }
  {
    PcbBlock<double> pcb(3, 4, PcbWiring::Parallel, 1);
    pcb.init(rng);
    cases.push_back(check_layer("PCB (parallel)", pcb, {2, 3, 8, 8}, rng, 24));
  }
  {
    FebBlock<double> feb(4, {4, 6, 6, 5});
    feb.init(rng);
    cases.push_back(check_layer("FEB", feb, {2, 4, 6, 6}, rng, 24));
  }
  cases.push_back(check_full_model(rng));
  return cases;
}

}  // namespace fesnet
