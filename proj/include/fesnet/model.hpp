#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fesnet/layers.hpp"

namespace fesnet {

/// How the three PCB convolutions are wired before concatenation.
///   Sequential: a = A(x), b = B(a), c = C(b)
///   Parallel:   a = A(x), b = B(x), c = C(x)
enum class PcbWiring { Sequential, Parallel };

std::string to_string(PcbWiring wiring);
PcbWiring parse_pcb_wiring(const std::string& text);

struct FesNetConfig {
  int in_channels = 3;
  int stem_channels = 16;
  std::array<int, 4> pcb_channels{16, 32, 64, 128};
  /// Output widths of the two stride-4 transposed convolutions.
  std::array<int, 2> head_channels{32, 16};
  std::array<int, 4> feb_channels{8, 16, 16, 16};
  int fuse_channels = 16;
  int classes = 2;
  /// Dilation of the stride-2 downsampling conv in each PCB.
  int down_dilation = 1;
  PcbWiring wiring = PcbWiring::Sequential;

  static constexpr int kHeadStride = 4;
  static constexpr int kDownsampleFactor = 16;
  static constexpr int kMaxFebWidth = 16;

  /// Throws Error on structural violations (FEB too wide, head that does not
  /// undo the x16 downsampling, non-positive widths, ...).
  void validate() const;
  friend bool operator==(const FesNetConfig&, const FesNetConfig&) = default;
};

template <typename T>
class PcbBlock {
 public:
  PcbBlock() = default;
  PcbBlock(int in_channels, int out_channels, PcbWiring wiring, int dilation);

  void init(Rng& rng);
  /// Requires even spatial extents; output has half the extent.
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamSet<T>& set, const std::string& prefix);
  void zero_grad();
  void set_mode(Mode m);

  void hash_relu_pattern(std::uint64_t& h) const;

  /// Shape of the depth concatenation of the last forward call.
  const Shape& concat_shape() const { return concat_shape_; }

  int in_channels = 0;
  int out_channels = 0;
  PcbWiring wiring = PcbWiring::Sequential;
  ConvBnRelu<T, Conv2d<T>> conv_a;
  ConvBnRelu<T, SeparableConv2d<T>> conv_b;
  ConvBnRelu<T, Conv2d<T>> conv_c;
  ConvBnRelu<T, Conv2d<T>> down;

 private:
  Shape concat_shape_;
};

template <typename T>
class FebBlock {
 public:
  FebBlock() = default;
  FebBlock(int in_channels, const std::array<int, 4>& widths);

  void init(Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamSet<T>& set, const std::string& prefix);
  void zero_grad();
  void set_mode(Mode m);
  void hash_relu_pattern(std::uint64_t& h) const;

  std::array<ConvBnRelu<T, Conv2d<T>>, 4> layers;
};

/// Named intermediate features of the last forward pass.
template <typename T>
struct Activations {
  Tensor<T> f_i;   // stem output, FEB input
  Tensor<T> f_d;   // last PCB output
  Tensor<T> f_us;  // upsampling head output
  Tensor<T> f_e;   // FEB output
  Tensor<T> s_c;   // depth concatenation of f_us and f_e
};

template <typename T>
class FesNet {
 public:
  explicit FesNet(const FesNetConfig& config = {});

  /// Deterministic He initialisation from `seed`.
  void init(std::uint64_t seed);

  /// image: N x in_channels x H x W with H, W multiples of 16. Returns the
  /// per-pixel class probabilities (N x classes x H x W).
  Tensor<T> forward(const Tensor<T>& image);
  /// dlogits: gradient of the loss w.r.t. the pre-softmax logits. Returns
  /// the gradient w.r.t. the image; parameter gradients accumulate.
  Tensor<T> backward(const Tensor<T>& dlogits);

  /// S_C = concat(f_us, f_e), then conv3x3+BN+ReLU, 1x1 conv, softmax.
  Tensor<T> fuse_and_classify(const Tensor<T>& f_us, const Tensor<T>& f_e);

  void set_mode(Mode m);
  Mode mode() const { return mode_; }
  void zero_grad();
  ParamSet<T> parameters();
  const FesNetConfig& config() const { return config_; }
  const Activations<T>& activations() const { return acts_; }
  /// Hash of every ReLU on/off decision in the last forward pass.
  std::uint64_t relu_pattern() const;

  /// Copies every parameter and buffer from `other` by name (shapes must
  /// match), converting precision as needed.
  template <typename U>
  void copy_from(FesNet<U>& other);

  Conv2d<T>& classifier() { return classifier_; }

 private:
  FesNetConfig config_;
  Mode mode_ = Mode::Train;
  ConvBnRelu<T, Conv2d<T>> stem_;
  std::array<PcbBlock<T>, 4> pcbs_;
  std::array<ConvBnRelu<T, TransposedConv2d<T>>, 2> head_;
  FebBlock<T> feb_;
  ConvBnRelu<T, Conv2d<T>> fuse_;
  Conv2d<T> classifier_;
  Activations<T> acts_;
};

struct ParameterRow {
  std::string name;
  Shape shape;
  std::size_t count = 0;
  bool trainable = true;
};

struct ParameterReport {
  std::size_t trainable = 0;
  /// Batch-norm running statistics; not trainable.
  std::size_t buffers = 0;
  std::vector<ParameterRow> rows;

  /// Rows summed per layer (name up to the last '.').
  std::vector<ParameterRow> per_layer() const;
};

template <typename T>
ParameterReport count_parameters(FesNet<T>& model);

}  // namespace fesnet
