#include "fesnet/model.hpp"

#include <map>

namespace fesnet {

std::string to_string(PcbWiring wiring) {
  return wiring == PcbWiring::Sequential ? "sequential" : "parallel";
}

PcbWiring parse_pcb_wiring(const std::string& text) {
  if (text == "sequential") return PcbWiring::Sequential;
  if (text == "parallel") return PcbWiring::Parallel;
  throw Error("unknown PCB wiring '" + text + "' (expected sequential|parallel)");
}

void FesNetConfig::validate() const {
  auto positive = [](int v, const std::string& what) {
    if (v < 1) throw Error(what + " must be positive, got " + std::to_string(v));
  };
  positive(in_channels, "in_channels");
  positive(stem_channels, "stem_channels");
  for (int c : pcb_channels) positive(c, "PCB width");
  for (int c : head_channels) positive(c, "head width");
  for (int c : feb_channels) {
    positive(c, "FEB width");
    if (c > kMaxFebWidth) {
      throw Error("FEB width " + std::to_string(c) + " exceeds the " +
                  std::to_string(kMaxFebWidth) + "-channel limit");
    }
  }
  positive(fuse_channels, "fuse_channels");
  positive(down_dilation, "down_dilation");
  if (classes != 2) {
    throw Error("only 2-class (vessel/background) output is supported");
  }
  int down = 1;
  for (std::size_t i = 0; i < pcb_channels.size(); ++i) down *= 2;
  int up = 1;
  for (std::size_t i = 0; i < head_channels.size(); ++i) up *= kHeadStride;
  if (down != kDownsampleFactor || up != down) {
    throw Error("upsampling factor " + std::to_string(up) +
                " does not invert downsampling factor " + std::to_string(down));
  }
}

template <typename T>
PcbBlock<T>::PcbBlock(int in, int out, PcbWiring w, int dilation)
    : in_channels(in),
      out_channels(out),
      wiring(w),
      conv_a(Conv2d<T>(ConvSpec::same(in, out, 3)), out),
      conv_b(SeparableConv2d<T>(w == PcbWiring::Sequential ? out : in, out, 3),
             out),
      conv_c(Conv2d<T>(ConvSpec::same(w == PcbWiring::Sequential ? out : in,
                                      out, 1)),
             out),
      down(Conv2d<T>(ConvSpec{3, 3, 2, dilation, dilation, 3 * out, out, false}),
           out) {}

template <typename T>
void PcbBlock<T>::init(Rng& rng) {
  conv_a.init(rng);
  conv_b.init(rng);
  conv_c.init(rng);
  down.init(rng);
}

template <typename T>
Tensor<T> PcbBlock<T>::forward(const Tensor<T>& x) {
  require_4d(x, "PCB input");
  if (x.height() % 2 != 0 || x.width() % 2 != 0) {
    throw ShapeError("PCB input spatial extent " + shape_string(x.shape()) +
                     " must be even; pad upstream");
  }
  Tensor<T> a = conv_a.forward(x);
  Tensor<T> b = conv_b.forward(wiring == PcbWiring::Sequential ? a : x);
  Tensor<T> c = conv_c.forward(wiring == PcbWiring::Sequential ? b : x);
  const Tensor<T>* parts[] = {&a, &b, &c};
  Tensor<T> cat = concat_channels<T>(parts);
  concat_shape_ = cat.shape();
  return down.forward(cat);
}

template <typename T>
Tensor<T> PcbBlock<T>::backward(const Tensor<T>& dy) {
  const std::size_t widths[] = {static_cast<std::size_t>(out_channels),
                                static_cast<std::size_t>(out_channels),
                                static_cast<std::size_t>(out_channels)};
  std::vector<Tensor<T>> parts =
      split_channels<T>(down.backward(dy), widths);
  if (wiring == PcbWiring::Sequential) {
    accumulate(parts[1], conv_c.backward(parts[2]));
    accumulate(parts[0], conv_b.backward(parts[1]));
    return conv_a.backward(parts[0]);
  }
  Tensor<T> dx = conv_a.backward(parts[0]);
  accumulate(dx, conv_b.backward(parts[1]));
  accumulate(dx, conv_c.backward(parts[2]));
  return dx;
}

template <typename T>
void PcbBlock<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  conv_a.collect(set, prefix + ".conv_a");
  conv_b.collect(set, prefix + ".conv_b");
  conv_c.collect(set, prefix + ".conv_c");
  down.collect(set, prefix + ".down");
}

template <typename T>
void PcbBlock<T>::zero_grad() {
  conv_a.zero_grad();
  conv_b.zero_grad();
  conv_c.zero_grad();
  down.zero_grad();
}

template <typename T>
void PcbBlock<T>::set_mode(Mode m) {
  conv_a.set_mode(m);
  conv_b.set_mode(m);
  conv_c.set_mode(m);
  down.set_mode(m);
}

template <typename T>
void PcbBlock<T>::hash_relu_pattern(std::uint64_t& h) const {
  conv_a.hash_relu_pattern(h);
  conv_b.hash_relu_pattern(h);
  conv_c.hash_relu_pattern(h);
  down.hash_relu_pattern(h);
}

template <typename T>
FebBlock<T>::FebBlock(int in_channels, const std::array<int, 4>& widths) {
  int prev = in_channels;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i] = ConvBnRelu<T, Conv2d<T>>(
        Conv2d<T>(ConvSpec::same(prev, widths[i], 3)), widths[i]);
    prev = widths[i];
  }
}

template <typename T>
void FebBlock<T>::init(Rng& rng) {
  for (auto& l : layers) l.init(rng);
}

template <typename T>
Tensor<T> FebBlock<T>::forward(const Tensor<T>& x) {
  Tensor<T> h = x;
  for (auto& l : layers) h = l.forward(h);
  return h;
}

template <typename T>
Tensor<T> FebBlock<T>::backward(const Tensor<T>& dy) {
  Tensor<T> g = dy;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = it->backward(g);
  return g;
}

template <typename T>
void FebBlock<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].collect(set, prefix + ".conv" + std::to_string(i + 1));
  }
}

template <typename T>
void FebBlock<T>::zero_grad() {
  for (auto& l : layers) l.zero_grad();
}

template <typename T>
void FebBlock<T>::set_mode(Mode m) {
  for (auto& l : layers) l.set_mode(m);
}

template <typename T>
void FebBlock<T>::hash_relu_pattern(std::uint64_t& h) const {
  for (const auto& l : layers) l.hash_relu_pattern(h);
}

template <typename T>
FesNet<T>::FesNet(const FesNetConfig& config) : config_(config) {
  config_.validate();
  const auto& c = config_;
  stem_ = ConvBnRelu<T, Conv2d<T>>(
      Conv2d<T>(ConvSpec::same(c.in_channels, c.stem_channels, 3)),
      c.stem_channels);
  int prev = c.stem_channels;
  for (std::size_t i = 0; i < pcbs_.size(); ++i) {
    pcbs_[i] = PcbBlock<T>(prev, c.pcb_channels[i], c.wiring, c.down_dilation);
    prev = c.pcb_channels[i];
  }
  for (std::size_t i = 0; i < head_.size(); ++i) {
    head_[i] = ConvBnRelu<T, TransposedConv2d<T>>(
        TransposedConv2d<T>(prev, c.head_channels[i], FesNetConfig::kHeadStride,
                            FesNetConfig::kHeadStride),
        c.head_channels[i]);
    prev = c.head_channels[i];
  }
  feb_ = FebBlock<T>(c.stem_channels, c.feb_channels);
  const int fused_in = c.head_channels.back() + c.feb_channels.back();
  fuse_ = ConvBnRelu<T, Conv2d<T>>(
      Conv2d<T>(ConvSpec::same(fused_in, c.fuse_channels, 3)), c.fuse_channels);
  classifier_ = Conv2d<T>(ConvSpec::same(c.fuse_channels, c.classes, 1));
}

template <typename T>
void FesNet<T>::init(std::uint64_t seed) {
  Rng rng(seed);
  stem_.init(rng);
  for (auto& p : pcbs_) p.init(rng);
  for (auto& h : head_) h.init(rng);
  feb_.init(rng);
  fuse_.init(rng);
  classifier_.init(rng);
}

template <typename T>
Tensor<T> FesNet<T>::forward(const Tensor<T>& image) {
  require_4d(image, "image");
  if (image.channels() != static_cast<std::size_t>(config_.in_channels)) {
    throw ShapeError("image has " + std::to_string(image.channels()) +
                     " channels, model expects " +
                     std::to_string(config_.in_channels));
  }
  const auto factor = static_cast<std::size_t>(FesNetConfig::kDownsampleFactor);
  if (image.height() % factor != 0 || image.width() % factor != 0) {
    throw ShapeError("image extent " + std::to_string(image.height()) + "x" +
                     std::to_string(image.width()) + " must be a multiple of " +
                     std::to_string(factor) + "; pad before inference");
  }
  acts_.f_i = stem_.forward(image);
  Tensor<T> h = acts_.f_i;
  for (auto& p : pcbs_) h = p.forward(h);
  acts_.f_d = h;
  for (auto& u : head_) h = u.forward(h);
  acts_.f_us = std::move(h);
  acts_.f_e = feb_.forward(acts_.f_i);
  return fuse_and_classify(acts_.f_us, acts_.f_e);
}

template <typename T>
Tensor<T> FesNet<T>::fuse_and_classify(const Tensor<T>& f_us,
                                       const Tensor<T>& f_e) {
  require_4d(f_us, "F_US");
  require_4d(f_e, "F_E");
  if (f_us.batch() != f_e.batch() || f_us.height() != f_e.height() ||
      f_us.width() != f_e.width()) {
    throw ShapeError("cannot fuse F_US " + shape_string(f_us.shape()) +
                     " with F_E " + shape_string(f_e.shape()) +
                     ": batch/spatial extents differ");
  }
  const Tensor<T>* parts[] = {&f_us, &f_e};
  acts_.s_c = concat_channels<T>(parts);
  return softmax_channels(classifier_.forward(fuse_.forward(acts_.s_c)));
}

template <typename T>
Tensor<T> FesNet<T>::backward(const Tensor<T>& dlogits) {
  Tensor<T> d_sc = fuse_.backward(classifier_.backward(dlogits));
  const std::size_t widths[] = {acts_.f_us.channels(), acts_.f_e.channels()};
  std::vector<Tensor<T>> parts = split_channels<T>(d_sc, widths);
  Tensor<T> g = std::move(parts[0]);
  for (auto it = head_.rbegin(); it != head_.rend(); ++it) g = it->backward(g);
  for (auto it = pcbs_.rbegin(); it != pcbs_.rend(); ++it) g = it->backward(g);
  accumulate(g, feb_.backward(parts[1]));
  return stem_.backward(g);
}

template <typename T>
std::uint64_t FesNet<T>::relu_pattern() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  stem_.hash_relu_pattern(h);
  for (const auto& p : pcbs_) p.hash_relu_pattern(h);
  for (const auto& u : head_) u.hash_relu_pattern(h);
  feb_.hash_relu_pattern(h);
  fuse_.hash_relu_pattern(h);
  return h;
}

template <typename T>
void FesNet<T>::set_mode(Mode m) {
  mode_ = m;
  stem_.set_mode(m);
  for (auto& p : pcbs_) p.set_mode(m);
  for (auto& h : head_) h.set_mode(m);
  feb_.set_mode(m);
  fuse_.set_mode(m);
}

template <typename T>
void FesNet<T>::zero_grad() {
  stem_.zero_grad();
  for (auto& p : pcbs_) p.zero_grad();
  for (auto& h : head_) h.zero_grad();
  feb_.zero_grad();
  fuse_.zero_grad();
  classifier_.zero_grad();
}

template <typename T>
ParamSet<T> FesNet<T>::parameters() {
  ParamSet<T> set;
  stem_.collect(set, "stem");
  for (std::size_t i = 0; i < pcbs_.size(); ++i) {
    pcbs_[i].collect(set, "pcb" + std::to_string(i + 1));
  }
  for (std::size_t i = 0; i < head_.size(); ++i) {
    head_[i].collect(set, "head.up" + std::to_string(i + 1));
  }
  feb_.collect(set, "feb");
  fuse_.collect(set, "fuse");
  classifier_.collect(set, "classifier");
  return set;
}

template <typename T>
template <typename U>
void FesNet<T>::copy_from(FesNet<U>& other) {
  std::map<std::string, Tensor<U>*> source;
  for (auto& p : other.parameters().all()) source[p.name] = p.value;
  for (auto& p : parameters().all()) {
    auto it = source.find(p.name);
    if (it == source.end()) throw Error("copy_from: missing tensor " + p.name);
    if (it->second->shape() != p.value->shape()) {
      throw ShapeError("copy_from: tensor " + p.name + " has shape " +
                       shape_string(it->second->shape()) + ", expected " +
                       shape_string(p.value->shape()));
    }
    *p.value = it->second->template cast<T>();
  }
}

std::vector<ParameterRow> ParameterReport::per_layer() const {
  std::vector<ParameterRow> out;
  for (const auto& row : rows) {
    const auto dot = row.name.rfind('.');
    const std::string layer = row.name.substr(0, dot);
    if (out.empty() || out.back().name != layer ||
        out.back().trainable != row.trainable) {
      out.push_back({layer, {}, 0, row.trainable});
    }
    out.back().count += row.count;
  }
  return out;
}

template <typename T>
ParameterReport count_parameters(FesNet<T>& model) {
  ParameterReport report;
  ParamSet<T> set = model.parameters();
  for (const auto& p : set.trainable) {
    report.rows.push_back({p.name, p.value->shape(), p.value->size(), true});
    report.trainable += p.value->size();
  }
  for (const auto& p : set.buffers) {
    report.rows.push_back({p.name, p.value->shape(), p.value->size(), false});
    report.buffers += p.value->size();
  }
  return report;
}

template class PcbBlock<float>;
template class PcbBlock<double>;
template class FebBlock<float>;
template class FebBlock<double>;
template class FesNet<float>;
template class FesNet<double>;
template void FesNet<double>::copy_from(FesNet<float>&);
template void FesNet<float>::copy_from(FesNet<double>&);
template void FesNet<float>::copy_from(FesNet<float>&);
template void FesNet<double>::copy_from(FesNet<double>&);
template ParameterReport count_parameters(FesNet<float>&);
template ParameterReport count_parameters(FesNet<double>&);

}  // namespace fesnet
