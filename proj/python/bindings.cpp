#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fesnet/checkpoint.hpp"
#include "fesnet/eval.hpp"
#include "fesnet/gradcheck.hpp"
#include "fesnet/metrics.hpp"
#include "fesnet/synthetic.hpp"
#include "fesnet/train.hpp"

namespace py = pybind11;
using namespace fesnet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  Array<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.ptr(), t.ptr() + t.size(), out.mutable_data());
  return out;
}

py::object opt(const std::optional<double>& v) {
  return v ? py::cast(*v) : py::none();
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["tp"] = r.counts.tp;
  d["tn"] = r.counts.tn;
  d["fp"] = r.counts.fp;
  d["fn"] = r.counts.fn;
  d["se"] = opt(r.se);
  d["sp"] = opt(r.sp);
  d["acc"] = opt(r.acc);
  d["auc_eq5"] = opt(r.auc_eq5);
  d["roc_auc"] = opt(r.roc_auc);
  d["f1"] = opt(r.f1);
  return d;
}

/// H x W array -> 1x1xHxW tensor.
Tensor<float> map2d(const Array<float>& a, const char* what) {
  if (a.ndim() != 2) throw ShapeError(std::string(what) + " must be a 2-D array");
  return Tensor<float>({1, 1, static_cast<std::size_t>(a.shape(0)),
                        static_cast<std::size_t>(a.shape(1))},
                       std::vector<float>(a.data(), a.data() + a.size()));
}

FesNetConfig make_config(const std::array<int, 4>& channels, const std::string& wiring,
                         int dilation) {
  FesNetConfig c;
  c.pcb_channels = channels;
  c.wiring = parse_pcb_wiring(wiring);
  c.down_dilation = dilation;
  c.validate();
  return c;
}

/// float32 model with convenience I/O for Python.
class PyModel {
 public:
  explicit PyModel(FesNet<float> m, CheckpointMeta meta = {})
      : model_(std::move(m)), meta_(std::move(meta)) {}

  Array<float> forward(const Array<float>& image, bool train) {
    model_.set_mode(train ? Mode::Train : Mode::Inference);
    return to_array(model_.forward(to_tensor(image)));
  }

  /// H x W x 3 (or H x W) uint8 image at any size -> 2 x H x W probabilities.
  Array<float> predict(const Array<std::uint8_t>& image) {
    if (image.ndim() != 2 && image.ndim() != 3) {
      throw ShapeError("image must be H x W or H x W x C");
    }
    Image8 img(static_cast<std::size_t>(image.shape(1)),
               static_cast<std::size_t>(image.shape(0)),
               image.ndim() == 3 ? static_cast<std::size_t>(image.shape(2)) : 1);
    if (img.channels != 1 && img.channels != 3) throw ShapeError("image needs 1 or 3 channels");
    std::copy(image.data(), image.data() + image.size(), img.pixels.begin());
    Sample raw;
    raw.image = Tensor<float>({1, 3, img.height, img.width});
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < img.width * img.height; ++i) {
        raw.image.plane_ptr(0, c)[i] =
            img.pixels[i * img.channels + (img.channels == 3 ? c : 0)];
      }
    }
    raw.mask = Tensor<float>({1, 1, img.height, img.width});
    raw.valid = Tensor<float>({1, 1, img.height, img.width}, 1.0f);
    raw.source_height = raw.content_height = img.height;
    raw.source_width = raw.content_width = img.width;
    PreprocessConfig pc;
    pc.target_width = static_cast<std::size_t>(meta_.target_width);
    pc.per_channel_zscore = meta_.per_channel_zscore;
    Tensor<float> probs = predict_probabilities(model_, raw, pc);
    return to_array(probs).attr("reshape")(2, img.height, img.width).cast<Array<float>>();
  }

  void save(const std::string& path) { save_checkpoint(make_checkpoint(model_, meta_), path); }

  std::size_t parameter_count() { return count_parameters(model_).trainable; }

  py::list parameter_table() {
    py::list rows;
    for (const auto& r : count_parameters(model_).per_layer()) {
      if (r.trainable) rows.append(py::make_tuple(r.name, r.count));
    }
    return rows;
  }

  py::dict activation_channels() {
    const auto& a = model_.activations();
    py::dict d;
    d["f_i"] = a.f_i.empty() ? 0 : a.f_i.channels();
    d["f_d"] = a.f_d.empty() ? 0 : a.f_d.channels();
    d["f_us"] = a.f_us.empty() ? 0 : a.f_us.channels();
    d["f_e"] = a.f_e.empty() ? 0 : a.f_e.channels();
    d["s_c"] = a.s_c.empty() ? 0 : a.s_c.channels();
    return d;
  }

 private:
  FesNet<float> model_;
  CheckpointMeta meta_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "FES-Net kernels, model, metrics and data utilities";

  py::register_exception<Error>(m, "FesnetError", PyExc_ValueError);

  m.def(
      "conv2d",
      [](const Array<double>& x, const Array<double>& w, const Array<double>& b, int stride,
         int padding, int dilation, bool depthwise) {
        if (w.ndim() != 4) throw ShapeError("weight must be 4-D");
        const int in_ch = static_cast<int>(x.ndim() == 4 ? x.shape(1) : 0);
        ConvSpec spec{static_cast<int>(w.shape(2)), static_cast<int>(w.shape(3)), stride,
                      dilation, padding, in_ch,
                      depthwise ? in_ch : static_cast<int>(w.shape(0)), depthwise};
        return to_array(conv2d(to_tensor(x), to_tensor(w), to_tensor(b), spec));
      },
      py::arg("x"), py::arg("w"), py::arg("b"), py::arg("stride") = 1,
      py::arg("padding") = 0, py::arg("dilation") = 1, py::arg("depthwise") = false,
      "NCHW convolution in float64.");

  m.def(
      "transposed_conv2d",
      [](const Array<double>& x, const Array<double>& w, const Array<double>& b, int stride) {
        return to_array(transposed_conv2d(to_tensor(x), to_tensor(w), to_tensor(b), stride));
      },
      py::arg("x"), py::arg("w"), py::arg("b"), py::arg("stride"),
      "Transposed convolution; weight layout (in, out, k, k).");

  m.def(
      "softmax_channels",
      [](const Array<double>& x) { return to_array(softmax_channels(to_tensor(x))); },
      py::arg("logits"));

  m.def(
      "cross_entropy",
      [](const Array<double>& probs, const Array<double>& target) {
        auto r = cross_entropy_loss(to_tensor(probs), to_tensor(target));
        return py::make_tuple(r.loss, to_array(r.dlogits));
      },
      py::arg("probs"), py::arg("target"), "Returns (loss, dlogits).");

  m.def(
      "lr_schedule",
      [](std::int64_t epoch, double lr0, double decay) {
        TrainConfig c;
        c.lr0 = lr0;
        c.lr_decay = decay;
        return lr_schedule(c, epoch);
      },
      py::arg("epoch"), py::arg("lr0") = 2e-5, py::arg("decay") = 0.9);

  m.def(
      "compute_metrics",
      [](std::uint64_t tp, std::uint64_t tn, std::uint64_t fp, std::uint64_t fn) {
        return report_dict(compute_metrics({tp, tn, fp, fn}));
      },
      py::arg("tp"), py::arg("tn"), py::arg("fp"), py::arg("fn"),
      "Se, Sp, Acc, AUC (threshold point) and F1; undefined metrics are None.");

  m.def(
      "confusion_counts",
      [](const Array<float>& pred, const Array<float>& gt, std::optional<Array<float>> roi) {
        const Tensor<float> r = roi ? map2d(*roi, "roi") : Tensor<float>();
        const ConfusionCounts c =
            confusion_counts(map2d(pred, "pred"), map2d(gt, "gt"), roi ? &r : nullptr);
        return py::dict(py::arg("tp") = c.tp, py::arg("tn") = c.tn, py::arg("fp") = c.fp,
                        py::arg("fn") = c.fn);
      },
      py::arg("pred"), py::arg("gt"), py::arg("roi") = py::none());

  m.def(
      "render_overlay",
      [](const Array<float>& pred, const Array<float>& gt) {
        const Image8 img = render_overlay(map2d(pred, "pred"), map2d(gt, "gt"));
        py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(img.height),
                                       static_cast<py::ssize_t>(img.width),
                                       py::ssize_t{3}});
        std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
        return out;
      },
      py::arg("pred"), py::arg("gt"), "H x W x 3 uint8: TP green, FP red, FN blue.");

  m.def(
      "scaled_shape",
      [](std::size_t h, std::size_t w, std::size_t width, std::size_t multiple) {
        const std::size_t sh = scaled_height(h, w, width);
        return py::make_tuple(sh, width, round_up(sh, multiple), round_up(width, multiple));
      },
      py::arg("height"), py::arg("width"), py::arg("target_width") = 640,
      py::arg("multiple") = 16,
      "(scaled_h, scaled_w, padded_h, padded_w) for the resize-and-pad rule.");

  m.def(
      "synthetic_sample",
      [](const std::string& id, std::size_t h, std::size_t w, std::uint64_t seed) {
        const Sample s = make_synthetic_sample(id, h, w, seed);
        py::array_t<std::uint8_t> img({static_cast<py::ssize_t>(h),
                                       static_cast<py::ssize_t>(w), py::ssize_t{3}});
        auto* p = img.mutable_data();
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t i = 0; i < h * w; ++i) {
            p[i * 3 + c] = static_cast<std::uint8_t>(s.image.plane_ptr(0, c)[i]);
          }
        }
        auto mask = to_array(s.mask).attr("reshape")(h, w);
        auto roi = to_array(*s.roi).attr("reshape")(h, w);
        return py::make_tuple(img, mask, roi);
      },
      py::arg("id"), py::arg("height"), py::arg("width"), py::arg("seed") = 0,
      "(image uint8 HxWx3, mask HxW, roi HxW) fundus-like test data.");

  m.def(
      "write_synthetic_dataset",
      [](const std::string& root, const std::string& kind, std::size_t h, std::size_t w,
         std::uint64_t seed) {
        write_synthetic_dataset(root, parse_dataset_kind(kind), h, w, seed);
      },
      py::arg("root"), py::arg("kind"), py::arg("height"), py::arg("width"),
      py::arg("seed") = 0);

  m.def(
      "dataset_splits",
      [](const std::string& root, const std::string& kind) {
        DatasetSpec spec;
        spec.root = root;
        spec.kind = parse_dataset_kind(kind);
        py::dict out;
        py::list train, test;
        for (const auto& e : list_dataset(spec)) (e.split == Split::Train ? train : test).append(e.id);
        out["train"] = train;
        out["test"] = test;
        return out;
      },
      py::arg("root"), py::arg("kind"));

  m.def(
      "gradcheck_suite",
      [](std::uint64_t seed) {
        py::list rows;
        for (const auto& c : run_gradcheck_suite(seed)) {
          py::dict d;
          d["name"] = c.name;
          d["max_relative_error"] = c.result.max_relative_error;
          d["tolerance"] = c.tolerance;
          d["passed"] = c.passed();
          rows.append(d);
        }
        return rows;
      },
      py::arg("seed") = 1, "64-bit finite-difference checks (takes ~15 s).");

  py::class_<PyModel>(m, "Model")
      .def(py::init([](std::uint64_t seed, std::array<int, 4> channels,
                       const std::string& wiring, int dilation) {
             FesNet<float> net(make_config(channels, wiring, dilation));
             net.init(seed);
             return PyModel(std::move(net));
           }),
           py::arg("seed") = 0, py::arg("channels") = std::array<int, 4>{16, 32, 64, 128},
           py::arg("wiring") = "sequential", py::arg("dilation") = 1)
      .def_static(
          "load",
          [](const std::string& path) {
            const Checkpoint c = read_checkpoint(path);
            return PyModel(model_from_checkpoint(c), c.meta);
          },
          py::arg("path"))
      .def("forward", &PyModel::forward, py::arg("image"), py::arg("train") = false,
           "N x 3 x H x W float32 (H, W multiples of 16) -> N x 2 x H x W probabilities.")
      .def("predict", &PyModel::predict, py::arg("image"),
           "Raw uint8 image of any size -> 2 x H x W probabilities at that size.")
      .def("save", &PyModel::save, py::arg("path"))
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def("parameter_table", &PyModel::parameter_table)
      .def("activation_channels", &PyModel::activation_channels);
}
