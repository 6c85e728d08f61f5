#include "fesnet/eval.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace fesnet {

Tensor<float> predict_probabilities(FesNet<float>& model, const Sample& raw,
                                    const PreprocessConfig& config) {
  const Sample s = preprocess(raw, config);
  const Mode previous = model.mode();
  model.set_mode(Mode::Inference);
  Tensor<float> probs = model.forward(s.image);
  model.set_mode(previous);
  probs = crop_to(probs, s.content_height, s.content_width);
  return resize_bilinear(probs, raw.height(), raw.width());
}

Predictor model_predictor(FesNet<float>& model, const PreprocessConfig& config) {
  return [&model, config](const Sample& raw) {
    return predict_probabilities(model, raw, config);
  };
}

Predictor oracle_predictor() {
  return [](const Sample& raw) {
    Tensor<float> probs({1, 2, raw.height(), raw.width()});
    for (std::size_t i = 0; i < raw.mask.size(); ++i) {
      probs.plane_ptr(0, 1)[i] = raw.mask[i];
      probs.plane_ptr(0, 0)[i] = 1.0f - raw.mask[i];
    }
    return probs;
  };
}

Predictor background_predictor() {
  return [](const Sample& raw) {
    Tensor<float> probs({1, 2, raw.height(), raw.width()});
    std::fill(probs.plane_ptr(0, 0), probs.plane_ptr(0, 0) + probs.plane(), 1.0f);
    return probs;
  };
}

Tensor<float> argmax_mask(const Tensor<float>& probs) {
  require_4d(probs, "probabilities");
  if (probs.channels() != 2) {
    throw ShapeError("expected 2-channel probabilities, got " + shape_string(probs.shape()));
  }
  Tensor<float> mask({probs.batch(), 1, probs.height(), probs.width()});
  for (std::size_t n = 0; n < probs.batch(); ++n) {
    const float* bg = probs.plane_ptr(n, 0);
    const float* fg = probs.plane_ptr(n, 1);
    float* m = mask.plane_ptr(n, 0);
    for (std::size_t i = 0; i < probs.plane(); ++i) m[i] = fg[i] > bg[i] ? 1.0f : 0.0f;
  }
  return mask;
}

Tensor<float> vessel_channel(const Tensor<float>& probs) {
  require_4d(probs, "probabilities");
  Tensor<float> out({probs.batch(), 1, probs.height(), probs.width()});
  for (std::size_t n = 0; n < probs.batch(); ++n) {
    std::copy(probs.plane_ptr(n, 1), probs.plane_ptr(n, 1) + probs.plane(),
              out.plane_ptr(n, 0));
  }
  return out;
}

EvalResult evaluate(const Predictor& predictor, const std::vector<Sample>& samples,
                    const EvalOptions& options) {
  if (samples.empty()) throw Error("evaluate: no samples");
  EvalResult result;
  std::vector<ConfusionCounts> counts;
  std::vector<RocHistogram> roc;
  for (const auto& s : samples) {
    const Tensor<float> probs = predictor(s);
    if (probs.height() != s.height() || probs.width() != s.width() ||
        probs.channels() != 2) {
      throw ShapeError("predictor returned " + shape_string(probs.shape()) +
                       " for sample " + s.id + " of extent " +
                       std::to_string(s.height()) + "x" + std::to_string(s.width()));
    }
    const Tensor<float> pred = argmax_mask(probs);
    const Tensor<float>* roi = options.use_roi && s.roi ? &*s.roi : nullptr;
    const ConfusionCounts c = confusion_counts(pred, s.mask, roi);
    RocHistogram h;
    h.add(vessel_channel(probs), s.mask, roi);
    MetricReport r = compute_metrics(c);
    r.roc_auc = h.auc();
    result.images.push_back({s.id, c, r});
    counts.push_back(c);
    roc.push_back(h);
    if (!options.overlay_dir.empty()) {
      write_png(options.overlay_dir / (s.id + "_overlay.png"),
                render_overlay(pred, s.mask, roi));
    }
  }
  result.report = aggregate(counts, options.aggregation, &roc);
  return result;
}

std::string format_eval_kv(const EvalResult& result) {
  std::string out;
  for (const auto& img : result.images) {
    out += format_metric_kv("image." + img.id, img.report);
  }
  out += format_metric_kv("aggregate", result.report);
  return out;
}

void write_npy(const std::filesystem::path& path, const Tensor<float>& t) {
  require_4d(t, "npy tensor");
  if (t.batch() != 1) throw ShapeError("write_npy expects batch 1");
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" +
                       std::to_string(t.channels()) + ", " + std::to_string(t.height()) +
                       ", " + std::to_string(t.width()) + "), }";
  // Magic (6) + version (2) + length (2) + header, padded to 64 with '\n' last.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out << header;
  std::string payload(4 * t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) {
      payload[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error("write failed for " + path.string());
}

Image8 mask_to_image(const Tensor<float>& mask) {
  require_4d(mask, "mask");
  Image8 img(mask.width(), mask.height(), 1);
  for (std::size_t i = 0; i < mask.plane(); ++i) {
    img.pixels[i] = mask.plane_ptr(0, 0)[i] > 0.5f ? 255 : 0;
  }
  return img;
}

}  // namespace fesnet
