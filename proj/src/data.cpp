#include "fesnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

namespace fesnet {

namespace fs = std::filesystem;

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::Drive: return "drive";
    case DatasetKind::Stare: return "stare";
    case DatasetKind::Chase: return "chase";
    case DatasetKind::Hrf: return "hrf";
  }
  return "?";
}

DatasetKind parse_dataset_kind(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "drive") return DatasetKind::Drive;
  if (t == "stare") return DatasetKind::Stare;
  if (t == "chase" || t == "chase_db1" || t == "chasedb1") return DatasetKind::Chase;
  if (t == "hrf") return DatasetKind::Hrf;
  throw DatasetError("unknown dataset '" + text + "' (expected drive|stare|chase|hrf)");
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "test") return Split::Test;
  throw DatasetError("unknown split '" + text + "' (expected train|test)");
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool supported_ext(const std::string& ext) {
  return ext == ".png" || ext == ".ppm" || ext == ".pgm";
}

bool convertible_ext(const std::string& ext) {
  return ext == ".tif" || ext == ".tiff" || ext == ".gif" || ext == ".jpg" ||
         ext == ".jpeg" || ext == ".bmp";
}

/// stem -> path for every supported image in `dir`.
std::map<std::string, fs::path> scan(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name.empty() || name[0] == '.') continue;
    const std::string ext = lower(e.path().extension().string());
    if (convertible_ext(ext)) {
      throw DatasetError(e.path().string() + ": " + ext +
                         " is not supported; convert to PNG first (see docs/datasets.md)");
    }
    if (!supported_ext(ext)) continue;
    const std::string stem = e.path().stem().string();
    if (!out.emplace(stem, e.path()).second) {
      throw DatasetError("two files share the stem '" + stem + "' in " + dir.string());
    }
  }
  return out;
}

std::size_t expected_count(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::Drive: return 40;
    case DatasetKind::Stare: return 20;
    case DatasetKind::Chase: return 28;
    case DatasetKind::Hrf: return 45;
  }
  return 0;
}

std::string hrf_category(const std::string& stem) {
  const auto us = stem.rfind('_');
  const std::string cat = us == std::string::npos ? "" : lower(stem.substr(us + 1));
  if (cat != "h" && cat != "g" && cat != "dr") {
    throw DatasetError("HRF image '" + stem +
                       "' lacks a category suffix (_h, _g or _dr)");
  }
  return cat;
}

}  // namespace

std::vector<DatasetEntry> list_dataset(const DatasetSpec& spec) {
  const fs::path images_dir = spec.root / "images";
  const fs::path masks_dir = spec.root / spec.mask_dir;
  const fs::path roi_dir = spec.root / "roi";
  if (!fs::is_directory(spec.root)) {
    throw DatasetError("dataset root " + spec.root.string() + " does not exist");
  }
  if (!fs::is_directory(images_dir)) {
    throw DatasetError("missing directory " + images_dir.string());
  }
  if (!fs::is_directory(masks_dir)) {
    throw DatasetError("missing directory " + masks_dir.string());
  }
  const auto images = scan(images_dir);
  const auto masks = scan(masks_dir);
  const bool has_roi = fs::is_directory(roi_dir);
  const auto rois = has_roi ? scan(roi_dir) : std::map<std::string, fs::path>{};

  std::vector<DatasetEntry> entries;
  for (const auto& [stem, path] : images) {
    auto m = masks.find(stem);
    if (m == masks.end()) {
      throw DatasetError("image " + path.string() + " has no mask in " +
                         masks_dir.string());
    }
    DatasetEntry e{stem, Split::Train, path, m->second, std::nullopt};
    if (has_roi) {
      auto r = rois.find(stem);
      if (r == rois.end()) {
        throw DatasetError("image " + path.string() + " has no ROI in " +
                           roi_dir.string());
      }
      e.roi = r->second;
    }
    entries.push_back(std::move(e));
  }
  for (const auto& [stem, path] : masks) {
    if (!images.contains(stem)) {
      throw DatasetError("mask " + path.string() + " has no matching image");
    }
  }
  for (const auto& [stem, path] : rois) {
    if (!images.contains(stem)) {
      throw DatasetError("ROI " + path.string() + " has no matching image");
    }
  }

  const std::size_t n = entries.size();
  if (n == 0) throw DatasetError("no images found in " + images_dir.string());
  if (spec.check_counts && n != expected_count(spec.kind)) {
    throw DatasetError(to_string(spec.kind) + " expects " +
                       std::to_string(expected_count(spec.kind)) + " images, found " +
                       std::to_string(n) + " in " + images_dir.string());
  }

  switch (spec.kind) {
    case DatasetKind::Drive:
      for (std::size_t i = 0; i < n; ++i) {
        entries[i].split = i < n / 2 ? Split::Test : Split::Train;
      }
      break;
    case DatasetKind::Stare:
      for (std::size_t i = 0; i < n; ++i) {
        entries[i].split = i < n / 2 ? Split::Train : Split::Test;
      }
      break;
    case DatasetKind::Chase: {
      const std::size_t train = spec.check_counts ? 20 : (n * 20 + 14) / 28;
      for (std::size_t i = 0; i < n; ++i) {
        entries[i].split = i < train ? Split::Train : Split::Test;
      }
      break;
    }
    case DatasetKind::Hrf: {
      std::map<std::string, std::size_t> seen;
      for (auto& e : entries) {
        const std::size_t k = seen[hrf_category(e.id)]++;
        e.split = k < spec.hrf_train_per_category ? Split::Train : Split::Test;
      }
      break;
    }
  }
  return entries;
}

Tensor<float> binarize(const Image8& image, const fs::path& path) {
  Tensor<float> out({1, 1, image.height, image.width});
  for (std::size_t i = 0; i < image.width * image.height; ++i) {
    const std::uint8_t v = image.pixels[i * image.channels];
    for (std::size_t c = 1; c < image.channels; ++c) {
      if (image.pixels[i * image.channels + c] != v) {
        throw DatasetError(path.string() +
                           ": mask is not grayscale, so it cannot be binarised");
      }
    }
    out[i] = v > 127 ? 1.0f : 0.0f;
  }
  return out;
}

Sample load_sample(const DatasetEntry& entry) {
  Sample s;
  s.id = entry.id;
  s.split = entry.split;
  const Image8 img = read_image(entry.image);
  if (img.channels == 3) {
    s.image = image_to_tensor(img);
  } else {
    const Tensor<float> gray = image_to_tensor(img);
    s.image = Tensor<float>({1, 3, img.height, img.width});
    for (std::size_t c = 0; c < 3; ++c) {
      std::copy(gray.ptr(), gray.ptr() + gray.size(), s.image.plane_ptr(0, c));
    }
  }
  auto load_binary = [&](const fs::path& path) {
    const Image8 m = read_image(path);
    if (m.width != img.width || m.height != img.height) {
      throw DatasetError(path.string() + " is " + std::to_string(m.width) + "x" +
                         std::to_string(m.height) + " but its image is " +
                         std::to_string(img.width) + "x" + std::to_string(img.height));
    }
    return binarize(m, path);
  };
  s.mask = load_binary(entry.mask);
  if (entry.roi) s.roi = load_binary(*entry.roi);
  s.valid = Tensor<float>({1, 1, img.height, img.width}, 1.0f);
  s.source_height = s.content_height = img.height;
  s.source_width = s.content_width = img.width;
  return s;
}

std::vector<Sample> load_dataset(const DatasetSpec& spec) {
  std::vector<Sample> out;
  for (const auto& e : list_dataset(spec)) out.push_back(load_sample(e));
  return out;
}

std::vector<Sample> load_dataset(const DatasetSpec& spec, Split split) {
  std::vector<Sample> out;
  for (const auto& e : list_dataset(spec)) {
    if (e.split == split) out.push_back(load_sample(e));
  }
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& x, std::size_t out_h,
                              std::size_t out_w) {
  require_4d(x, "resize input");
  const std::size_t h = x.height(), w = x.width();
  if (h == out_h && w == out_w) return x;
  Tensor<float> y({x.batch(), x.channels(), out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  std::vector<std::size_t> x0(out_w), x1(out_w);
  std::vector<double> fx(out_w);
  for (std::size_t j = 0; j < out_w; ++j) {
    const double s = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0,
                                static_cast<double>(w - 1));
    x0[j] = static_cast<std::size_t>(s);
    x1[j] = std::min(x0[j] + 1, w - 1);
    fx[j] = s - static_cast<double>(x0[j]);
  }
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const float* src = x.plane_ptr(n, c);
      float* dst = y.plane_ptr(n, c);
      for (std::size_t i = 0; i < out_h; ++i) {
        const double s = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0,
                                    static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(s);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double fy = s - static_cast<double>(y0);
        const float* r0 = src + y0 * w;
        const float* r1 = src + y1 * w;
        for (std::size_t j = 0; j < out_w; ++j) {
          const double top = r0[x0[j]] + fx[j] * (r0[x1[j]] - r0[x0[j]]);
          const double bot = r1[x0[j]] + fx[j] * (r1[x1[j]] - r1[x0[j]]);
          dst[i * out_w + j] = static_cast<float>(top + fy * (bot - top));
        }
      }
    }
  }
  return y;
}

Tensor<float> resize_nearest(const Tensor<float>& x, std::size_t out_h,
                             std::size_t out_w) {
  require_4d(x, "resize input");
  const std::size_t h = x.height(), w = x.width();
  if (h == out_h && w == out_w) return x;
  Tensor<float> y({x.batch(), x.channels(), out_h, out_w});
  auto src_index = [](std::size_t i, std::size_t in, std::size_t out) {
    const auto s = static_cast<std::size_t>((static_cast<double>(i) + 0.5) *
                                            static_cast<double>(in) /
                                            static_cast<double>(out));
    return std::min(s, in - 1);
  };
  std::vector<std::size_t> xs(out_w);
  for (std::size_t j = 0; j < out_w; ++j) xs[j] = src_index(j, w, out_w);
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const float* src = x.plane_ptr(n, c);
      float* dst = y.plane_ptr(n, c);
      for (std::size_t i = 0; i < out_h; ++i) {
        const float* row = src + src_index(i, h, out_h) * w;
        for (std::size_t j = 0; j < out_w; ++j) dst[i * out_w + j] = row[xs[j]];
      }
    }
  }
  return y;
}

Tensor<float> pad_to(const Tensor<float>& x, std::size_t out_h, std::size_t out_w) {
  require_4d(x, "pad input");
  if (out_h < x.height() || out_w < x.width()) {
    throw ShapeError("cannot pad " + shape_string(x.shape()) + " down to " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  if (out_h == x.height() && out_w == x.width()) return x;
  Tensor<float> y({x.batch(), x.channels(), out_h, out_w});
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const float* src = x.plane_ptr(n, c);
      float* dst = y.plane_ptr(n, c);
      for (std::size_t i = 0; i < x.height(); ++i) {
        std::copy(src + i * x.width(), src + (i + 1) * x.width(), dst + i * out_w);
      }
    }
  }
  return y;
}

Tensor<float> crop_to(const Tensor<float>& x, std::size_t out_h, std::size_t out_w) {
  require_4d(x, "crop input");
  if (out_h > x.height() || out_w > x.width()) {
    throw ShapeError("cannot crop " + shape_string(x.shape()) + " to " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  if (out_h == x.height() && out_w == x.width()) return x;
  Tensor<float> y({x.batch(), x.channels(), out_h, out_w});
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const float* src = x.plane_ptr(n, c);
      float* dst = y.plane_ptr(n, c);
      for (std::size_t i = 0; i < out_h; ++i) {
        std::copy(src + i * x.width(), src + i * x.width() + out_w, dst + i * out_w);
      }
    }
  }
  return y;
}

std::size_t scaled_height(std::size_t h, std::size_t w, std::size_t target_width) {
  const auto v = std::llround(static_cast<double>(h) * static_cast<double>(target_width) /
                              static_cast<double>(w));
  return static_cast<std::size_t>(std::max<long long>(1, v));
}

std::size_t round_up(std::size_t v, std::size_t multiple) {
  return (v + multiple - 1) / multiple * multiple;
}

Sample resize_and_pad(const Sample& s, std::size_t target_width, std::size_t multiple) {
  if (target_width == 0 || multiple == 0) {
    throw Error("target width and multiple must be positive");
  }
  const std::size_t h = scaled_height(s.height(), s.width(), target_width);
  const std::size_t ph = round_up(h, multiple), pw = round_up(target_width, multiple);
  Sample out = s;
  out.image = pad_to(resize_bilinear(s.image, h, target_width), ph, pw);
  out.mask = pad_to(resize_nearest(s.mask, h, target_width), ph, pw);
  if (s.roi) out.roi = pad_to(resize_nearest(*s.roi, h, target_width), ph, pw);
  out.valid = pad_to(resize_nearest(s.valid, h, target_width), ph, pw);
  out.content_height = h;
  out.content_width = target_width;
  return out;
}

void zscore_normalize(Tensor<float>& image, const Tensor<float>* valid,
                      bool per_channel) {
  require_4d(image, "image");
  const std::size_t plane = image.plane();
  if (valid && (valid->height() != image.height() || valid->width() != image.width() ||
                valid->batch() != image.batch())) {
    throw ShapeError("valid mask " + shape_string(valid->shape()) +
                     " does not match image " + shape_string(image.shape()));
  }
  auto inside = [&](std::size_t n, std::size_t i) {
    return !valid || valid->plane_ptr(n, 0)[i] > 0.5f;
  };
  for (std::size_t n = 0; n < image.batch(); ++n) {
    const std::size_t groups = per_channel ? image.channels() : 1;
    const std::size_t span = per_channel ? 1 : image.channels();
    for (std::size_t g = 0; g < groups; ++g) {
      double sum = 0.0, sq = 0.0;
      std::size_t count = 0;
      for (std::size_t c = g; c < g + span; ++c) {
        const float* p = image.plane_ptr(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          if (!inside(n, i)) continue;
          sum += p[i];
          ++count;
        }
      }
      const double mean = count ? sum / static_cast<double>(count) : 0.0;
      for (std::size_t c = g; c < g + span; ++c) {
        const float* p = image.plane_ptr(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          if (!inside(n, i)) continue;
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      const double std =
          std::max(count ? std::sqrt(sq / static_cast<double>(count)) : 0.0, 1e-6);
      for (std::size_t c = g; c < g + span; ++c) {
        float* p = image.plane_ptr(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          p[i] = inside(n, i) ? static_cast<float>((p[i] - mean) / std) : 0.0f;
        }
      }
    }
  }
}

namespace {

Tensor<float> flip(const Tensor<float>& x, bool horizontal) {
  Tensor<float> y(x.shape());
  const std::size_t h = x.height(), w = x.width();
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const float* src = x.plane_ptr(n, c);
      float* dst = y.plane_ptr(n, c);
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          dst[i * w + j] = horizontal ? src[i * w + (w - 1 - j)] : src[(h - 1 - i) * w + j];
        }
      }
    }
  }
  return y;
}

Sample map_all(const Sample& s, const auto& fn_image, const auto& fn_label) {
  Sample out = s;
  out.image = fn_image(s.image);
  out.mask = fn_label(s.mask);
  if (s.roi) out.roi = fn_label(*s.roi);
  out.valid = fn_label(s.valid);
  return out;
}

}  // namespace

Sample flip_horizontal(const Sample& s) {
  auto f = [](const Tensor<float>& t) { return flip(t, true); };
  return map_all(s, f, f);
}

Sample flip_vertical(const Sample& s) {
  auto f = [](const Tensor<float>& t) { return flip(t, false); };
  return map_all(s, f, f);
}

Sample rotate(const Sample& s, double degrees) {
  const std::size_t h = s.height(), w = s.width();
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  // Source coordinate of every output pixel (inverse rotation).
  std::vector<double> src_y(h * w), src_x(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double dy = static_cast<double>(i) - cy;
      const double dx = static_cast<double>(j) - cx;
      src_x[i * w + j] = cx + cs * dx - sn * dy;
      src_y[i * w + j] = cy + sn * dx + cs * dy;
    }
  }
  auto nearest_index = [&](std::size_t k, std::size_t& out) {
    const double ry = std::round(src_y[k]), rx = std::round(src_x[k]);
    if (ry < 0 || rx < 0 || ry > static_cast<double>(h - 1) ||
        rx > static_cast<double>(w - 1)) {
      return false;
    }
    out = static_cast<std::size_t>(ry) * w + static_cast<std::size_t>(rx);
    return true;
  };
  auto rot_nearest = [&](const Tensor<float>& t) {
    Tensor<float> y(t.shape());
    for (std::size_t n = 0; n < t.batch(); ++n) {
      for (std::size_t c = 0; c < t.channels(); ++c) {
        const float* src = t.plane_ptr(n, c);
        float* dst = y.plane_ptr(n, c);
        for (std::size_t k = 0; k < h * w; ++k) {
          std::size_t idx;
          if (nearest_index(k, idx)) dst[k] = src[idx];
        }
      }
    }
    return y;
  };
  auto rot_bilinear = [&](const Tensor<float>& t) {
    Tensor<float> y(t.shape());
    for (std::size_t n = 0; n < t.batch(); ++n) {
      for (std::size_t c = 0; c < t.channels(); ++c) {
        const float* src = t.plane_ptr(n, c);
        float* dst = y.plane_ptr(n, c);
        for (std::size_t k = 0; k < h * w; ++k) {
          std::size_t idx;
          if (!nearest_index(k, idx)) continue;
          const double sy = std::clamp(src_y[k], 0.0, static_cast<double>(h - 1));
          const double sx = std::clamp(src_x[k], 0.0, static_cast<double>(w - 1));
          const auto y0 = static_cast<std::size_t>(sy);
          const auto x0 = static_cast<std::size_t>(sx);
          const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double fy = sy - static_cast<double>(y0);
          const double fx = sx - static_cast<double>(x0);
          const double top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
          const double bot = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
          dst[k] = static_cast<float>(top + fy * (bot - top));
        }
      }
    }
    return y;
  };
  return map_all(s, rot_bilinear, rot_nearest);
}

Sample augment(const Sample& s, const AugmentConfig& config, Rng& rng) {
  const double contrast = rng.uniform(config.contrast_lo, config.contrast_hi);
  const double brightness = rng.uniform(config.brightness_lo, config.brightness_hi);
  const bool hflip = rng.bernoulli(config.hflip_p);
  const bool vflip = rng.bernoulli(config.vflip_p);
  const double angle = rng.uniform(config.rotate_lo, config.rotate_hi);

  Sample out = s;
  const std::size_t plane = out.image.plane();
  for (std::size_t c = 0; c < out.image.channels(); ++c) {
    float* p = out.image.plane_ptr(0, c);
    const float* v = out.valid.plane_ptr(0, 0);
    for (std::size_t i = 0; i < plane; ++i) {
      if (v[i] > 0.5f) p[i] = static_cast<float>(p[i] * contrast + brightness);
    }
  }
  if (hflip) out = flip_horizontal(out);
  if (vflip) out = flip_vertical(out);
  if (config.rotate) out = rotate(out, angle);
  return out;
}

Sample random_crop(const Sample& s, std::size_t size, Rng& rng) {
  if (s.height() < size || s.width() < size) {
    throw ShapeError("cannot take a " + std::to_string(size) + "x" +
                     std::to_string(size) + " crop from a " +
                     std::to_string(s.height()) + "x" + std::to_string(s.width()) +
                     " sample");
  }
  const std::size_t oy = rng.below(s.height() - size + 1);
  const std::size_t ox = rng.below(s.width() - size + 1);
  auto cut = [&](const Tensor<float>& t) {
    Tensor<float> y({t.batch(), t.channels(), size, size});
    for (std::size_t n = 0; n < t.batch(); ++n) {
      for (std::size_t c = 0; c < t.channels(); ++c) {
        const float* src = t.plane_ptr(n, c);
        float* dst = y.plane_ptr(n, c);
        for (std::size_t i = 0; i < size; ++i) {
          const float* row = src + (oy + i) * t.width() + ox;
          std::copy(row, row + size, dst + i * size);
        }
      }
    }
    return y;
  };
  Sample out = map_all(s, cut, cut);
  out.content_height = out.content_width = size;
  return out;
}

Sample preprocess(const Sample& raw, const PreprocessConfig& config) {
  Sample s = resize_and_pad(raw, config.target_width, config.multiple);
  zscore_normalize(s.image, &s.valid, config.per_channel_zscore);
  return s;
}

}  // namespace fesnet
