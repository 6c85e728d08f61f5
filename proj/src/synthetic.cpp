#include "fesnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace fesnet {

namespace fs = std::filesystem;

Sample make_synthetic_sample(const std::string& id, std::size_t height,
                             std::size_t width, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, id);
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  const double cy = (h - 1) / 2, cx = (w - 1) / 2;
  const double radius = 0.48 * std::min(h, w);

  Sample s;
  s.id = id;
  s.image = Tensor<float>({1, 3, height, width});
  s.mask = Tensor<float>({1, 1, height, width});
  s.roi = Tensor<float>({1, 1, height, width});
  s.valid = Tensor<float>({1, 1, height, width}, 1.0f);
  s.source_height = s.content_height = height;
  s.source_width = s.content_width = width;

  std::vector<float> vessel(height * width, 0.0f);
  const int curves = 4 + static_cast<int>(std::max(h, w) / 16);
  for (int k = 0; k < curves; ++k) {
    double y = cy + rng.uniform(-0.6, 0.6) * radius;
    double x = cx + rng.uniform(-0.6, 0.6) * radius;
    double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double thick = rng.uniform(0.6, 1.6);
    const double depth = rng.uniform(0.6, 1.0);
    const auto len = static_cast<int>(rng.uniform(0.6, 1.4) * radius);
    for (int t = 0; t < len; ++t) {
      dir += rng.uniform(-0.25, 0.25);
      y += std::sin(dir);
      x += std::cos(dir);
      const int r = static_cast<int>(std::ceil(thick));
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int py = static_cast<int>(std::lround(y)) + dy;
          const int px = static_cast<int>(std::lround(x)) + dx;
          if (py < 0 || px < 0 || py >= static_cast<int>(height) ||
              px >= static_cast<int>(width)) {
            continue;
          }
          if (dy * dy + dx * dx > thick * thick) continue;
          float& v = vessel[static_cast<std::size_t>(py) * width + static_cast<std::size_t>(px)];
          v = std::max(v, static_cast<float>(depth));
        }
      }
    }
  }

  const double base[3] = {170.0, 90.0, 45.0};
  const double drop[3] = {45.0, 50.0, 15.0};
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t p = i * width + j;
      const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
      const double rr = std::sqrt(dy * dy + dx * dx) / radius;
      const bool inside = rr <= 1.0;
      s.roi->plane_ptr(0, 0)[p] = inside ? 1.0f : 0.0f;
      s.mask.plane_ptr(0, 0)[p] = inside && vessel[p] > 0.0f ? 1.0f : 0.0f;
      for (std::size_t c = 0; c < 3; ++c) {
        double v = 0.0;
        if (inside) {
          const double shade = 1.0 - 0.35 * rr * rr;
          v = base[c] * shade - drop[c] * vessel[p] + rng.normal() * 6.0;
        }
        s.image.plane_ptr(0, c)[p] = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  }
  return s;
}

namespace {

std::vector<std::string> synthetic_stems(DatasetKind kind) {
  std::vector<std::string> stems;
  char buf[32];
  switch (kind) {
    case DatasetKind::Drive:
      for (int i = 1; i <= 40; ++i) {
        std::snprintf(buf, sizeof buf, "%02d_%s", i, i <= 20 ? "test" : "training");
        stems.push_back(buf);
      }
      break;
    case DatasetKind::Stare:
      for (int i = 1; i <= 20; ++i) {
        std::snprintf(buf, sizeof buf, "im%04d", i);
        stems.push_back(buf);
      }
      break;
    case DatasetKind::Chase:
      for (int i = 1; i <= 14; ++i) {
        for (const char* eye : {"L", "R"}) {
          std::snprintf(buf, sizeof buf, "Image_%02d%s", i, eye);
          stems.push_back(buf);
        }
      }
      break;
    case DatasetKind::Hrf:
      for (const char* cat : {"h", "g", "dr"}) {
        for (int i = 1; i <= 15; ++i) {
          std::snprintf(buf, sizeof buf, "%02d_%s", i, cat);
          stems.push_back(buf);
        }
      }
      break;
  }
  return stems;
}

Image8 to_image8(const Tensor<float>& t, float scale) {
  Image8 img(t.width(), t.height(), t.channels());
  for (std::size_t c = 0; c < t.channels(); ++c) {
    const float* p = t.plane_ptr(0, c);
    for (std::size_t i = 0; i < t.plane(); ++i) {
      img.pixels[i * t.channels() + c] =
          static_cast<std::uint8_t>(std::clamp(p[i] * scale, 0.0f, 255.0f));
    }
  }
  return img;
}

}  // namespace

void write_synthetic_dataset(const fs::path& root, DatasetKind kind, std::size_t height,
                             std::size_t width, std::uint64_t seed) {
  for (const char* d : {"images", "masks", "roi"}) fs::create_directories(root / d);
  for (const auto& stem : synthetic_stems(kind)) {
    const Sample s = make_synthetic_sample(stem, height, width, seed);
    write_png(root / "images" / (stem + ".png"), to_image8(s.image, 1.0f));
    write_png(root / "masks" / (stem + ".png"), to_image8(s.mask, 255.0f));
    write_png(root / "roi" / (stem + ".png"), to_image8(*s.roi, 255.0f));
  }
}

}  // namespace fesnet
