#include "fesnet/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fesnet {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Image8 decode_png(const std::string& bytes, const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ImageError(path.string() + ": " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out(img.width, img.height, color ? 3 : 1);
  // Flatten any alpha onto black so transparent pixels read as 0.
  png_color background{0, 0, 0};
  if (!png_image_finish_read(&img, &background, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageError(path.string() + ": " + msg);
  }
  return out;
}

Image8 decode_pnm(const std::string& bytes, const std::filesystem::path& path) {
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  auto next_int = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      ++pos;
    }
    if (pos == start) throw ImageError(path.string() + ": malformed PNM header");
    return v;
  };
  const std::size_t w = next_int();
  const std::size_t h = next_int();
  const std::size_t maxval = next_int();
  if (w == 0 || h == 0) throw ImageError(path.string() + ": empty image");
  if (maxval != 255) {
    throw ImageError(path.string() + ": only 8-bit PNM (maxval 255) is supported");
  }
  ++pos;  // single whitespace after maxval
  Image8 out(w, h, channels);
  if (bytes.size() < pos + out.pixels.size()) {
    throw ImageError(path.string() + ": truncated PNM pixel data");
  }
  std::memcpy(out.pixels.data(), bytes.data() + pos, out.pixels.size());
  return out;
}

}  // namespace

Image8 read_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0) {
    return decode_png(bytes, path);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return decode_pnm(bytes, path);
  }
  throw ImageError(path.string() +
                   ": unsupported image format (expected PNG, binary PGM or PPM)");
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ImageError("write_png: unsupported channel count " +
                     std::to_string(image.channels));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0,
                               nullptr)) {
    throw ImageError(path.string() + ": " + img.message);
  }
}

void write_pnm(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ImageError("write_pnm: unsupported channel count " +
                     std::to_string(image.channels));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out << (image.channels == 1 ? "P5" : "P6") << '\n'
      << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

Tensor<float> image_to_tensor(const Image8& image) {
  Tensor<float> t({1, image.channels, image.height, image.width});
  for (std::size_t c = 0; c < image.channels; ++c) {
    float* dst = t.plane_ptr(0, c);
    for (std::size_t i = 0; i < image.width * image.height; ++i) {
      dst[i] = image.pixels[i * image.channels + c];
    }
  }
  return t;
}

}  // namespace fesnet
