#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "visforce/error.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

/// 8-bit raster, row-major, interleaved channels (1 = gray, 3 = RGB).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Netpbm P2/P3/P5/P6 with maxval <= 255.
inline Image decode_pnm(const std::string& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw IoError("corrupt netpbm header in " + name);
    }
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw IoError("netpbm value too large in " + name);
      ++pos;
    }
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P') throw IoError("not a netpbm image: " + name);
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') throw IoError("unsupported netpbm type in " + name);
  pos = 2;
  const std::size_t width = read_int();
  const std::size_t height = read_int();
  const std::size_t maxval = read_int();
  if (width == 0 || height == 0) throw IoError("empty image " + name);
  if (maxval == 0 || maxval > 255) throw IoError("only 8-bit netpbm images are supported: " + name);
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  Image img(width, height, channels);
  const bool binary = kind == '5' || kind == '6';
  if (binary) {
    ++pos;  // single whitespace byte after maxval
    if (bytes.size() < pos + img.pixels.size()) throw IoError("truncated image data in " + name);
    std::copy_n(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos), img.pixels.size(), img.pixels.begin());
  } else {
    for (auto& p : img.pixels) {
      const std::size_t v = read_int();
      if (v > maxval) throw IoError("sample exceeds maxval in " + name);
      p = static_cast<std::uint8_t>(v);
    }
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  }
  return img;
}

inline Image decode_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&png, path.string().c_str()) == 0) {
    throw IoError("cannot decode png " + path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img(png.width, png.height, color ? 3 : 1);
  if (png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr) == 0) {
    png_image_free(&png);
    throw IoError("cannot decode png " + path.string() + ": " + png.message);
  }
  return img;
}

}  // namespace detail

/// Reads PGM/PPM (binary or ASCII) or PNG, chosen by file signature.
inline Image read_image(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() >= 8 && static_cast<unsigned char>(bytes[0]) == 0x89 && bytes.compare(1, 3, "PNG") == 0) {
    return detail::decode_png(path);
  }
  return detail::decode_pnm(bytes, path.string());
}

/// Binary PGM (P5) for gray images, PPM (P6) for RGB.
inline void write_pnm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

/// Center-crops the largest square, converts to luminance (0.299 R + 0.587 G + 0.114 B; gray
/// images are used as-is), resizes bilinearly to size x size with pixel-center alignment and
/// scales to [0, 1]. Returns size x size x 1.
inline Tensor preprocess_frame(const Image& raw, std::size_t size = 128) {
  if (raw.width == 0 || raw.height == 0 || raw.pixels.size() != raw.width * raw.height * raw.channels) {
    throw IoError("preprocess_frame: malformed image");
  }
  if (raw.channels != 1 && raw.channels != 3) throw IoError("preprocess_frame: expected 1 or 3 channels");
  if (size == 0) throw ContractViolation("preprocess_frame: output size must be positive");

  const std::size_t side = std::min(raw.width, raw.height);
  const std::size_t x0 = (raw.width - side) / 2;
  const std::size_t y0 = (raw.height - side) / 2;

  std::vector<double> gray(side * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t sx = x0 + x, sy = y0 + y;
      double v;
      if (raw.channels == 1) {
        v = raw.at(sx, sy);
      } else {
        v = 0.299 * raw.at(sx, sy, 0) + 0.587 * raw.at(sx, sy, 1) + 0.114 * raw.at(sx, sy, 2);
      }
      gray[y * side + x] = v;
    }
  }

  // source coordinate of output pixel d: (d + 0.5) * side / size - 0.5, clamped to the image
  struct Tap {
    std::size_t lo, hi;
    double w_hi;
  };
  auto taps = [&](std::size_t d) {
    const double scale = static_cast<double>(side) / static_cast<double>(size);
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(side - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, side - 1);
    return Tap{lo, hi, src - static_cast<double>(lo)};
  };

  Tensor out({size, size, 1});
  for (std::size_t oy = 0; oy < size; ++oy) {
    const Tap ty = taps(oy);
    for (std::size_t ox = 0; ox < size; ++ox) {
      const Tap tx = taps(ox);
      const double top = gray[ty.lo * side + tx.lo] * (1.0 - tx.w_hi) + gray[ty.lo * side + tx.hi] * tx.w_hi;
      const double bottom = gray[ty.hi * side + tx.lo] * (1.0 - tx.w_hi) + gray[ty.hi * side + tx.hi] * tx.w_hi;
      out[oy * size + ox] = (top * (1.0 - ty.w_hi) + bottom * ty.w_hi) / 255.0;
    }
  }
  return out;
}

/// Gray image from a size x size x 1 tensor in [0, 1] (rounded to the nearest 8-bit level).
inline Image to_image(const Tensor& frame) {
  if (frame.rank() != 3 || frame.dim(2) != 1) throw ShapeError("to_image: expected H x W x 1 frame");
  Image img(frame.dim(1), frame.dim(0), 1);
  for (std::size_t i = 0; i < frame.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(frame[i], 0.0, 1.0) * 255.0));
  }
  return img;
}

}  // namespace visforce
