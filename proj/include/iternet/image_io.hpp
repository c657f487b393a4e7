#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "iternet/tensor.hpp"

namespace iternet {

struct image_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw image_error("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw image_error("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw image_error("short write to " + path.string());
}

inline bool starts_with(const std::vector<unsigned char>& b, std::initializer_list<unsigned char> sig) {
  return b.size() >= sig.size() && std::equal(sig.begin(), sig.end(), b.begin());
}

/// Name of a recognised but unsupported container, or "" if unknown.
inline std::string sniff_unsupported(const std::vector<unsigned char>& b) {
  if (starts_with(b, {'I', 'I', 42, 0}) || starts_with(b, {'M', 'M', 0, 42})) return "TIFF";
  if (starts_with(b, {0xFF, 0xD8, 0xFF})) return "JPEG";
  if (starts_with(b, {'G', 'I', 'F', '8'})) return "GIF";
  if (starts_with(b, {'B', 'M'})) return "BMP";
  return "";
}

inline std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

class PnmReader {
 public:
  explicit PnmReader(const std::vector<unsigned char>& b) : b_(b) {}

  Tensor read() {
    if (b_.size() < 2 || b_[0] != 'P') fail("bad magic");
    const char kind = static_cast<char>(b_[1]);
    pos_ = 2;
    const bool ascii = kind == '2' || kind == '3';
    const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6') fail(std::string("variant P") + kind);
    const std::size_t w = header_number();
    const std::size_t h = header_number();
    const std::size_t maxval = header_number();
    if (w == 0 || h == 0) fail("zero dimension");
    if (maxval == 0 || maxval > 65535) fail("maxval out of range");
    Tensor out(Shape{1, channels, h, w});
    const float denom = static_cast<float>(maxval);
    if (!ascii) {
      // exactly one whitespace byte separates header and raster
      if (pos_ >= b_.size() || !std::isspace(b_[pos_])) fail("missing raster separator");
      ++pos_;
      const std::size_t bytes_per = maxval > 255 ? 2 : 1;
      if (b_.size() - pos_ < h * w * channels * bytes_per) fail("truncated raster");
    }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < channels; ++c) {
          std::size_t v;
          if (ascii) {
            v = header_number();
          } else if (maxval > 255) {
            v = (static_cast<std::size_t>(b_[pos_]) << 8) | b_[pos_ + 1];
            pos_ += 2;
          } else {
            v = b_[pos_++];
          }
          if (v > maxval) fail("sample exceeds maxval");
          out.at(0, c, y, x) = static_cast<float>(v) / denom;
        }
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw image_error("corrupt PNM/PGM/PPM image: " + what);
  }

  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t header_number() {
    skip_space();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) fail("expected a number");
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_++] - '0');
      if (v > (1u << 24)) fail("number too large");
    }
    return v;
  }

  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

inline Tensor decode_png(const std::vector<unsigned char>& bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw image_error(std::string("corrupt PNG image: ") + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t channels = color ? 3 : 1;
  const std::size_t h = img.height, w = img.width;
  std::vector<unsigned char> raster(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, raster.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw image_error("corrupt PNG image: " + msg);
  }
  Tensor out(Shape{1, channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        out.at(0, c, y, x) = raster[(y * w + x) * channels + c] / 255.0f;
  return out;
}

inline void require_image_shape(const Tensor& t, const char* what) {
  if (t.rank() != 4 || t.dim(0) != 1 || (t.dim(1) != 1 && t.dim(1) != 3)) {
    throw std::invalid_argument(std::string(what) + ": expected [1,1|3,H,W], got " +
                                shape_string(t.shape()));
  }
}

/// Interleaved 8-bit raster of a [1,C,H,W] tensor.
inline std::vector<unsigned char> interleave_8bit(const Tensor& t) {
  const std::size_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
  std::vector<unsigned char> raster(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) raster[(y * w + x) * c + k] = quantize(t.at(0, k, y, x));
  return raster;
}

}  // namespace detail

/// Decodes PNG or PNM bytes, detected by signature. Samples map to [0,1].
inline Tensor decode_image(const std::vector<unsigned char>& bytes) {
  if (detail::starts_with(bytes, {0x89, 'P', 'N', 'G'})) return detail::decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '1' && bytes[1] <= '7') {
    if (bytes[1] == '1' || bytes[1] == '4') throw image_error("unsupported format: PBM bitmap");
    if (bytes[1] == '7') throw image_error("unsupported format: PAM");
    return detail::PnmReader(bytes).read();
  }
  const std::string known = detail::sniff_unsupported(bytes);
  throw image_error("unsupported format: " + (known.empty() ? std::string("unrecognised signature") : known));
}

inline Tensor load_image(const std::filesystem::path& path) {
  try {
    return decode_image(detail::read_bytes(path));
  } catch (const image_error& e) {
    throw image_error(path.string() + ": " + e.what());
  }
}

/// 8-bit PNG encoding with round(v * 255) after clamping to [0,1].
inline std::vector<unsigned char> encode_png(const Tensor& t) {
  detail::require_image_shape(t, "encode_png");
  const auto raster = detail::interleave_8bit(t);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(t.dim(3));
  img.height = static_cast<png_uint_32>(t.dim(2));
  img.format = t.dim(1) == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(img, size, 0, raster.data(), 0, nullptr)) {
    throw image_error(std::string("PNG encode failed: ") + img.message);
  }
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, raster.data(), 0, nullptr)) {
    throw image_error(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

/// Binary P5/P6 encoding, maxval 255.
inline std::vector<unsigned char> encode_pnm(const Tensor& t) {
  detail::require_image_shape(t, "encode_pnm");
  const std::string header = std::string(t.dim(1) == 3 ? "P6" : "P5") + "\n" +
                             std::to_string(t.dim(3)) + " " + std::to_string(t.dim(2)) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  const auto raster = detail::interleave_8bit(t);
  out.insert(out.end(), raster.begin(), raster.end());
  return out;
}

/// Writes PNG unless the extension is .pgm/.ppm/.pnm.
inline void save_image(const Tensor& t, const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  const bool pnm = ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
  detail::write_bytes(path, pnm ? encode_pnm(t) : encode_png(t));
}

/// Label and mask convention: a pixel is 1 when its 8-bit value is >= 128.
inline Tensor binarize_label(const Tensor& t) {
  detail::require_image_shape(t, "binarize_label");
  const std::size_t h = t.dim(2), w = t.dim(3), c = t.dim(1);
  Tensor out(Shape{1, 1, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      float sum = 0.0f;
      for (std::size_t k = 0; k < c; ++k) sum += t.at(0, k, y, x);
      out.at(0, 0, y, x) = std::lround(sum / static_cast<float>(c) * 255.0f) >= 128 ? 1.0f : 0.0f;
    }
  return out;
}

inline Tensor load_label(const std::filesystem::path& path) { return binarize_label(load_image(path)); }

}  // namespace iternet
