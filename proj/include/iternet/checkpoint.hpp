#pragma once

// Binary checkpoint layout (all integers and floats little-endian):
//   "ITNT" | u32 version | u32 entry count
//   per entry: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 values

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "iternet/param_store.hpp"

namespace iternet {

inline constexpr std::array<char, 4> checkpoint_magic{'I', 'T', 'N', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

class checkpoint_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void put_le(std::vector<char>& out, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::string path)
      : bytes_(bytes), path_(std::move(path)) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw checkpoint_error("checkpoint '" + path_ + "': truncated while reading " + what +
                             " at byte " + std::to_string(pos_));
    }
  }

  const std::vector<char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const ParamStore<float>& store) {
  std::vector<char> out(checkpoint_magic.begin(), checkpoint_magic.end());
  detail::put_le<std::uint32_t>(out, checkpoint_version);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, e] : store.entries()) {
    if (name.size() > 0xFFFF) throw checkpoint_error("checkpoint: name too long: " + name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const Shape& s = e.value.shape();
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(s.size()));
    for (std::size_t d : s) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float f : e.value.values()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline ParamStore<float> decode_checkpoint(const std::vector<char>& bytes,
                                           const std::string& path = "<memory>") {
  detail::ByteReader in(bytes, path);
  const std::string magic = in.get_string(4, "magic");
  if (magic != std::string(checkpoint_magic.begin(), checkpoint_magic.end())) {
    throw checkpoint_error("checkpoint '" + path + "': bad magic, not an ITNT file");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != checkpoint_version) {
    throw checkpoint_error("checkpoint '" + path + "': unsupported version " +
                           std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>("entry count");
  ParamStore<float> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>("name length");
    std::string name = in.get_string(len, "name");
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(in.get<std::uint32_t>("dims"));
    std::vector<float> values(shape_size(shape));
    for (auto& v : values) v = std::bit_cast<float>(in.get<std::uint32_t>("values"));
    try {
      store.add(name, basic_tensor<float>(std::move(shape), std::move(values)));
    } catch (const std::invalid_argument& e) {
      throw checkpoint_error("checkpoint '" + path + "': " + e.what());
    }
  }
  if (!in.at_end()) throw checkpoint_error("checkpoint '" + path + "': trailing bytes");
  return store;
}

inline void write_checkpoint_file(const ParamStore<float>& store, const std::string& path) {
  const std::vector<char> bytes = encode_checkpoint(store);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw checkpoint_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw checkpoint_error("checkpoint: write failed for '" + path + "'");
}

inline ParamStore<float> read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw checkpoint_error("checkpoint: cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

}  // namespace iternet
