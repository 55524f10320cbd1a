#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "stitchlab/tensor.hpp"

namespace stitchlab {

/// 64-bit FNV-1a over little-endian encodings of the added values.
class Fnv1a {
 public:
  void add_bytes(std::span<const unsigned char> bytes) {
    for (auto b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
  }
  void add_u64(std::uint64_t v) {
    unsigned char bytes[8];
    for (int k = 0; k < 8; ++k) bytes[k] = static_cast<unsigned char>(v >> (8 * k));
    add_bytes(bytes);
  }
  void add_double(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    add_u64(bits);
  }
  void add_string(std::string_view s) {
    add_u64(s.size());
    add_bytes({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  }
  void add(const Tensor& t) {
    add_u64(t.rows());
    add_u64(t.cols());
    for (double v : t.values()) add_double(v);
  }
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

/// 16 lowercase hex digits.
std::string to_hex(std::uint64_t v);

}  // namespace stitchlab
