#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "manipshield/error.hpp"

namespace manipshield::binary_io {

// Little-endian primitives shared by the checkpoint writers.

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                 static_cast<char>((v >> 16) & 0xFF),
                                 static_cast<char>((v >> 24) & 0xFF)};
  out.write(b.data(), 4);
  if (!out) fail(ErrorKind::kIo, "write failed");
}

inline void put_f32(std::ostream& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (in.gcount() != 4) fail(ErrorKind::kLength, std::string("truncated input reading ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& in, const char* what) {
  return std::bit_cast<float>(get_u32(in, what));
}

}  // namespace manipshield::binary_io
