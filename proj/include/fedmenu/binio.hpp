#pragma once

// Little-endian primitives shared by the FMNU and FMDS file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "fedmenu/errors.hpp"

namespace fedmenu::binio {

template <typename U>
void write_le(std::ostream& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  out.write(bytes, sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw IoError("unexpected end of file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void write_f64(std::ostream& out, double v) { write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v)); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

inline void write_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char got[4];
  if (!in.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
    throw IoError(std::string("bad magic, expected \"") + magic + "\"");
  }
}

/// Upper bound for any element count read from disk, to reject corrupt headers early.
inline constexpr std::uint64_t kMaxCount = std::uint64_t{1} << 32;

inline std::uint64_t read_count(std::istream& in, const char* what) {
  const auto n = read_le<std::uint64_t>(in);
  if (n > kMaxCount) throw IoError(std::string("implausible ") + what + " " + std::to_string(n));
  return n;
}

}  // namespace fedmenu::binio
