#pragma once

// Little-endian primitives for the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace newt::io {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are written by memcpy on little-endian hosts");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_f32s(std::ostream& os, const float* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}
inline void write_bytes(std::ostream& os, const std::string& s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError(std::string("truncated input while reading ") + what);
}
inline std::uint32_t read_u32(std::istream& is, const char* what = "u32") {
  std::uint32_t v;
  read_exact(is, &v, sizeof v, what);
  return v;
}
inline std::uint64_t read_u64(std::istream& is, const char* what = "u64") {
  std::uint64_t v;
  read_exact(is, &v, sizeof v, what);
  return v;
}
inline void read_f32s(std::istream& is, float* dst, std::size_t n, const char* what = "f32 array") {
  read_exact(is, dst, n * sizeof(float), what);
}
inline std::string read_bytes(std::istream& is, std::size_t n, const char* what = "bytes") {
  std::string s(n, '\0');
  read_exact(is, s.data(), n, what);
  return s;
}

}  // namespace newt::io
