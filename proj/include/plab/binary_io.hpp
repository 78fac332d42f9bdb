#pragma once

// Little-endian primitives shared by the trace, weight and centroid containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace plab {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace le {

template <typename T>
inline void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
inline T get(std::istream& is, const char* what) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError(std::string("truncated stream while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void put_bytes(std::ostream& os, const std::string& s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_bytes(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw FormatError(std::string("truncated stream while reading ") + what);
  }
  return s;
}

}  // namespace le
}  // namespace plab
