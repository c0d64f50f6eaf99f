#pragma once

// Little-endian primitives shared by the DGC1 / DGCF / DGCM formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgc {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint16_t kEndianMarker = 0xFEFF;

namespace le {

template <class T>
T byteswap(T v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

template <class T>
void put(std::string& buf, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

template <class T>
void put_array(std::string& buf, std::span<const T> v) {
  if constexpr (std::endian::native == std::endian::little) {
    buf.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  } else {
    for (T x : v) put(buf, x);
  }
}

inline void put_string(std::string& buf, const std::string& s) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
  buf.append(s);
}

// Bounds-checked cursor over a byte buffer.
class Cursor {
 public:
  Cursor(const char* data, std::size_t size, std::string what)
      : p_(data), end_(data + size), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p_, sizeof(T));
    p_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
    return v;
  }

  template <class T>
  void get_array(std::span<T> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), p_, out.size_bytes());
    p_ += out.size_bytes();
    if constexpr (std::endian::native == std::endian::big)
      for (T& x : out) x = byteswap(x);
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(p_, n);
    p_ += n;
    return s;
  }

  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError("truncated " + what_);
  }
  const char* p_;
  const char* end_;
  std::string what_;
};

// Reads exactly n bytes or reports truncation.
inline void read_exact(std::istream& is, char* dst, std::size_t n, const std::string& what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("truncated " + what);
}

template <class T>
T read_value(std::istream& is, const std::string& what) {
  char raw[sizeof(T)];
  read_exact(is, raw, sizeof(T), what);
  Cursor c(raw, sizeof(T), what);
  return c.get<T>();
}

}  // namespace le
}  // namespace dgc
