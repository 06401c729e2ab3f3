#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "moppr/common.hpp"

namespace moppr::bin {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

template <class T>
void put(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
void put_array(std::ostream& out, const T* data, std::size_t n) {
  static_assert(std::is_trivially_copyable_v<T>);
  if (n > 0) out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <class T>
T get(std::istream& in, const std::string& what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("truncated file while reading " + what);
  return value;
}

template <class T>
void get_array(std::istream& in, T* data, std::size_t n, const std::string& what) {
  if (n == 0) return;
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw IoError("truncated file while reading " + what);
}

inline void expect_magic(std::istream& in, const char (&magic)[9], const std::string& what) {
  char buf[8];
  in.read(buf, 8);
  if (!in || std::memcmp(buf, magic, 8) != 0) throw IoError(what + ": bad magic");
}

}  // namespace moppr::bin
