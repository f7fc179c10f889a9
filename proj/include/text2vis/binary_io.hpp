#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "text2vis/error.hpp"

// Little-endian scalar streaming shared by the feature and checkpoint formats.
namespace text2vis::binary {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_big(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    std::reverse(bytes.begin(), bytes.end());
    std::memcpy(&value, bytes.data(), sizeof(T));
  }
  return value;
}

template <typename T>
void write_scalar(std::ostream& out, T value) {
  value = byteswap_if_big(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void write_array(std::ostream& out, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) write_scalar(out, v);
  }
}

inline void read_exact(std::istream& in, void* dst, std::size_t bytes, std::string_view what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) {
    throw Error("truncated file while reading " + std::string(what));
  }
}

template <typename T>
T read_scalar(std::istream& in, std::string_view what) {
  T value;
  read_exact(in, &value, sizeof(T), what);
  return byteswap_if_big(value);
}

template <typename T>
void read_array(std::istream& in, std::span<T> values, std::string_view what) {
  read_exact(in, values.data(), values.size_bytes(), what);
  if constexpr (std::endian::native == std::endian::big) {
    for (T& v : values) v = byteswap_if_big(v);
  }
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::array<char, 8> buf{};
  in.read(buf.data(), static_cast<std::streamsize>(magic.size()));
  if (static_cast<std::size_t>(in.gcount()) != magic.size() ||
      std::string_view(buf.data(), magic.size()) != magic) {
    throw Error("bad magic: expected \"" + std::string(magic) + "\"");
  }
}

// Bytes left between the current read position and end of stream.
inline std::uint64_t remaining_bytes(std::istream& in) {
  const auto here = in.tellg();
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  in.seekg(here);
  if (here < 0 || end < 0) return UINT64_MAX;
  return static_cast<std::uint64_t>(end - here);
}

}  // namespace text2vis::binary
