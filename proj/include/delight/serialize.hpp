#pragma once

/**
 * @file serialize.hpp
 * @brief Named-tensor binary records (little-endian) shared by checkpoints
 *        and the feature-extractor weight artifact.
 *
 * Record layout: u32 name length, name bytes, u8 dtype (1=f32, 2=f64),
 * u8 rank, rank × i64 dims, raw values.
 */

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "delight/errors.hpp"
#include "delight/tensor.hpp"

namespace delight::ser {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

template <class T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("serialize: truncated stream");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_raw<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const uint32_t n = read_raw<uint32_t>(is);
  if (n > (1u << 20)) throw ConfigError("serialize: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw ConfigError("serialize: truncated stream");
  return s;
}

template <class T>
constexpr uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

template <class T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  write_string(os, name);
  write_raw<uint8_t>(os, dtype_tag<T>());
  write_raw<uint8_t>(os, static_cast<uint8_t>(t.rank()));
  for (int64_t d : t.shape()) write_raw<int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(T))));
}

/// Reads one record, converting the stored dtype to T if they differ.
template <class T>
std::pair<std::string, Tensor<T>> read_tensor(std::istream& is) {
  std::string name = read_string(is);
  const uint8_t dtype = read_raw<uint8_t>(is);
  if (dtype != 1 && dtype != 2) throw ConfigError("serialize: unknown dtype tag");
  const uint8_t rank = read_raw<uint8_t>(is);
  if (rank > 8) throw ConfigError("serialize: implausible tensor rank");
  std::vector<int64_t> shape(rank);
  int64_t numel = 1;
  for (auto& d : shape) {
    d = read_raw<int64_t>(is);
    if (d < 0 || d > (int64_t(1) << 32)) throw ConfigError("serialize: implausible dimension");
    numel *= d;
  }
  Tensor<T> t(shape);
  if (dtype == dtype_tag<T>()) {
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(numel * static_cast<int64_t>(sizeof(T))));
    if (!is) throw ConfigError("serialize: truncated tensor data");
  } else {
    const size_t elem = dtype == 1 ? sizeof(float) : sizeof(double);
    std::vector<char> raw(static_cast<size_t>(numel) * elem);
    is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!is) throw ConfigError("serialize: truncated tensor data");
    for (int64_t i = 0; i < numel; ++i) {
      if (dtype == 1) {
        float v;
        std::memcpy(&v, raw.data() + static_cast<size_t>(i) * elem, elem);
        t[i] = static_cast<T>(v);
      } else {
        double v;
        std::memcpy(&v, raw.data() + static_cast<size_t>(i) * elem, elem);
        t[i] = static_cast<T>(v);
      }
    }
  }
  return {std::move(name), std::move(t)};
}

}  // namespace delight::ser
