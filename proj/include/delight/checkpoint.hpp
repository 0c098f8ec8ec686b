#pragma once

/**
 * @file checkpoint.hpp
 * @brief Single-file binary checkpoint container with an integrity trailer.
 *
 * Layout: magic+version, stage, epoch, validation score, canonical config
 * JSON, named parameter tensors grouped by network, Adam state, then a
 * SHA-256 of everything before the trailer. Writes are atomic
 * (temp file, fsync, rename).
 */

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "delight/errors.hpp"
#include "delight/serialize.hpp"
#include "delight/sha256.hpp"
#include "delight/tensor.hpp"

namespace delight::ckpt {

inline constexpr char kMagic[8] = {'D', 'L', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr uint32_t kVersion = 1;

template <class T>
struct Checkpoint {
  int stage = 1;
  int64_t epoch = 0;
  double val_score = 0.0;
  std::string config_json;  // canonical snapshot

  using TensorMap = std::map<std::string, Tensor<T>>;
  std::vector<std::pair<std::string, TensorMap>> networks;

  struct OptState {
    int64_t t = 0;
    TensorMap tensors;
  };
  std::vector<std::pair<std::string, OptState>> optimizers;

  const TensorMap& network(const std::string& name) const {
    for (const auto& [n, m] : networks)
      if (n == name) return m;
    throw ConfigError("checkpoint has no network '" + name + "'");
  }
  bool has_network(const std::string& name) const {
    for (const auto& [n, m] : networks)
      if (n == name) return true;
    return false;
  }
};

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& c) {
  std::ostringstream body;
  body.write(kMagic, sizeof(kMagic));
  ser::write_raw<uint32_t>(body, kVersion);
  ser::write_raw<uint8_t>(body, static_cast<uint8_t>(c.stage));
  ser::write_raw<int64_t>(body, c.epoch);
  ser::write_raw<double>(body, c.val_score);
  ser::write_string(body, c.config_json);
  ser::write_raw<uint32_t>(body, static_cast<uint32_t>(c.networks.size()));
  for (const auto& [name, tensors] : c.networks) {
    ser::write_string(body, name);
    ser::write_raw<uint32_t>(body, static_cast<uint32_t>(tensors.size()));
    for (const auto& [tname, t] : tensors) ser::write_tensor(body, tname, t);
  }
  ser::write_raw<uint32_t>(body, static_cast<uint32_t>(c.optimizers.size()));
  for (const auto& [name, s] : c.optimizers) {
    ser::write_string(body, name);
    ser::write_raw<int64_t>(body, s.t);
    ser::write_raw<uint32_t>(body, static_cast<uint32_t>(s.tensors.size()));
    for (const auto& [tname, t] : s.tensors) ser::write_tensor(body, tname, t);
  }
  const std::string bytes = body.str();
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  const std::array<uint8_t, 32> digest = h.digest();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.write(reinterpret_cast<const char*>(digest.data()), static_cast<std::streamsize>(digest.size()));
    if (!out) throw DataError("checkpoint write failed: " + tmp);
  }
  const int fd = ::open(tmp.c_str(), O_RDWR);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.size() < sizeof(kMagic) + 32)
    throw ConfigError("checkpoint integrity failure: file truncated: " + path);
  Sha256 h;
  h.update(bytes.data(), bytes.size() - 32);
  const std::array<uint8_t, 32> digest = h.digest();
  if (std::memcmp(digest.data(), bytes.data() + bytes.size() - 32, 32) != 0)
    throw ConfigError("checkpoint integrity failure: trailer hash mismatch: " + path);

  std::istringstream is(bytes.substr(0, bytes.size() - 32));
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ConfigError("not a checkpoint file: " + path);
  const uint32_t version = ser::read_raw<uint32_t>(is);
  if (version != kVersion)
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint<T> c;
  c.stage = static_cast<int>(ser::read_raw<uint8_t>(is));
  c.epoch = ser::read_raw<int64_t>(is);
  c.val_score = ser::read_raw<double>(is);
  c.config_json = ser::read_string(is);
  const uint32_t n_nets = ser::read_raw<uint32_t>(is);
  for (uint32_t i = 0; i < n_nets; ++i) {
    std::string name = ser::read_string(is);
    const uint32_t n_tensors = ser::read_raw<uint32_t>(is);
    typename Checkpoint<T>::TensorMap tensors;
    for (uint32_t k = 0; k < n_tensors; ++k) {
      auto [tname, t] = ser::read_tensor<T>(is);
      tensors.emplace(std::move(tname), std::move(t));
    }
    c.networks.emplace_back(std::move(name), std::move(tensors));
  }
  const uint32_t n_opts = ser::read_raw<uint32_t>(is);
  for (uint32_t i = 0; i < n_opts; ++i) {
    std::string name = ser::read_string(is);
    typename Checkpoint<T>::OptState s;
    s.t = ser::read_raw<int64_t>(is);
    const uint32_t n_tensors = ser::read_raw<uint32_t>(is);
    for (uint32_t k = 0; k < n_tensors; ++k) {
      auto [tname, t] = ser::read_tensor<T>(is);
      s.tensors.emplace(std::move(tname), std::move(t));
    }
    c.optimizers.emplace_back(std::move(name), std::move(s));
  }
  return c;
}

}  // namespace delight::ckpt
