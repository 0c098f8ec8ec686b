#pragma once

/**
 * @file data.hpp
 * @brief Unpaired dataset ingestion, deterministic splits, and batch
 *        sampling with augmentation.
 *
 * The manifest is built lexicographically and every image is decode-checked
 * up front; undecodable files land in a rejects list instead of aborting.
 */

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "delight/autodiff.hpp"
#include "delight/config.hpp"
#include "delight/errors.hpp"
#include "delight/image_io.hpp"
#include "delight/imaging.hpp"
#include "delight/rng.hpp"

namespace delight::data {

struct Record {
  std::string rel_path;  // relative to its role directory
  std::string role;      // low | normal
  std::string split;     // train | val | test
  int64_t width = 0;
  int64_t height = 0;
};

struct UnpairedDataset {
  std::string low_dir;
  std::string normal_dir;
  std::string resize;  // none | long1008
  std::vector<Record> records;
  std::vector<std::string> rejects;  // undecodable files, relative paths

  std::vector<size_t> indices(const std::string& role, const std::string& split) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
      if (records[i].role == role && records[i].split == split) out.push_back(i);
    return out;
  }

  std::string abs_path(const Record& r) const {
    const std::string& root = r.role == "low" ? low_dir : normal_dir;
    return (std::filesystem::path(root) / r.rel_path).string();
  }
};

namespace detail {

inline std::vector<std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("dataset directory does not exist: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && io::is_image_file(e.path()))
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace detail

/// Build the manifest for both roles. All records start in the train split.
inline UnpairedDataset load_dataset(const cfg::Config& config) {
  UnpairedDataset ds;
  ds.low_dir = config.data.low_dir;
  ds.normal_dir = config.data.normal_dir;
  ds.resize = config.data.resize;
  for (const auto& [role, dir] : {std::pair<std::string, std::string>{"low", ds.low_dir},
                                  {"normal", ds.normal_dir}}) {
    size_t valid = 0;
    for (const std::string& name : detail::list_images(dir)) {
      const std::string full = (std::filesystem::path(dir) / name).string();
      auto im = io::load_image<float>(full);
      if (!im) {
        ds.rejects.push_back(role + "/" + name);
        continue;
      }
      ds.records.push_back({name, role, "train", im->shape()[1], im->shape()[0]});
      ++valid;
    }
    if (valid == 0) throw ConfigError("no decodable images in " + role + " directory: " + dir);
  }
  return ds;
}

/// One tab-separated record per line: rel-path, role, split, width, height.
inline void write_manifest(const UnpairedDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest: " + path);
  for (const auto& r : ds.records)
    out << r.rel_path << '\t' << r.role << '\t' << r.split << '\t' << r.width << '\t' << r.height
        << '\n';
}

/// Move a seeded fraction of each role's train records into the val split.
inline UnpairedDataset split(UnpairedDataset ds, double val_fraction, uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("split: val_fraction must lie in [0, 1)");
  Rng rng = Rng::substream(seed, "split");
  for (const std::string role : {"low", "normal"}) {
    std::vector<size_t> idx = ds.indices(role, "train");
    // Fisher–Yates with the shared stream keeps partitions seed-stable
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(i))]);
    const size_t n_val =
        static_cast<size_t>(std::llround(static_cast<double>(idx.size()) * val_fraction));
    for (size_t k = 0; k < n_val; ++k) ds.records[idx[k]].split = "val";
  }
  return ds;
}

struct BatchSpec {
  int64_t batch_size = 1;
  int64_t crop = 64;
  bool hflip = false;
  bool rot90 = false;
};

template <class T>
struct Batch {
  std::vector<img::Image<T>> low;
  std::vector<img::Image<T>> normal;
  std::vector<std::string> low_ids;
  std::vector<std::string> normal_ids;
};

template <class T>
img::Image<T> hflip_image(const img::Image<T>& im) {
  const int64_t h = im.shape()[0], w = im.shape()[1];
  img::Image<T> out(im.shape());
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) out.at3(r, c, ch) = im.at3(r, w - 1 - c, ch);
  return out;
}

/// Rotate by k × 90° counter-clockwise.
template <class T>
img::Image<T> rot90_image(const img::Image<T>& im, int64_t k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return im;
  const int64_t h = im.shape()[0], w = im.shape()[1];
  const int64_t oh = (k % 2 == 0) ? h : w, ow = (k % 2 == 0) ? w : h;
  img::Image<T> out({oh, ow, 3});
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      int64_t nr, nc;
      switch (k) {
        case 1: nr = w - 1 - c; nc = r; break;
        case 2: nr = h - 1 - r; nc = w - 1 - c; break;
        default: nr = c; nc = h - 1 - r; break;
      }
      for (int64_t ch = 0; ch < 3; ++ch) out.at3(nr, nc, ch) = im.at3(r, c, ch);
    }
  return out;
}

/// Long side resized to `target` (aspect preserved, bilinear).
template <class T>
img::Image<T> resize_long_side(const img::Image<T>& im, int64_t target) {
  const int64_t h = im.shape()[0], w = im.shape()[1];
  const int64_t long_side = std::max(h, w);
  if (long_side == target) return im;
  const double scale = static_cast<double>(target) / static_cast<double>(long_side);
  const int64_t oh = std::max<int64_t>(1, static_cast<int64_t>(std::llround(h * scale)));
  const int64_t ow = std::max<int64_t>(1, static_cast<int64_t>(std::llround(w * scale)));
  ad::NoGradGuard ng;
  auto x = ad::Var<T>::leaf(img::to_nchw(im));
  return img::to_hwc(ad::resize_bilinear(x, oh, ow).value());
}

/// Lazily loads and caches decoded images, applying the resize policy.
template <class T>
class ImageCache {
 public:
  explicit ImageCache(const UnpairedDataset& ds) : ds_(&ds) {}

  const img::Image<T>& get(size_t record_idx) {
    auto it = cache_.find(record_idx);
    if (it != cache_.end()) return it->second;
    const Record& rec = ds_->records.at(record_idx);
    auto im = io::load_image<T>(ds_->abs_path(rec));
    if (!im) throw DataError("image became unreadable: " + ds_->abs_path(rec));
    if (ds_->resize == "long1008") *im = resize_long_side(*im, 1008);
    return cache_.emplace(record_idx, std::move(*im)).first->second;
  }

 private:
  const UnpairedDataset* ds_;
  std::unordered_map<size_t, img::Image<T>> cache_;
};

/// Unpaired batch: independent uniform draws of low and normal images, random
/// crops, then augmentation. Per-item draw order is fixed (low index, low
/// crop, low augment, then the same for normal) so streams replay exactly.
template <class T>
Batch<T> sample_batch(const UnpairedDataset& ds, ImageCache<T>& cache, const BatchSpec& spec,
                      Rng& rng, const std::string& split = "train") {
  const std::vector<size_t> low_idx = ds.indices("low", split);
  const std::vector<size_t> normal_idx = ds.indices("normal", split);
  if (low_idx.empty() || normal_idx.empty())
    throw std::invalid_argument("sample_batch: split '" + split + "' lacks low or normal images");
  Batch<T> batch;
  auto draw_one = [&](const std::vector<size_t>& pool, std::vector<img::Image<T>>& out,
                      std::vector<std::string>& ids) {
    const size_t rec_i = pool[static_cast<size_t>(rng.uniform_int(pool.size()))];
    const Record& rec = ds.records[rec_i];
    const img::Image<T>& im = cache.get(rec_i);
    if (spec.crop > std::min(im.shape()[0], im.shape()[1]))
      throw std::invalid_argument("sample_batch: crop " + std::to_string(spec.crop) +
                                  " exceeds image " + rec.role + "/" + rec.rel_path);
    img::Image<T> crop = img::crop_patches(im, spec.crop, 1, rng)[0].pixels;
    if (spec.hflip && rng.bernoulli(0.5)) crop = hflip_image(crop);
    if (spec.rot90) {
      const int64_t k = static_cast<int64_t>(rng.uniform_int(4));
      crop = rot90_image(crop, k);
    }
    out.push_back(std::move(crop));
    ids.push_back(rec.role + "/" + rec.rel_path);
  };
  for (int64_t i = 0; i < spec.batch_size; ++i) {
    draw_one(low_idx, batch.low, batch.low_ids);
    draw_one(normal_idx, batch.normal, batch.normal_ids);
  }
  return batch;
}

}  // namespace delight::data
