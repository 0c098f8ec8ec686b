#pragma once

/**
 * @file config.hpp
 * @brief Configuration schema: profile defaults, JSON file overrides, strict
 *        unknown-key rejection, canonical (sorted-key) serialization.
 */

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include "delight/errors.hpp"

namespace delight::cfg {

using json = nlohmann::json;

struct DataConfig {
  std::string low_dir;
  std::string normal_dir;
  double val_fraction = 0.1;
  std::string resize = "none";  // none | long1008
};

struct Stage1Config {
  double lr = 1e-4;
  int64_t epochs_flat = 100;
  int64_t epochs_decay = 100;
  int64_t batch_size = 32;
  int64_t crop = 320;
  int64_t n_local_patches = 5;
  int64_t patch_size = 32;
  int64_t base_channels = 32;
  int64_t disc_base_channels = 64;
  std::string val_metric = "neg_loss";  // neg_loss | psnr
};

struct Stage2Config {
  double lr = 1e-4;
  int64_t epochs = 2000;
  int64_t batch_size = 8;
  int64_t crop = 128;
  int64_t base_channels = 32;
  int64_t disc_base_channels = 64;
  std::string val_metric = "neg_loss";
  std::string gamma_formula = "corrected";  // corrected | paper
};

struct FeaturesConfig {
  std::string kind = "test";  // test | reference
  double width_mult = 1.0;
  std::string weights_path;
  std::string weights_sha256;
  std::string stage1_layer = "relu4_4";
};

struct LossesConfig {
  double lambda_color = 10.0;
  double lambda_cp = 1.0;
  double lambda_cr = 1.0;
  double gamma_p = 10.0;
  double gamma_c = 10.0;
  std::string color_loss = "angle";  // angle | one_minus_cos
  int64_t color_factor = 4;
};

struct EvalConfig {
  std::string csv_name = "report.csv";
};

struct RuntimeConfig {
  uint64_t seed = 0;
  std::string profile = "desk";  // desk | paper
  int64_t workers = 1;
  std::string device = "cpu";
};

struct Config {
  DataConfig data;
  Stage1Config stage1;
  Stage2Config stage2;
  FeaturesConfig features;
  LossesConfig losses;
  EvalConfig eval;
  RuntimeConfig runtime;
};

/// Profile defaults. `desk` is sized for single-digit-minute CPU runs.
inline Config default_config(const std::string& profile) {
  Config c;
  c.runtime.profile = profile;
  if (profile == "paper") return c;  // struct defaults mirror the paper scale
  if (profile != "desk") throw ConfigError("unknown profile '" + profile + "' (desk|paper)");
  c.stage1.lr = 2e-4;
  c.stage1.epochs_flat = 4;
  c.stage1.epochs_decay = 0;
  c.stage1.batch_size = 4;
  c.stage1.crop = 64;
  c.stage1.n_local_patches = 2;
  c.stage1.patch_size = 32;
  c.stage1.base_channels = 16;
  c.stage1.disc_base_channels = 16;
  c.stage2.lr = 2e-4;
  c.stage2.epochs = 10;
  c.stage2.batch_size = 2;
  c.stage2.crop = 64;
  c.stage2.base_channels = 16;
  c.stage2.disc_base_channels = 16;
  c.features.width_mult = 0.25;
  return c;
}

namespace detail {

inline void expect_keys(const json& j, const std::string& section,
                        const std::set<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown config key '" + (section.empty() ? it.key() : section + "." + it.key()) + "'");
}

template <class T>
void read_num(const json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  if (!j[key].is_number())
    throw ConfigError("config key '" + path + "." + key + "' must be a number");
  out = j[key].get<T>();
}

inline void read_str(const json& j, const std::string& path, const char* key, std::string& out) {
  if (!j.contains(key)) return;
  if (!j[key].is_string())
    throw ConfigError("config key '" + path + "." + key + "' must be a string");
  out = j[key].get<std::string>();
}

inline void check_choice(const std::string& path, const std::string& value,
                         const std::set<std::string>& allowed) {
  if (!allowed.count(value)) {
    std::string opts;
    for (const auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
    throw ConfigError("config key '" + path + "' has invalid value '" + value + "' (" + opts + ")");
  }
}

}  // namespace detail

/// Apply a JSON document on top of `c`, rejecting unknown keys with their path.
inline void apply_json(Config& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  detail::expect_keys(j, "", {"data", "stage1", "stage2", "features", "losses", "eval", "runtime"});
  if (j.contains("data")) {
    const json& s = j["data"];
    detail::expect_keys(s, "data", {"low_dir", "normal_dir", "val_fraction", "resize"});
    detail::read_str(s, "data", "low_dir", c.data.low_dir);
    detail::read_str(s, "data", "normal_dir", c.data.normal_dir);
    detail::read_num(s, "data", "val_fraction", c.data.val_fraction);
    detail::read_str(s, "data", "resize", c.data.resize);
  }
  if (j.contains("stage1")) {
    const json& s = j["stage1"];
    detail::expect_keys(s, "stage1",
                        {"lr", "epochs_flat", "epochs_decay", "batch_size", "crop",
                         "n_local_patches", "patch_size", "base_channels", "disc_base_channels",
                         "val_metric"});
    detail::read_num(s, "stage1", "lr", c.stage1.lr);
    detail::read_num(s, "stage1", "epochs_flat", c.stage1.epochs_flat);
    detail::read_num(s, "stage1", "epochs_decay", c.stage1.epochs_decay);
    detail::read_num(s, "stage1", "batch_size", c.stage1.batch_size);
    detail::read_num(s, "stage1", "crop", c.stage1.crop);
    detail::read_num(s, "stage1", "n_local_patches", c.stage1.n_local_patches);
    detail::read_num(s, "stage1", "patch_size", c.stage1.patch_size);
    detail::read_num(s, "stage1", "base_channels", c.stage1.base_channels);
    detail::read_num(s, "stage1", "disc_base_channels", c.stage1.disc_base_channels);
    detail::read_str(s, "stage1", "val_metric", c.stage1.val_metric);
  }
  if (j.contains("stage2")) {
    const json& s = j["stage2"];
    detail::expect_keys(s, "stage2",
                        {"lr", "epochs", "batch_size", "crop", "base_channels",
                         "disc_base_channels", "val_metric", "gamma_formula"});
    detail::read_num(s, "stage2", "lr", c.stage2.lr);
    detail::read_num(s, "stage2", "epochs", c.stage2.epochs);
    detail::read_num(s, "stage2", "batch_size", c.stage2.batch_size);
    detail::read_num(s, "stage2", "crop", c.stage2.crop);
    detail::read_num(s, "stage2", "base_channels", c.stage2.base_channels);
    detail::read_num(s, "stage2", "disc_base_channels", c.stage2.disc_base_channels);
    detail::read_str(s, "stage2", "val_metric", c.stage2.val_metric);
    detail::read_str(s, "stage2", "gamma_formula", c.stage2.gamma_formula);
  }
  if (j.contains("features")) {
    const json& s = j["features"];
    detail::expect_keys(s, "features",
                        {"kind", "width_mult", "weights_path", "weights_sha256", "stage1_layer"});
    detail::read_str(s, "features", "kind", c.features.kind);
    detail::read_num(s, "features", "width_mult", c.features.width_mult);
    detail::read_str(s, "features", "weights_path", c.features.weights_path);
    detail::read_str(s, "features", "weights_sha256", c.features.weights_sha256);
    detail::read_str(s, "features", "stage1_layer", c.features.stage1_layer);
  }
  if (j.contains("losses")) {
    const json& s = j["losses"];
    detail::expect_keys(s, "losses",
                        {"lambda_color", "lambda_cp", "lambda_cr", "gamma_p", "gamma_c",
                         "color_loss", "color_factor"});
    detail::read_num(s, "losses", "lambda_color", c.losses.lambda_color);
    detail::read_num(s, "losses", "lambda_cp", c.losses.lambda_cp);
    detail::read_num(s, "losses", "lambda_cr", c.losses.lambda_cr);
    detail::read_num(s, "losses", "gamma_p", c.losses.gamma_p);
    detail::read_num(s, "losses", "gamma_c", c.losses.gamma_c);
    detail::read_str(s, "losses", "color_loss", c.losses.color_loss);
    detail::read_num(s, "losses", "color_factor", c.losses.color_factor);
  }
  if (j.contains("eval")) {
    const json& s = j["eval"];
    detail::expect_keys(s, "eval", {"csv_name"});
    detail::read_str(s, "eval", "csv_name", c.eval.csv_name);
  }
  if (j.contains("runtime")) {
    const json& s = j["runtime"];
    detail::expect_keys(s, "runtime", {"seed", "profile", "workers", "device"});
    detail::read_num(s, "runtime", "seed", c.runtime.seed);
    detail::read_str(s, "runtime", "profile", c.runtime.profile);
    detail::read_num(s, "runtime", "workers", c.runtime.workers);
    detail::read_str(s, "runtime", "device", c.runtime.device);
  }
}

inline void validate(const Config& c) {
  detail::check_choice("runtime.profile", c.runtime.profile, {"desk", "paper"});
  detail::check_choice("runtime.device", c.runtime.device, {"cpu"});
  detail::check_choice("features.kind", c.features.kind, {"test", "reference"});
  detail::check_choice("losses.color_loss", c.losses.color_loss, {"angle", "one_minus_cos"});
  detail::check_choice("stage2.gamma_formula", c.stage2.gamma_formula, {"corrected", "paper"});
  for (const auto& [path, m] :
       {std::pair<const char*, std::string>{"stage1.val_metric", c.stage1.val_metric},
        {"stage2.val_metric", c.stage2.val_metric}})
    detail::check_choice(path, m, {"neg_loss", "psnr"});
  if (!(c.data.val_fraction >= 0.0 && c.data.val_fraction < 1.0))
    throw ConfigError("data.val_fraction must lie in [0, 1)");
  detail::check_choice("data.resize", c.data.resize, {"none", "long1008"});
  if (c.stage1.lr <= 0 || c.stage2.lr <= 0) throw ConfigError("learning rates must be positive");
  if (c.stage1.crop % 8 != 0) throw ConfigError("stage1.crop must be divisible by 8");
  if (c.stage2.crop % 4 != 0) throw ConfigError("stage2.crop must be divisible by 4");
  if (c.stage1.batch_size < 1 || c.stage2.batch_size < 1)
    throw ConfigError("batch sizes must be at least 1");
  if (c.stage1.epochs_flat < 0 || c.stage1.epochs_decay < 0 || c.stage2.epochs < 0)
    throw ConfigError("epoch counts must be non-negative");
  if (c.stage1.patch_size < 32)
    throw ConfigError("stage1.patch_size must be at least 32 (discriminator receptive size)");
  if (c.stage1.n_local_patches < 1) throw ConfigError("stage1.n_local_patches must be at least 1");
  if (c.stage1.base_channels < 1 || c.stage2.base_channels < 1 ||
      c.stage1.disc_base_channels < 1 || c.stage2.disc_base_channels < 1)
    throw ConfigError("channel widths must be positive");
  if (c.features.width_mult <= 0) throw ConfigError("features.width_mult must be positive");
  if (c.runtime.workers < 1) throw ConfigError("runtime.workers must be at least 1");
  if (c.losses.color_factor < 1) throw ConfigError("losses.color_factor must be at least 1");
  for (double w : {c.losses.lambda_color, c.losses.lambda_cp, c.losses.lambda_cr, c.losses.gamma_p,
                   c.losses.gamma_c})
    if (w < 0) throw ConfigError("loss weights must be non-negative");
  if (c.features.kind == "reference" && c.features.weights_path.empty())
    throw ConfigError("features.kind=reference requires features.weights_path");
}

/// Full document (nlohmann::json orders keys, so dump() is canonical).
inline json to_json(const Config& c) {
  json j;
  j["data"] = {{"low_dir", c.data.low_dir},
               {"normal_dir", c.data.normal_dir},
               {"val_fraction", c.data.val_fraction},
               {"resize", c.data.resize}};
  j["stage1"] = {{"lr", c.stage1.lr},
                 {"epochs_flat", c.stage1.epochs_flat},
                 {"epochs_decay", c.stage1.epochs_decay},
                 {"batch_size", c.stage1.batch_size},
                 {"crop", c.stage1.crop},
                 {"n_local_patches", c.stage1.n_local_patches},
                 {"patch_size", c.stage1.patch_size},
                 {"base_channels", c.stage1.base_channels},
                 {"disc_base_channels", c.stage1.disc_base_channels},
                 {"val_metric", c.stage1.val_metric}};
  j["stage2"] = {{"lr", c.stage2.lr},
                 {"epochs", c.stage2.epochs},
                 {"batch_size", c.stage2.batch_size},
                 {"crop", c.stage2.crop},
                 {"base_channels", c.stage2.base_channels},
                 {"disc_base_channels", c.stage2.disc_base_channels},
                 {"val_metric", c.stage2.val_metric},
                 {"gamma_formula", c.stage2.gamma_formula}};
  j["features"] = {{"kind", c.features.kind},
                   {"width_mult", c.features.width_mult},
                   {"weights_path", c.features.weights_path},
                   {"weights_sha256", c.features.weights_sha256},
                   {"stage1_layer", c.features.stage1_layer}};
  j["losses"] = {{"lambda_color", c.losses.lambda_color},
                 {"lambda_cp", c.losses.lambda_cp},
                 {"lambda_cr", c.losses.lambda_cr},
                 {"gamma_p", c.losses.gamma_p},
                 {"gamma_c", c.losses.gamma_c},
                 {"color_loss", c.losses.color_loss},
                 {"color_factor", c.losses.color_factor}};
  j["eval"] = {{"csv_name", c.eval.csv_name}};
  j["runtime"] = {{"seed", c.runtime.seed},
                  {"profile", c.runtime.profile},
                  {"workers", c.runtime.workers},
                  {"device", c.runtime.device}};
  return j;
}

inline std::string canonical_string(const Config& c) { return to_json(c).dump(); }

/// Load from a file. Profile resolution: explicit `profile_override` (CLI),
/// else the file's runtime.profile, else desk; defaults come from the profile
/// and the file's keys are applied on top.
inline Config load_config(const std::string& path, const std::string& profile_override = "") {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  std::string profile = profile_override;
  if (profile.empty() && j.is_object() && j.contains("runtime") && j["runtime"].is_object() &&
      j["runtime"].contains("profile") && j["runtime"]["profile"].is_string())
    profile = j["runtime"]["profile"].get<std::string>();
  if (profile.empty()) profile = "desk";
  Config c = default_config(profile);
  apply_json(c, j);
  if (!profile_override.empty()) c.runtime.profile = profile_override;
  validate(c);
  return c;
}

}  // namespace delight::cfg
