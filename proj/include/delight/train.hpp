#pragma once

/**
 * @file train.hpp
 * @brief Training orchestration: the Stage I illumination GAN, the Stage II
 *        noise GAN with pseudo-triple supervision, validation scoring,
 *        checkpointing, and full-pipeline inference.
 *
 * Both trainers follow the same iteration contract: one discriminator update
 * then one generator update per iteration, newline-delimited JSON log records
 * per iteration, and a hard abort (NumericError plus an on-disk snapshot)
 * the moment any loss goes non-finite. All randomness flows from named
 * substreams of the root seed, so a rerun with the same seed and workers=1
 * replays the exact byte stream.
 */

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "delight/autodiff.hpp"
#include "delight/checkpoint.hpp"
#include "delight/config.hpp"
#include "delight/data.hpp"
#include "delight/errors.hpp"
#include "delight/imaging.hpp"
#include "delight/losses.hpp"
#include "delight/metrics.hpp"
#include "delight/networks.hpp"
#include "delight/optim.hpp"
#include "delight/pseudo.hpp"
#include "delight/rng.hpp"
#include "delight/tensor.hpp"

namespace delight::train {

using ad::Var;

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

/// One training-log record. `wall_ms` is the only field that varies between
/// identically seeded runs; determinism checks strip it.
struct IterRecord {
  int64_t epoch = 0;
  int64_t iter = 0;  // global iteration, 1-based
  double lr = 0.0;
  std::map<std::string, double> losses;
  int64_t wall_ms = 0;
};

inline nlohmann::json record_json(const IterRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["iter"] = r.iter;
  j["lr"] = r.lr;
  j["losses"] = r.losses;
  j["wall_ms"] = r.wall_ms;
  return j;
}

/// Appends JSONL records to a file and keeps them in memory for callers.
class TrainLogger {
 public:
  explicit TrainLogger(std::string path) : path_(std::move(path)), out_(path_, std::ios::trunc) {
    if (!out_) throw DataError("cannot open training log: " + path_);
  }

  void log(const IterRecord& r) {
    records_.push_back(r);
    out_ << record_json(r).dump() << '\n';
    out_.flush();  // survive a hard abort mid-run
  }

  const std::vector<IterRecord>& records() const { return records_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::vector<IterRecord> records_;
};

namespace detail {

inline bool finite_losses(const std::map<std::string, double>& m) {
  for (const auto& [k, v] : m) {
    (void)k;
    if (!std::isfinite(v)) return false;
  }
  return true;
}

/// Dump a diagnostic snapshot and abort the run. The snapshot names the
/// iteration, the full loss breakdown, and the batch members so the offending
/// inputs can be replayed.
[[noreturn]] inline void abort_non_finite(const std::string& out_dir, const IterRecord& rec,
                                          const std::vector<std::string>& low_ids,
                                          const std::vector<std::string>& normal_ids) {
  nlohmann::json j = record_json(rec);
  j["batch_low_ids"] = low_ids;
  j["batch_normal_ids"] = normal_ids;
  const std::string path = out_dir + "/non_finite_snapshot.json";
  std::ofstream out(path, std::ios::trunc);
  if (out) out << j.dump(2) << '\n';
  throw NumericError("non-finite loss at iteration " + std::to_string(rec.iter) +
                     " (diagnostic snapshot: " + path + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Stable per-network seed derived from the root seed.
inline uint64_t net_seed(uint64_t root, std::string_view name) {
  return delight::detail::splitmix64(root ^ delight::detail::fnv1a64(name));
}

/// Iterations per epoch: the smaller role count drives one pass.
inline int64_t iters_per_epoch(const data::UnpairedDataset& ds, int64_t batch_size,
                               const std::string& split = "train") {
  const auto n_low = static_cast<int64_t>(ds.indices("low", split).size());
  const auto n_normal = static_cast<int64_t>(ds.indices("normal", split).size());
  return std::max<int64_t>(1, std::min(n_low, n_normal) / std::max<int64_t>(1, batch_size));
}

template <class T>
std::map<std::string, Tensor<T>> snapshot_params(const nn::Params<T>& p) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& name : p.names()) out.emplace(name, p.get(name).value());
  return out;
}

/// Rebuild a Config from the canonical snapshot a checkpoint carries.
inline cfg::Config config_from_snapshot(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("checkpoint config snapshot is not valid JSON");
  }
  std::string profile = "desk";
  if (j.contains("runtime") && j["runtime"].contains("profile") &&
      j["runtime"]["profile"].is_string())
    profile = j["runtime"]["profile"].get<std::string>();
  cfg::Config c = cfg::default_config(profile);
  cfg::apply_json(c, j);
  return c;
}

template <class T>
nn::VggExtractor<T> build_extractor(const cfg::Config& c) {
  typename nn::VggExtractor<T>::Spec s;
  s.kind = (c.features.kind == "reference") ? nn::VggExtractor<T>::Kind::kReference
                                            : nn::VggExtractor<T>::Kind::kTest;
  s.width_mult = c.features.width_mult;
  s.seed = net_seed(c.runtime.seed, "features");
  s.weights_path = c.features.weights_path;
  s.weights_sha256 = c.features.weights_sha256;
  return nn::VggExtractor<T>(s);
}

/// I_e = clamp(I_l / S, 0, 1) with gradient flow through S.
template <class T>
Var<T> retinex_graph(const Var<T>& low, const Var<T>& s) {
  return ad::clamp(ad::div(low, s), T(0), T(1));
}

/// M = max(illu(enhanced) − illu(low), 0) as an N×1×H×W graph node.
template <class T>
Var<T> mask_graph(const Var<T>& low, const Var<T>& enhanced) {
  return ad::relu(ad::sub(ad::luma(enhanced), ad::luma(low)));
}

namespace detail {

/// Random top-left corners for patch crops; rows drawn before columns.
inline std::vector<std::pair<int64_t, int64_t>> draw_origins(Rng& rng, int64_t n, int64_t h,
                                                             int64_t w, int64_t size) {
  std::vector<std::pair<int64_t, int64_t>> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto r = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(h - size + 1)));
    const auto c = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(w - size + 1)));
    out.emplace_back(r, c);
  }
  return out;
}

/// Crop `per_sample` patches out of every batch member at the given origins
/// (origin i*per_sample+p belongs to sample i). Stays on the tape.
template <class T>
Var<T> crop_patch_batch(const Var<T>& x, const std::vector<std::pair<int64_t, int64_t>>& origins,
                        int64_t per_sample, int64_t size) {
  const int64_t n = x.shape()[0];
  std::vector<Var<T>> patches;
  patches.reserve(static_cast<size_t>(n * per_sample));
  for (int64_t i = 0; i < n; ++i) {
    Var<T> xi = ad::slice_batch(x, i, 1);
    for (int64_t p = 0; p < per_sample; ++p) {
      const auto& [r, c] = origins[static_cast<size_t>(i * per_sample + p)];
      patches.push_back(ad::crop_spatial(xi, r, c, size, size));
    }
  }
  return ad::concat_batch(patches);
}

inline int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  int64_t j = i % period;
  if (j < 0) j += period;
  return j < n ? j : period - j;
}

template <class T>
T sample_mean(const Tensor<T>& nchw, int64_t n) {
  const int64_t per = nchw.numel() / nchw.shape()[0];
  double s = 0.0;
  const T* base = nchw.data() + n * per;
  for (int64_t i = 0; i < per; ++i) s += static_cast<double>(base[i]);
  return static_cast<T>(s / static_cast<double>(per));
}

}  // namespace detail

/// Reflect-pad an H×W×3 image at the bottom/right edges so both spatial
/// dimensions become multiples of `mult`.
template <class T>
img::Image<T> pad_reflect_multiple(const img::Image<T>& im, int64_t mult) {
  img::check_image(im, "pad_reflect_multiple");
  const int64_t h = im.shape()[0], w = im.shape()[1];
  const int64_t ph = (mult - h % mult) % mult;
  const int64_t pw = (mult - w % mult) % mult;
  if (ph == 0 && pw == 0) return im;
  img::Image<T> out({h + ph, w + pw, 3});
  for (int64_t r = 0; r < h + ph; ++r) {
    const int64_t sr = detail::reflect_index(r, h);
    for (int64_t c = 0; c < w + pw; ++c) {
      const int64_t sc = detail::reflect_index(c, w);
      for (int64_t ch = 0; ch < 3; ++ch) out.at3(r, c, ch) = im.at3(sr, sc, ch);
    }
  }
  return out;
}

template <class T>
img::Image<T> crop_image(const img::Image<T>& im, int64_t h, int64_t w) {
  img::Image<T> out({h, w, 3});
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) out.at3(r, c, ch) = im.at3(r, c, ch);
  return out;
}

/// Stage I inference on one image of arbitrary size: pad-reflect to the
/// stride multiple, predict S, recover I_e, crop back.
template <class T>
img::Image<T> infer_enhanced(const nn::Stage1Generator<T>& g_e, const img::Image<T>& im) {
  const int64_t h = im.shape()[0], w = im.shape()[1];
  const img::Image<T> padded = pad_reflect_multiple(im, 8);
  ad::NoGradGuard ng;
  auto x = Var<T>::leaf(img::to_nchw(padded));
  Var<T> ie = retinex_graph(x, g_e.forward(x));
  return crop_image(img::to_hwc(ie.value()), h, w);
}

/// Stage II inference on one (low, enhanced) pair; the guidance mask is
/// derived internally.
template <class T>
img::Image<T> denoise(const nn::Stage2Generator<T>& g_n, const img::Image<T>& low,
                      const img::Image<T>& enhanced) {
  if (!low.same_shape(enhanced))
    throw std::invalid_argument("denoise: low/enhanced shape mismatch");
  const int64_t h = low.shape()[0], w = low.shape()[1];
  const img::Image<T> pl = pad_reflect_multiple(low, 4);
  const img::Image<T> pe = pad_reflect_multiple(enhanced, 4);
  ad::NoGradGuard ng;
  auto xl = Var<T>::leaf(img::to_nchw(pl));
  auto xe = Var<T>::leaf(img::to_nchw(pe));
  Var<T> ic = g_n.forward(xl, xe, mask_graph(xl, xe));
  return crop_image(img::to_hwc(ic.value()), h, w);
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

template <class T>
nn::Stage1Generator<T> stage1_from_checkpoint(const ckpt::Checkpoint<T>& c) {
  if (!c.has_network("g_e"))
    throw ConfigError("checkpoint does not contain a stage-1 generator (g_e)");
  const cfg::Config conf = config_from_snapshot(c.config_json);
  nn::Stage1Generator<T> g({conf.stage1.base_channels}, /*seed=*/0);
  g.params().load_values(c.network("g_e"));
  g.params().set_trainable(false);
  return g;
}

template <class T>
nn::Stage2Generator<T> stage2_from_checkpoint(const ckpt::Checkpoint<T>& c) {
  if (!c.has_network("g_n"))
    throw ConfigError("checkpoint does not contain a stage-2 generator (g_n)");
  const cfg::Config conf = config_from_snapshot(c.config_json);
  nn::Stage2Generator<T> g({conf.stage2.base_channels}, /*seed=*/0);
  g.params().load_values(c.network("g_n"));
  g.params().set_trainable(false);
  return g;
}

template <class T>
struct TrainOutcome {
  ckpt::Checkpoint<T> best;
  ckpt::Checkpoint<T> last;
  std::string best_path;
  std::string last_path;
  std::string log_path;
  std::vector<IterRecord> log;
};

// ---------------------------------------------------------------------------
// Stage I training
// ---------------------------------------------------------------------------

namespace detail {

/// Use the val split when both roles have members, otherwise fall back to
/// scoring on train data (tiny datasets, val_fraction 0).
inline std::string val_split_name(const data::UnpairedDataset& ds) {
  const bool ok = !ds.indices("low", "val").empty() && !ds.indices("normal", "val").empty();
  return ok ? "val" : "train";
}

/// Name-matched (low rel_path == normal rel_path) val pairs for the PSNR
/// validation metric. Returns (low record idx, normal record idx).
inline std::vector<std::pair<size_t, size_t>> paired_val_indices(const data::UnpairedDataset& ds) {
  std::map<std::string, size_t> normals;
  for (size_t i = 0; i < ds.records.size(); ++i)
    if (ds.records[i].role == "normal") normals.emplace(ds.records[i].rel_path, i);
  std::vector<std::pair<size_t, size_t>> out;
  for (size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    if (r.role != "low" || r.split != "val") continue;
    auto it = normals.find(r.rel_path);
    if (it != normals.end()) out.emplace_back(i, it->second);
  }
  return out;
}

}  // namespace detail

/**
 * @brief Stage I: adversarial illumination estimation from unpaired data.
 *
 * Per iteration: RaGAN discriminator update on the global critic, LSGAN
 * update on the 32×32 patch critic, then one generator update minimizing
 * global RaGAN + local LSGAN + global and local self-feature-preserving
 * perceptual losses. Linear lr decay after `epochs_flat` epochs.
 */
template <class T>
TrainOutcome<T> train_stage1(data::UnpairedDataset ds, const cfg::Config& config,
                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  const auto& s1 = config.stage1;
  if (s1.patch_size > s1.crop)
    throw std::invalid_argument("train_stage1: patch_size exceeds crop");
  if (s1.crop < nn::kDiscMinInput)
    throw std::invalid_argument("train_stage1: crop below discriminator minimum");
  fs::create_directories(out_dir);

  const uint64_t seed = config.runtime.seed;
  if (ds.indices("low", "val").empty() && ds.indices("normal", "val").empty() &&
      config.data.val_fraction > 0.0)
    ds = data::split(std::move(ds), config.data.val_fraction, seed);

  nn::Stage1Generator<T> g({s1.base_channels}, net_seed(seed, "g_e"));
  nn::Discriminator<T> d_g({s1.disc_base_channels, 3}, net_seed(seed, "d_g"));
  nn::Discriminator<T> d_l({s1.disc_base_channels, 3}, net_seed(seed, "d_l"));
  nn::VggExtractor<T> ex = build_extractor<T>(config);
  const std::vector<std::string> perc_layers{config.features.stage1_layer};

  typename opt::Adam<T>::Hparams hp;
  hp.lr = s1.lr;
  opt::Adam<T> adam_g(g.params(), hp), adam_dg(d_g.params(), hp), adam_dl(d_l.params(), hp);

  Rng rng = Rng::substream(seed, "data");
  data::ImageCache<T> cache(ds);
  const data::BatchSpec bspec{s1.batch_size, s1.crop, /*hflip=*/true, /*rot90=*/false};

  TrainLogger logger(out_dir + "/train_stage1.log.jsonl");
  const int64_t ipe = iters_per_epoch(ds, s1.batch_size);
  const int64_t n_epochs = s1.epochs_flat + s1.epochs_decay;
  const auto t0 = std::chrono::steady_clock::now();

  auto make_ckpt = [&](int64_t epoch, double score) {
    ckpt::Checkpoint<T> c;
    c.stage = 1;
    c.epoch = epoch;
    c.val_score = score;
    c.config_json = cfg::canonical_string(config);
    c.networks = {{"g_e", snapshot_params(g.params())},
                  {"d_g", snapshot_params(d_g.params())},
                  {"d_l", snapshot_params(d_l.params())}};
    c.optimizers = {{"g_e", {adam_g.t(), adam_g.state_tensors()}},
                    {"d_g", {adam_dg.t(), adam_dg.state_tensors()}},
                    {"d_l", {adam_dl.t(), adam_dl.state_tensors()}}};
    return c;
  };

  // Validation: negative generator loss (RaGAN realism + perceptual identity)
  // on a fixed pseudo-random val batch, or PSNR against name-matched pairs.
  auto validate = [&]() -> double {
    ad::NoGradGuard ng;
    if (s1.val_metric == "psnr") {
      const auto pairs = detail::paired_val_indices(ds);
      if (pairs.empty())
        throw ConfigError("stage1 val_metric psnr requires name-matched low/normal val pairs");
      double sum = 0.0;
      for (const auto& [li, ni] : pairs)
        sum += metrics::psnr(infer_enhanced(g, cache.get(li)), cache.get(ni));
      return sum / static_cast<double>(pairs.size());
    }
    Rng vrng = Rng::substream(seed, "val");
    const data::BatchSpec vspec{s1.batch_size, s1.crop, false, false};
    data::Batch<T> vb = data::sample_batch(ds, cache, vspec, vrng, detail::val_split_name(ds));
    auto x_low = Var<T>::leaf(img::to_nchw(vb.low));
    auto x_norm = Var<T>::leaf(img::to_nchw(vb.normal));
    Var<T> ie = retinex_graph(x_low, g.forward(x_low));
    Var<T> l = ad::add(nn::ragan_g_loss(d_g.forward(x_norm), d_g.forward(ie)),
                       nn::perceptual_loss(ex, x_low, ie, true, perc_layers));
    return -static_cast<double>(l.item());
  };

  TrainOutcome<T> out;
  out.log_path = logger.path();
  double best_score = -std::numeric_limits<double>::infinity();
  int64_t it_global = 0;

  for (int64_t e = 1; e <= n_epochs; ++e) {
    const double lr = opt::lr_for_epoch(s1.lr, e, s1.epochs_flat, s1.epochs_decay);
    adam_g.set_lr(lr);
    adam_dg.set_lr(lr);
    adam_dl.set_lr(lr);
    for (int64_t it = 0; it < ipe; ++it) {
      ++it_global;
      data::Batch<T> b = data::sample_batch(ds, cache, bspec, rng);
      auto x_low = Var<T>::leaf(img::to_nchw(b.low));
      auto x_norm = Var<T>::leaf(img::to_nchw(b.normal));
      const int64_t n = s1.batch_size;

      // -- global discriminator (RaGAN) --
      Var<T> ie_fixed;
      {
        ad::NoGradGuard ng;
        ie_fixed = Var<T>::leaf(retinex_graph(x_low, g.forward(x_low)).value());
      }
      Var<T> loss_dg = nn::ragan_d_loss(d_g.forward(x_norm), d_g.forward(ie_fixed));
      d_g.params().zero_grads();
      loss_dg.backward();
      adam_dg.step();

      // -- local patch discriminator (LSGAN) --
      const auto real_org =
          detail::draw_origins(rng, n * s1.n_local_patches, s1.crop, s1.crop, s1.patch_size);
      const auto fake_org =
          detail::draw_origins(rng, n * s1.n_local_patches, s1.crop, s1.crop, s1.patch_size);
      Var<T> real_p =
          detail::crop_patch_batch(x_norm, real_org, s1.n_local_patches, s1.patch_size);
      Var<T> fake_p =
          detail::crop_patch_batch(ie_fixed, fake_org, s1.n_local_patches, s1.patch_size);
      Var<T> loss_dl = nn::lsgan_d_loss(d_l.forward(real_p), d_l.forward(fake_p));
      d_l.params().zero_grads();
      loss_dl.backward();
      adam_dl.step();

      // -- generator --
      Var<T> ie = retinex_graph(x_low, g.forward(x_low));
      Var<T> l_adv = nn::ragan_g_loss(d_g.forward(x_norm), d_g.forward(ie));
      const auto g_org =
          detail::draw_origins(rng, n * s1.n_local_patches, s1.crop, s1.crop, s1.patch_size);
      Var<T> ie_p = detail::crop_patch_batch(ie, g_org, s1.n_local_patches, s1.patch_size);
      Var<T> low_p = detail::crop_patch_batch(x_low, g_org, s1.n_local_patches, s1.patch_size);
      Var<T> l_adv_l = nn::lsgan_g_loss(d_l.forward(ie_p));
      Var<T> l_perc = nn::perceptual_loss(ex, x_low, ie, true, perc_layers);
      Var<T> l_perc_l = nn::perceptual_loss(ex, low_p, ie_p, true, perc_layers);
      Var<T> loss_g = ad::add(ad::add(l_adv, l_adv_l), ad::add(l_perc, l_perc_l));
      g.params().zero_grads();
      d_g.params().zero_grads();
      d_l.params().zero_grads();
      loss_g.backward();
      adam_g.step();

      IterRecord rec;
      rec.epoch = e;
      rec.iter = it_global;
      rec.lr = lr;
      rec.losses = {{"d_global", static_cast<double>(loss_dg.item())},
                    {"d_local", static_cast<double>(loss_dl.item())},
                    {"g_adv", static_cast<double>(l_adv.item())},
                    {"g_adv_local", static_cast<double>(l_adv_l.item())},
                    {"g_perc", static_cast<double>(l_perc.item())},
                    {"g_perc_local", static_cast<double>(l_perc_l.item())},
                    {"g_total", static_cast<double>(loss_g.item())}};
      rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      if (!detail::finite_losses(rec.losses))
        detail::abort_non_finite(out_dir, rec, b.low_ids, b.normal_ids);
      logger.log(rec);
    }

    const double score = validate();
    if (!std::isfinite(score)) {
      IterRecord rec;
      rec.epoch = e;
      rec.iter = it_global;
      rec.losses = {{"val_score", score}};
      detail::abort_non_finite(out_dir, rec, {}, {});
    }
    if (score > best_score) {
      best_score = score;
      out.best = make_ckpt(e, score);
      out.best_path = out_dir + "/stage1_best.ckpt";
      ckpt::save_checkpoint(out.best_path, out.best);
    }
    out.last = make_ckpt(e, score);
  }

  out.last_path = out_dir + "/stage1_last.ckpt";
  ckpt::save_checkpoint(out.last_path, out.last);
  out.log = logger.records();
  return out;
}

// ---------------------------------------------------------------------------
// Stage II training
// ---------------------------------------------------------------------------

/**
 * @brief Stage II: illumination-guided denoising with pseudo triples.
 *
 * Per iteration: the two-scale LSGAN critic updates on instance-normalized
 * real/denoised images, then the generator minimizes Eq. 11 — adversarial +
 * λ·color + adaptive content on the pseudo triple + content identity. The
 * Stage I generator stays frozen; gradient reaches G_n through the noise
 * transplant I_n = I_e − I_c inside the pseudo branch.
 */
template <class T>
TrainOutcome<T> train_stage2(data::UnpairedDataset ds, const ckpt::Checkpoint<T>& stage1,
                             const cfg::Config& config, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const auto& s2 = config.stage2;
  if (s2.crop < 2 * nn::kDiscMinInput)
    throw std::invalid_argument("train_stage2: crop below two-scale discriminator minimum");
  fs::create_directories(out_dir);

  const uint64_t seed = config.runtime.seed;
  if (ds.indices("low", "val").empty() && ds.indices("normal", "val").empty() &&
      config.data.val_fraction > 0.0)
    ds = data::split(std::move(ds), config.data.val_fraction, seed);

  nn::Stage1Generator<T> g_e = stage1_from_checkpoint(stage1);
  nn::Stage2Generator<T> g_n({s2.base_channels}, net_seed(seed, "g_n"));
  nn::MultiscaleDiscriminator<T> d_n({s2.disc_base_channels, 3}, net_seed(seed, "d_n"));
  nn::VggExtractor<T> ex = build_extractor<T>(config);
  const std::vector<std::string> content_layers = nn::vgg_layer_names();

  nn::LossWeights w;
  w.lambda_color = config.losses.lambda_color;
  w.lambda_cp = config.losses.lambda_cp;
  w.lambda_cr = config.losses.lambda_cr;
  w.gamma_p = config.losses.gamma_p;
  w.gamma_c = config.losses.gamma_c;
  const auto color_kind = config.losses.color_loss == "one_minus_cos"
                              ? nn::ColorLossKind::kOneMinusCos
                              : nn::ColorLossKind::kAngle;
  const auto gamma_formula = s2.gamma_formula == "paper" ? img::GammaFormula::kPaper
                                                         : img::GammaFormula::kCorrected;

  typename opt::Adam<T>::Hparams hp;
  hp.lr = s2.lr;
  opt::Adam<T> adam_g(g_n.params(), hp);
  opt::Adam<T> adam_d0(d_n.scale(0).params(), hp), adam_d1(d_n.scale(1).params(), hp);

  Rng rng = Rng::substream(seed, "data");
  Rng prng = Rng::substream(seed, "pseudo");
  data::ImageCache<T> cache(ds);
  const data::BatchSpec bspec{s2.batch_size, s2.crop, /*hflip=*/true, /*rot90=*/true};
  const std::vector<size_t> clean_pool = ds.indices("normal", "train");

  TrainLogger logger(out_dir + "/train_stage2.log.jsonl");
  const int64_t ipe = iters_per_epoch(ds, s2.batch_size);
  const auto t0 = std::chrono::steady_clock::now();

  // Frozen Stage I inference on a batch: predicted I_e plus guidance mask,
  // both detached leaves.
  auto stage1_infer = [&](const Var<T>& x_low) {
    ad::NoGradGuard ng;
    Var<T> ie = retinex_graph(x_low, g_e.forward(x_low));
    Var<T> m = mask_graph(x_low, ie);
    return std::pair<Var<T>, Var<T>>(Var<T>::leaf(ie.value()), Var<T>::leaf(m.value()));
  };

  // Clean crops for the pseudo branch, drawn from the named pseudo stream.
  auto draw_clean_batch = [&](Rng& r, int64_t count) {
    std::vector<img::Image<T>> crops;
    crops.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      const size_t rec_i = clean_pool[img::match_clean_index(r, clean_pool.size())];
      const img::Image<T>& im = cache.get(rec_i);
      if (s2.crop > std::min(im.shape()[0], im.shape()[1]))
        throw std::invalid_argument("train_stage2: crop exceeds clean image " +
                                    ds.records[rec_i].rel_path);
      crops.push_back(img::crop_patches(im, s2.crop, 1, r)[0].pixels);
    }
    return Var<T>::leaf(img::to_nchw(crops));
  };

  // Generator-side loss pipeline, shared by training and validation.
  struct GLosses {
    Var<T> adv, color, con_adapt, con, total;
  };
  auto generator_losses = [&](const Var<T>& x_low, const Var<T>& ie, const Var<T>& m,
                              Rng& pseudo_rng) {
    GLosses gl;
    Var<T> ic = g_n.forward(x_low, ie, m);
    auto fake_scores = d_n.forward(ad::instance_norm(ic));
    gl.adv = ad::mul_scalar(
        ad::add(nn::lsgan_g_loss(fake_scores[0]), nn::lsgan_g_loss(fake_scores[1])), T(0.5));
    gl.color = nn::color_loss(ic, ie, config.losses.color_factor, color_kind);
    gl.con = nn::content_loss(ex, ie, ic, static_cast<T>(w.gamma_c), content_layers);

    // Pseudo triple, kept on the tape so I_n carries gradient into G_n.
    const int64_t n = x_low.shape()[0];
    Var<T> i_n = ad::sub(ie, ic);
    Var<T> j_c = draw_clean_batch(pseudo_rng, n);
    Var<T> j_e = ad::clamp(ad::add(j_c, i_n), T(0), T(1));
    std::vector<T> lambdas(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const T ml = img::clamp_mean(detail::sample_mean(x_low.value(), i));
      const T me = img::clamp_mean(detail::sample_mean(ie.value(), i));
      const T raw = img::estimate_gamma(ml, me, gamma_formula);
      lambdas[static_cast<size_t>(i)] = std::min(static_cast<T>(img::kLambdaMax),
                                                 std::max(static_cast<T>(img::kLambdaMin), raw));
    }
    Var<T> j_l = ad::pow_per_sample(j_e, lambdas);
    Var<T> m_j = mask_graph(j_l, j_e);
    Var<T> j_g = g_n.forward(j_l, j_e, m_j);
    gl.con_adapt =
        nn::adaptive_content_loss(ex, j_g, j_c, m_j, static_cast<T>(w.gamma_p), content_layers);
    gl.total = nn::total_stage2_loss(gl.adv, gl.color, gl.con_adapt, gl.con, w);
    return gl;
  };

  auto make_ckpt = [&](int64_t epoch, double score) {
    ckpt::Checkpoint<T> c;
    c.stage = 2;
    c.epoch = epoch;
    c.val_score = score;
    c.config_json = cfg::canonical_string(config);
    c.networks = {{"g_e", snapshot_params(g_e.params())},
                  {"g_n", snapshot_params(g_n.params())},
                  {"d_n.s0", snapshot_params(d_n.scale(0).params())},
                  {"d_n.s1", snapshot_params(d_n.scale(1).params())}};
    c.optimizers = {{"g_n", {adam_g.t(), adam_g.state_tensors()}},
                    {"d_n.s0", {adam_d0.t(), adam_d0.state_tensors()}},
                    {"d_n.s1", {adam_d1.t(), adam_d1.state_tensors()}}};
    return c;
  };

  auto validate = [&]() -> double {
    ad::NoGradGuard ng;
    if (s2.val_metric == "psnr") {
      const auto pairs = detail::paired_val_indices(ds);
      if (pairs.empty())
        throw ConfigError("stage2 val_metric psnr requires name-matched low/normal val pairs");
      double sum = 0.0;
      for (const auto& [li, ni] : pairs) {
        const img::Image<T>& low = cache.get(li);
        sum += metrics::psnr(denoise(g_n, low, infer_enhanced(g_e, low)), cache.get(ni));
      }
      return sum / static_cast<double>(pairs.size());
    }
    Rng vrng = Rng::substream(seed, "val");
    const data::BatchSpec vspec{s2.batch_size, s2.crop, false, false};
    data::Batch<T> vb = data::sample_batch(ds, cache, vspec, vrng, detail::val_split_name(ds));
    auto x_low = Var<T>::leaf(img::to_nchw(vb.low));
    auto [ie, m] = stage1_infer(x_low);
    GLosses gl = generator_losses(x_low, ie, m, vrng);
    return -static_cast<double>(gl.total.item());
  };

  TrainOutcome<T> out;
  out.log_path = logger.path();
  double best_score = -std::numeric_limits<double>::infinity();
  int64_t it_global = 0;

  for (int64_t e = 1; e <= s2.epochs; ++e) {
    for (int64_t it = 0; it < ipe; ++it) {
      ++it_global;
      data::Batch<T> b = data::sample_batch(ds, cache, bspec, rng);
      auto x_low = Var<T>::leaf(img::to_nchw(b.low));
      auto x_norm = Var<T>::leaf(img::to_nchw(b.normal));
      auto [ie, m] = stage1_infer(x_low);

      // -- two-scale discriminator on instance-normalized images --
      Var<T> ic_fixed;
      {
        ad::NoGradGuard ng;
        ic_fixed = Var<T>::leaf(g_n.forward(x_low, ie, m).value());
      }
      auto real_scores = d_n.forward(ad::instance_norm(x_norm));
      auto fake_scores = d_n.forward(ad::instance_norm(ic_fixed));
      Var<T> loss_d = ad::mul_scalar(ad::add(nn::lsgan_d_loss(real_scores[0], fake_scores[0]),
                                             nn::lsgan_d_loss(real_scores[1], fake_scores[1])),
                                     T(0.5));
      d_n.scale(0).params().zero_grads();
      d_n.scale(1).params().zero_grads();
      loss_d.backward();
      adam_d0.step();
      adam_d1.step();

      // -- generator --
      GLosses gl = generator_losses(x_low, ie, m, prng);
      g_n.params().zero_grads();
      d_n.scale(0).params().zero_grads();
      d_n.scale(1).params().zero_grads();
      gl.total.backward();
      adam_g.step();

      IterRecord rec;
      rec.epoch = e;
      rec.iter = it_global;
      rec.lr = s2.lr;
      rec.losses = {{"d_n", static_cast<double>(loss_d.item())},
                    {"g_adv", static_cast<double>(gl.adv.item())},
                    {"g_color", static_cast<double>(gl.color.item())},
                    {"g_con_adapt", static_cast<double>(gl.con_adapt.item())},
                    {"g_con", static_cast<double>(gl.con.item())},
                    {"g_total", static_cast<double>(gl.total.item())}};
      rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      if (!detail::finite_losses(rec.losses))
        detail::abort_non_finite(out_dir, rec, b.low_ids, b.normal_ids);
      logger.log(rec);
    }

    const double score = validate();
    if (!std::isfinite(score)) {
      IterRecord rec;
      rec.epoch = e;
      rec.iter = it_global;
      rec.losses = {{"val_score", score}};
      detail::abort_non_finite(out_dir, rec, {}, {});
    }
    if (score > best_score) {
      best_score = score;
      out.best = make_ckpt(e, score);
      out.best_path = out_dir + "/stage2_best.ckpt";
      ckpt::save_checkpoint(out.best_path, out.best);
    }
    out.last = make_ckpt(e, score);
  }

  out.last_path = out_dir + "/stage2_last.ckpt";
  ckpt::save_checkpoint(out.last_path, out.last);
  out.log = logger.records();
  return out;
}

// ---------------------------------------------------------------------------
// Full-pipeline inference
// ---------------------------------------------------------------------------

template <class T>
struct EnhanceResult {
  img::Image<T> enhanced;  // Stage I output I_e
  img::Image<T> denoised;  // Stage II output I_c
};

/**
 * @brief Run both stages on one image of arbitrary size.
 *
 * The input is reflect-padded to the stride multiple (8), pushed through the
 * frozen generators, and both outputs are cropped back to the input size.
 *
 * @throws ConfigError when a checkpoint is for the wrong stage or its
 *         architecture does not match its config snapshot.
 */
template <class T>
EnhanceResult<T> enhance(const img::Image<T>& input, const ckpt::Checkpoint<T>& c1,
                         const ckpt::Checkpoint<T>& c2) {
  img::check_image(input, "enhance");
  if (c1.stage != 1) throw ConfigError("enhance: first checkpoint is not a stage-1 checkpoint");
  if (c2.stage != 2) throw ConfigError("enhance: second checkpoint is not a stage-2 checkpoint");
  nn::Stage1Generator<T> g_e = stage1_from_checkpoint(c1);
  nn::Stage2Generator<T> g_n = stage2_from_checkpoint(c2);

  const int64_t h = input.shape()[0], w = input.shape()[1];
  const img::Image<T> padded = pad_reflect_multiple(input, 8);
  ad::NoGradGuard ng;
  auto x = Var<T>::leaf(img::to_nchw(padded));
  Var<T> ie = retinex_graph(x, g_e.forward(x));
  Var<T> m = mask_graph(x, ie);
  Var<T> ic = g_n.forward(x, ie, m);
  EnhanceResult<T> out;
  out.enhanced = crop_image(img::to_hwc(ie.value()), h, w);
  out.denoised = crop_image(img::to_hwc(ic.value()), h, w);
  return out;
}

}  // namespace delight::train
