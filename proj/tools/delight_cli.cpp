/**
 * @file delight_cli.cpp
 * @brief Command-line front end: train-stage1, train-stage2, enhance, eval,
 *        pseudo-preview.
 *
 * Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
 * failure during training. CLI parse errors map to 2.
 */

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "delight/delight.hpp"

namespace fs = std::filesystem;
using namespace delight;

namespace {

/// Flags shared by every subcommand; CLI values override the config file.
struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<uint64_t> seed;
  std::string profile;
  std::optional<int64_t> workers;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "Config file (JSON); default $DELIGHT_CONFIG");
  cmd->add_option("--out", o.out_dir, "Output directory");
  cmd->add_option("--seed", o.seed, "Root RNG seed (overrides config)");
  cmd->add_option("--profile", o.profile, "Config profile: desk|paper (overrides config)");
  cmd->add_option("--workers", o.workers, "Data-loading workers (1 = deterministic)");
}

cfg::Config resolve_config(const CommonOpts& o) {
  std::string path = o.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("DELIGHT_CONFIG")) path = env;
  }
  cfg::Config c = path.empty() ? cfg::default_config(o.profile.empty() ? "desk" : o.profile)
                               : cfg::load_config(path, o.profile);
  if (o.seed) c.runtime.seed = *o.seed;
  if (o.workers) c.runtime.workers = *o.workers;
  cfg::validate(c);
  return c;
}

/// Manifest lands next to the config file when one was given, otherwise in
/// the output directory.
std::string manifest_path(const CommonOpts& o) {
  std::string cfg_path = o.config_path;
  if (cfg_path.empty()) {
    if (const char* env = std::getenv("DELIGHT_CONFIG")) cfg_path = env;
  }
  if (cfg_path.empty()) return (fs::path(o.out_dir) / "manifest.tsv").string();
  return (fs::path(cfg_path).parent_path() / "manifest.tsv").string();
}

data::UnpairedDataset prepare_dataset(const cfg::Config& c, const CommonOpts& o) {
  data::UnpairedDataset ds = data::load_dataset(c);
  for (const std::string& r : ds.rejects)
    std::cerr << "warning: rejected undecodable image " << r << "\n";
  fs::create_directories(o.out_dir);
  data::write_manifest(ds, manifest_path(o));
  return ds;
}

int run_train_stage1(const CommonOpts& o) {
  const cfg::Config c = resolve_config(o);
  data::UnpairedDataset ds = prepare_dataset(c, o);
  auto outcome = train::train_stage1<float>(std::move(ds), c, o.out_dir);
  std::cout << "best checkpoint: " << outcome.best_path
            << " (epoch " << outcome.best.epoch << ", val " << outcome.best.val_score << ")\n"
            << "last checkpoint: " << outcome.last_path << "\n"
            << "training log:    " << outcome.log_path << "\n";
  return 0;
}

int run_train_stage2(const CommonOpts& o, const std::string& stage1_ckpt) {
  const cfg::Config c = resolve_config(o);
  data::UnpairedDataset ds = prepare_dataset(c, o);
  auto s1 = ckpt::load_checkpoint<float>(stage1_ckpt);
  if (s1.stage != 1) throw ConfigError("--stage1-ckpt does not point at a stage-1 checkpoint");
  auto outcome = train::train_stage2<float>(std::move(ds), s1, c, o.out_dir);
  std::cout << "best checkpoint: " << outcome.best_path
            << " (epoch " << outcome.best.epoch << ", val " << outcome.best.val_score << ")\n"
            << "last checkpoint: " << outcome.last_path << "\n"
            << "training log:    " << outcome.log_path << "\n";
  return 0;
}

int run_enhance(const CommonOpts& o, const std::string& input, const std::string& stage1_ckpt,
                const std::string& stage2_ckpt, bool save_intermediate) {
  auto c1 = ckpt::load_checkpoint<float>(stage1_ckpt);
  auto c2 = ckpt::load_checkpoint<float>(stage2_ckpt);
  fs::create_directories(o.out_dir);

  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_regular_file()) inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(input);
  }
  if (inputs.empty()) throw DataError("enhance: no files under " + input);

  int64_t done = 0;
  for (const fs::path& p : inputs) {
    if (!io::is_image_file(p)) {
      std::cerr << "warning: skipping non-image file " << p.string() << "\n";
      continue;
    }
    auto im = io::load_image<float>(p.string());
    if (!im) {
      std::cerr << "warning: skipping undecodable image " << p.string() << "\n";
      continue;
    }
    auto result = train::enhance(*im, c1, c2);
    const std::string stem = p.stem().string();
    io::save_png((fs::path(o.out_dir) / (stem + "_enhanced.png")).string(), result.denoised);
    if (save_intermediate)
      io::save_png((fs::path(o.out_dir) / (stem + "_stage1.png")).string(), result.enhanced);
    ++done;
  }
  std::cout << "enhanced " << done << " image(s) into " << o.out_dir << "\n";
  return 0;
}

int run_eval(const CommonOpts& o, const std::string& outputs_dir, const std::string& refs_dir) {
  const cfg::Config c = resolve_config(o);
  if (!fs::is_directory(outputs_dir)) throw DataError("eval: not a directory: " + outputs_dir);
  if (!fs::is_directory(refs_dir)) throw DataError("eval: not a directory: " + refs_dir);

  // Pair by filename stem; every output row appears even without a match.
  std::map<std::string, std::string> refs;
  for (const auto& e : fs::directory_iterator(refs_dir))
    if (e.is_regular_file() && io::is_image_file(e.path()))
      refs[e.path().stem().string()] = e.path().string();
  std::vector<metrics::EvalPair> pairs;
  for (const auto& e : fs::directory_iterator(outputs_dir)) {
    if (!e.is_regular_file() || !io::is_image_file(e.path())) continue;
    const std::string id = e.path().stem().string();
    // enhanced outputs pair with references named after the source image
    std::string ref_stem = id;
    for (const std::string& suffix : {std::string("_enhanced"), std::string("_stage1")}) {
      if (ref_stem.size() > suffix.size() && ref_stem.ends_with(suffix) &&
          refs.count(ref_stem.substr(0, ref_stem.size() - suffix.size())))
        ref_stem = ref_stem.substr(0, ref_stem.size() - suffix.size());
    }
    auto it = refs.find(ref_stem);
    pairs.push_back({id, e.path().string(), it == refs.end() ? "" : it->second});
  }
  if (pairs.empty()) throw DataError("eval: no image outputs under " + outputs_dir);

  fs::create_directories(o.out_dir);
  const std::string report = (fs::path(o.out_dir) / c.eval.csv_name).string();
  metrics::EvalReport rep = metrics::evaluate(std::move(pairs), report);
  std::cout << "report: " << report << "\nmean psnr_db " << metrics::detail::fmt4(rep.mean_psnr)
            << ", mean ssim " << metrics::detail::fmt4(rep.mean_ssim) << "\n";
  if (rep.n_failed > 0) {
    std::cerr << "error: " << rep.n_failed << " pair(s) failed to evaluate\n";
    return 3;
  }
  return 0;
}

int run_pseudo_preview(const CommonOpts& o, const std::string& enhanced_path,
                       const std::string& denoised_path, const std::string& clean_path,
                       const std::string& low_path, const std::string& out_png) {
  const cfg::Config c = resolve_config(o);
  auto load = [](const std::string& p) {
    auto im = io::load_image<float>(p);
    if (!im) throw DataError("pseudo-preview: cannot read image: " + p);
    return *im;
  };
  const img::Image<float> ie = load(enhanced_path);
  const img::Image<float> ic = load(denoised_path);
  const img::Image<float> jc = load(clean_path);

  const Tensor<float> noise = img::estimate_noise(ie, ic);
  // λ comes from the (low, enhanced) brightness pair when a low image is
  // given; otherwise the canonical corrected-formula default of 2 is used.
  float mean_low = 0.25f, mean_enh = 0.5f;
  if (!low_path.empty()) {
    mean_low = load(low_path).mean_value();
    mean_enh = ie.mean_value();
  }
  const auto formula = c.stage2.gamma_formula == "paper" ? img::GammaFormula::kPaper
                                                         : img::GammaFormula::kCorrected;
  // noise must land on a clean image of the same size
  if (!jc.same_shape(noise))
    throw DataError("pseudo-preview: clean image shape differs from enhanced/denoised pair");
  img::PseudoTriple<float> t = img::make_pseudo_triple(jc, noise, mean_low, mean_enh, formula);

  const img::Image<float> composite = io::compose_panels<float>(
      {t.j_clean, t.j_enhanced, t.j_low, io::gray_to_rgb(t.mask)}, 2);
  fs::create_directories(fs::path(out_png).parent_path().empty()
                             ? "."
                             : fs::path(out_png).parent_path().string());
  io::save_png(out_png, composite);
  std::cout << "composite: " << out_png << " (lambda " << t.lambda << ", clipped "
            << t.clipped_fraction << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"delight: unsupervised low-light enhancement (decoupled two-stage pipeline)"};
  app.require_subcommand(1);

  CommonOpts o1, o2, oe, ov, op;
  std::string stage1_ckpt, stage2_ckpt, input, outputs_dir, refs_dir;
  std::string pv_enhanced, pv_denoised, pv_clean, pv_low, pv_out = "pseudo_preview.png";
  bool save_intermediate = false;

  CLI::App* c_s1 = app.add_subcommand("train-stage1", "Train the illumination network");
  add_common(c_s1, o1);

  CLI::App* c_s2 = app.add_subcommand("train-stage2", "Train the denoising network");
  add_common(c_s2, o2);
  c_s2->add_option("--stage1-ckpt", stage1_ckpt, "Frozen stage-1 checkpoint")->required();

  CLI::App* c_en = app.add_subcommand("enhance", "Enhance one image or a directory");
  add_common(c_en, oe);
  c_en->add_option("--input", input, "Image file or directory")->required();
  c_en->add_option("--stage1-ckpt", stage1_ckpt, "Stage-1 checkpoint")->required();
  c_en->add_option("--stage2-ckpt", stage2_ckpt, "Stage-2 checkpoint")->required();
  c_en->add_flag("--save-intermediate", save_intermediate, "Also write the stage-1 output");

  CLI::App* c_ev = app.add_subcommand("eval", "PSNR/SSIM report for output/reference pairs");
  add_common(c_ev, ov);
  c_ev->add_option("--outputs", outputs_dir, "Directory of enhanced outputs")->required();
  c_ev->add_option("--refs", refs_dir, "Directory of reference images")->required();

  CLI::App* c_pv = app.add_subcommand("pseudo-preview", "Render a pseudo-triple composite");
  add_common(c_pv, op);
  c_pv->add_option("--enhanced", pv_enhanced, "Stage-1 output I_e")->required();
  c_pv->add_option("--denoised", pv_denoised, "Stage-2 output I_c")->required();
  c_pv->add_option("--clean", pv_clean, "Clean image J_c")->required();
  c_pv->add_option("--low", pv_low, "Optional low-light image for the gamma estimate");
  c_pv->add_option("--preview-out", pv_out, "Composite PNG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // --help exits 0; any parse failure is a config error
  }

  try {
    if (c_s1->parsed()) return run_train_stage1(o1);
    if (c_s2->parsed()) return run_train_stage2(o2, stage1_ckpt);
    if (c_en->parsed()) return run_enhance(oe, input, stage1_ckpt, stage2_ckpt, save_intermediate);
    if (c_ev->parsed()) return run_eval(ov, outputs_dir, refs_dir);
    if (c_pv->parsed())
      return run_pseudo_preview(op, pv_enhanced, pv_denoised, pv_clean, pv_low, pv_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
