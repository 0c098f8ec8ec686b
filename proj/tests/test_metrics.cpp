// Quality metrics: PSNR/SSIM anchors and the CSV evaluation report.

#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "delight/errors.hpp"
#include "delight/image_io.hpp"
#include "delight/metrics.hpp"
#include "test_util.hpp"

using namespace delight;
using img::Image;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("psnr: 0.1 uniform difference is exactly 20 dB") {
  Image<double> a({8, 8, 3});
  Image<double> b({8, 8, 3});
  a.fill(0.5);
  b.fill(0.6);
  CHECK(std::abs(metrics::psnr(a, b) - 20.0) <= 1e-6);
  CHECK(std::abs(metrics::psnr(b, a) - 20.0) <= 1e-6);
}

TEST_CASE("psnr: cap on identical images, known MSE anchors, validation") {
  Rng rng(701);
  Image<double> a = testutil::random_tensor<double>(rng, {6, 6, 3}, 0.0, 1.0);
  CHECK(metrics::psnr(a, a) == metrics::kPsnrCap);

  Image<double> b = a;
  for (int64_t i = 0; i < b.numel(); ++i) b[i] = std::min(1.0, a[i] + 1e-9);
  CHECK(metrics::psnr(a, b) <= metrics::kPsnrCap);  // near-identical still capped

  Image<double> z({4, 4, 3});
  Image<double> h({4, 4, 3});
  h.fill(0.5);
  // MSE 0.25 -> 10*log10(4)
  CHECK(metrics::psnr(z, h) == Catch::Approx(10.0 * std::log10(4.0)).margin(1e-9));

  CHECK_THROWS_AS(metrics::psnr(a, Image<double>({6, 5, 3})), std::invalid_argument);
  CHECK_THROWS_AS(metrics::psnr(Tensor<double>({6, 6}), Tensor<double>({6, 6})),
                  std::invalid_argument);
}

TEST_CASE("ssim: perfect score on identity, luma-only sensitivity") {
  Rng rng(702);
  Image<double> a = testutil::synthetic_image<double>(rng, 24, 24, 0.5, 0.4);
  CHECK(metrics::ssim(a, a) == 1.0);

  // chroma shift with luma held fixed: 0.299*dr + 0.587*dg = 0
  Image<double> chroma = a;
  for (int64_t i = 0; i < chroma.numel(); i += 3) {
    const double eps = 0.02;
    if (a[i] + 0.587 * eps <= 1.0 && a[i + 1] - 0.299 * eps >= 0.0) {
      chroma[i] += 0.587 * eps;
      chroma[i + 1] -= 0.299 * eps;
    }
  }
  CHECK(metrics::ssim(a, chroma) == Catch::Approx(1.0).margin(1e-9));

  // additive noise must strictly lower the score
  Image<double> noisy = a;
  for (int64_t i = 0; i < noisy.numel(); ++i)
    noisy[i] = std::min(1.0, std::max(0.0, noisy[i] + rng.normal(0.0, 0.1)));
  const double s = metrics::ssim(a, noisy);
  CHECK(s < 0.99);
  CHECK(s > 0.0);
  // symmetric up to product-order rounding in the window moments
  CHECK(metrics::ssim(a, noisy) == Catch::Approx(metrics::ssim(noisy, a)).margin(1e-12));
}

TEST_CASE("ssim: window demands at least 11 pixels per side") {
  Image<double> tiny({10, 24, 3});
  tiny.fill(0.5);
  CHECK_THROWS_AS(metrics::ssim(tiny, tiny), std::invalid_argument);
  Image<double> ok({11, 11, 3});
  ok.fill(0.5);
  CHECK(metrics::ssim(ok, ok) == 1.0);
  CHECK_THROWS_AS(metrics::ssim(ok, Image<double>({11, 12, 3})), std::invalid_argument);
}

TEST_CASE("evaluate: identical pairs give the exact canonical CSV") {
  Rng rng(703);
  const std::string dir = testutil::temp_dir("eval");
  std::vector<metrics::EvalPair> pairs;
  for (int i = 0; i < 3; ++i) {
    const std::string p = dir + "/im" + std::to_string(i) + ".png";
    io::save_png(p, testutil::synthetic_image<float>(rng, 16, 16, 0.5, 0.3));
    pairs.push_back({"img" + std::to_string(i), p, p});
  }
  const std::string report = dir + "/report.csv";
  metrics::EvalReport rep = metrics::evaluate(pairs, report);
  CHECK(rep.n_failed == 0);
  CHECK(rep.mean_psnr == 100.0);
  CHECK(rep.mean_ssim == 1.0);

  auto ls = lines_of(slurp(report));
  REQUIRE(ls.size() == 5);
  CHECK(ls[0] == "id,psnr_db,ssim");
  CHECK(ls[1] == "img0,100.0000,1.0000");
  CHECK(ls[4] == "mean,100.0000,1.0000");
}

TEST_CASE("evaluate: rows sorted by id, failures recorded, exit signal") {
  Rng rng(704);
  const std::string dir = testutil::temp_dir("eval2");
  const std::string good = dir + "/good.png";
  const std::string other = dir + "/other.png";
  io::save_png(good, testutil::synthetic_image<float>(rng, 16, 16, 0.4, 0.2));
  io::save_png(other, testutil::synthetic_image<float>(rng, 16, 16, 0.6, 0.2));
  const std::string small = dir + "/small.png";
  io::save_png(small, testutil::synthetic_image<float>(rng, 16, 12, 0.5, 0.2));

  std::vector<metrics::EvalPair> pairs = {
      {"zz", good, other},
      {"aa", good, good},
      {"mm", good, dir + "/absent.png"},      // unreadable reference
      {"nn", good, small},                    // shape mismatch
  };
  const std::string report = dir + "/report.csv";
  metrics::EvalReport rep = metrics::evaluate(pairs, report);
  CHECK(rep.n_failed == 2);
  REQUIRE(rep.rows.size() == 4);
  CHECK(rep.rows[0].id == "aa");
  CHECK(rep.rows[1].id == "mm");
  CHECK(rep.rows[2].id == "nn");
  CHECK(rep.rows[3].id == "zz");
  CHECK(rep.rows[0].ok);
  CHECK_FALSE(rep.rows[1].ok);
  CHECK_FALSE(rep.rows[2].ok);

  auto ls = lines_of(slurp(report));
  REQUIRE(ls.size() == 6);
  CHECK(ls[2] == "mm,failed,failed");
  CHECK(ls[3] == "nn,failed,failed");
  // means aggregate only the two scored rows
  const double want_psnr = (100.0 + metrics::psnr(*io::load_image<double>(good),
                                                  *io::load_image<double>(other))) /
                           2.0;
  CHECK(rep.mean_psnr == Catch::Approx(want_psnr).margin(1e-9));

  CHECK_THROWS_AS(metrics::evaluate({}, report), std::invalid_argument);
  CHECK_THROWS_AS(metrics::evaluate(pairs, dir + "/no_dir/report.csv"), DataError);
}
