// Reference imaging primitives: Retinex recovery, gamma estimation,
// normalization, pooling, patch sampling, layout bridges.

#include <catch2/catch_amalgamated.hpp>

#include "delight/imaging.hpp"
#include "delight/rng.hpp"
#include "test_util.hpp"

using namespace delight;
using img::Image;

TEST_CASE("retinex round trip recovers the enhanced image exactly") {
  // I_l := I_e * S with S >= 0.1 keeps I_l/S in [0,1], so the clamp is inert
  // and recovery must be exact to float rounding.
  Rng rng(201);
  for (int rep = 0; rep < 20; ++rep) {
    Image<double> ie = testutil::random_tensor<double>(rng, {16, 16, 3}, 0.0, 1.0);
    Image<double> s = testutil::random_tensor<double>(rng, {16, 16, 3}, 0.1, 1.0);
    Image<double> il(ie.shape());
    for (int64_t i = 0; i < il.numel(); ++i) il[i] = ie[i] * s[i];
    Image<double> back = img::retinex_recover(il, s);
    double max_err = 0.0;
    for (int64_t i = 0; i < back.numel(); ++i) max_err = std::max(max_err, std::abs(back[i] - ie[i]));
    CHECK(max_err <= 1e-12);
  }
}

TEST_CASE("retinex_recover clamps and validates") {
  Image<double> low({2, 2, 3});
  low.fill(0.9);
  Image<double> s({2, 2, 3});
  s.fill(0.5);
  Image<double> out = img::retinex_recover(low, s);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 1.0);  // 1.8 clipped

  Image<double> tiny({2, 2, 3});
  tiny.fill(0.001);  // below kEpsS
  CHECK_THROWS_AS(img::retinex_recover(low, tiny), std::domain_error);

  Image<double> wrong({3, 2, 3});
  wrong.fill(0.5);
  CHECK_THROWS_AS(img::retinex_recover(low, wrong), std::invalid_argument);
  CHECK_THROWS_AS(img::retinex_recover(Tensor<double>({2, 2}), s), std::invalid_argument);
}

TEST_CASE("grayscale_illu applies BT.601 weights") {
  Image<double> im({1, 3, 3});
  // pure red, pure green, pure blue pixels
  im.at3(0, 0, 0) = 1.0;
  im.at3(0, 1, 1) = 1.0;
  im.at3(0, 2, 2) = 1.0;
  auto g = img::grayscale_illu(im);
  CHECK(g[0] == Catch::Approx(0.299));
  CHECK(g[1] == Catch::Approx(0.587));
  CHECK(g[2] == Catch::Approx(0.114));
}

TEST_CASE("illumination_mask is the positive part of the luma gain") {
  Image<double> low({1, 2, 3});
  Image<double> enh({1, 2, 3});
  low.fill(0.3);
  enh.fill(0.3);
  for (int64_t c = 0; c < 3; ++c) enh.at3(0, 0, c) = 0.8;  // brighter
  for (int64_t c = 0; c < 3; ++c) enh.at3(0, 1, c) = 0.1;  // darker -> clipped to 0
  auto m = img::illumination_mask(low, enh);
  CHECK(m[0] == Catch::Approx(0.5));
  CHECK(m[1] == 0.0);
}

TEST_CASE("gamma_apply matches pow and rejects non-positive exponents") {
  Image<double> im({1, 1, 3});
  im[0] = 0.25;
  im[1] = 0.5;
  im[2] = 1.0;
  auto g = img::gamma_apply(im, 2.0);
  CHECK(g[0] == Catch::Approx(0.0625));
  CHECK(g[1] == Catch::Approx(0.25));
  CHECK(g[2] == Catch::Approx(1.0));
  CHECK_THROWS_AS(img::gamma_apply(im, 0.0), std::domain_error);
  CHECK_THROWS_AS(img::gamma_apply(im, -1.5), std::domain_error);
}

TEST_CASE("estimate_gamma: corrected form, paper form, domain guard") {
  // canonical anchor: log(0.25)/log(0.5) = 2
  CHECK(img::estimate_gamma(0.25, 0.5) == Catch::Approx(2.0).margin(1e-12));
  CHECK(img::estimate_gamma(0.25, 0.5, img::GammaFormula::kPaper) ==
        Catch::Approx(0.5).margin(1e-12));

  // corrected form solves m_e^λ = m_l, so a constant image at the enhanced
  // mean lands on the low mean after gamma correction
  Rng rng(202);
  for (int rep = 0; rep < 10; ++rep) {
    const double ml = rng.uniform(0.05, 0.45), me = rng.uniform(0.5, 0.95);
    const double lambda = img::estimate_gamma(ml, me);
    Image<double> im({4, 4, 3});
    im.fill(me);
    auto mapped = img::gamma_apply(im, lambda);
    double mean = 0.0;
    for (int64_t i = 0; i < mapped.numel(); ++i) mean += mapped[i];
    mean /= static_cast<double>(mapped.numel());
    CHECK(mean == Catch::Approx(ml).margin(1e-6));
  }

  for (const auto& [a, b] : std::vector<std::pair<double, double>>{
           {0.0, 0.5}, {0.5, 0.0}, {1.0, 0.5}, {0.5, 1.0}, {-0.1, 0.5}, {0.5, 1.2}}) {
    CHECK_THROWS_AS(img::estimate_gamma(a, b), std::domain_error);
  }
}

TEST_CASE("instance_normalize zeroes means, unit variances, affine invariance") {
  Rng rng(203);
  Tensor<double> f = testutil::random_tensor<double>(rng, {4, 8, 8}, -2.0, 2.0);
  Tensor<double> n = img::instance_normalize(f);
  const int64_t hw = 64;
  for (int64_t c = 0; c < 4; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < hw; ++i) mean += n[c * hw + i];
    mean /= hw;
    for (int64_t i = 0; i < hw; ++i) var += (n[c * hw + i] - mean) * (n[c * hw + i] - mean);
    var /= hw;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-9);
  }

  // y = a*x + b must normalize to the same result
  Tensor<double> g(f.shape());
  for (int64_t i = 0; i < f.numel(); ++i) g[i] = 3.7 * f[i] - 1.2;
  Tensor<double> n2 = img::instance_normalize(g);
  for (int64_t i = 0; i < n.numel(); ++i) CHECK(std::abs(n2[i] - n[i]) < 1e-9);

  // constant channel: variance floor keeps the output at zero
  Tensor<double> flat = Tensor<double>::full({1, 4, 4}, 0.42);
  Tensor<double> nf = img::instance_normalize(flat);
  for (int64_t i = 0; i < nf.numel(); ++i) CHECK(nf[i] == 0.0);

  CHECK_THROWS_AS(img::instance_normalize(Tensor<double>({2, 2})), std::invalid_argument);
}

TEST_CASE("avg_downsample: identity at 1, exact means, edge replication") {
  Image<double> im({2, 4, 3});
  for (int64_t i = 0; i < im.numel(); ++i) im[i] = static_cast<double>(i);
  CHECK(img::avg_downsample(im, 1).same_shape(im));

  auto d = img::avg_downsample(im, 2);
  REQUIRE(d.shape() == std::vector<int64_t>{1, 2, 3});
  // block mean over rows {0,1} cols {0,1} channel 0: values 0,3,12,15
  CHECK(d.at3(0, 0, 0) == Catch::Approx((0.0 + 3.0 + 12.0 + 15.0) / 4.0));

  // 3x3 from a 2-wide image replicates the last column
  Image<double> odd({1, 2, 3});
  odd.at3(0, 0, 0) = 1.0;
  odd.at3(0, 1, 0) = 5.0;
  auto r = img::avg_downsample(odd, 3);
  REQUIRE(r.shape() == std::vector<int64_t>{1, 1, 3});
  CHECK(r.at3(0, 0, 0) == Catch::Approx((1.0 + 5.0 + 5.0) * 3.0 / 9.0));

  CHECK_THROWS_AS(img::avg_downsample(im, 0), std::invalid_argument);
}

TEST_CASE("crop_patches: bounds, content, draw order, errors") {
  Rng rng(204);
  Image<double> im({10, 12, 3});
  for (int64_t i = 0; i < im.numel(); ++i) im[i] = static_cast<double>(i) * 0.001;

  Rng probe = rng;  // same state: origins must be row first, then column
  auto patches = img::crop_patches(im, 4, 5, rng);
  REQUIRE(patches.size() == 5);
  for (const auto& p : patches) {
    const int64_t er = static_cast<int64_t>(probe.uniform_int(7));   // 10-4+1
    const int64_t ec = static_cast<int64_t>(probe.uniform_int(9));   // 12-4+1
    CHECK(p.row == er);
    CHECK(p.col == ec);
    REQUIRE(p.pixels.shape() == std::vector<int64_t>{4, 4, 3});
    for (int64_t r = 0; r < 4; ++r)
      for (int64_t c = 0; c < 4; ++c)
        for (int64_t ch = 0; ch < 3; ++ch)
          CHECK(p.pixels.at3(r, c, ch) == im.at3(p.row + r, p.col + c, ch));
  }

  CHECK_THROWS_AS(img::crop_patches(im, 11, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(img::crop_patches(im, 0, 1, rng), std::invalid_argument);
  CHECK(img::crop_patches(im, 10, 3, rng).size() == 3);  // size == min dim is legal
}

TEST_CASE("to_nchw / to_hwc round trip and validation") {
  Rng rng(205);
  Image<float> a = testutil::random_tensor<float>(rng, {5, 7, 3}, 0.0, 1.0);
  Image<float> b = testutil::random_tensor<float>(rng, {5, 7, 3}, 0.0, 1.0);
  Tensor<float> batch = img::to_nchw(std::vector<Tensor<float>>{a, b});
  REQUIRE(batch.shape() == std::vector<int64_t>{2, 3, 5, 7});
  CHECK(batch.at4(1, 2, 4, 6) == b.at3(4, 6, 2));

  Tensor<float> back = img::to_hwc(batch, 0);
  REQUIRE(back.same_shape(a));
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(back[i] == a[i]);

  CHECK_THROWS_AS(img::to_hwc(batch, 2), std::invalid_argument);
  CHECK_THROWS_AS(img::to_nchw(std::vector<Tensor<float>>{}), std::invalid_argument);
  Image<float> c({4, 7, 3});
  CHECK_THROWS_AS(img::to_nchw(std::vector<Tensor<float>>{a, c}), std::invalid_argument);
}
