// Pseudo-triple construction: additive-noise exactness, gamma clamping,
// clipping accounting, clean-pool matching.

#include <catch2/catch_amalgamated.hpp>

#include "delight/errors.hpp"
#include "delight/pseudo.hpp"
#include "delight/rng.hpp"
#include "test_util.hpp"

using namespace delight;
using img::Image;

TEST_CASE("unclipped triples satisfy (J_e - J_c) == I_n exactly") {
  // clean in [0.1, 0.9], noise in [-0.1, 0.1]: J_c + I_n never leaves [0,1],
  // so the clamp is inert and the identity holds to float rounding
  Rng rng(501);
  for (int rep = 0; rep < 10; ++rep) {
    Image<double> clean = testutil::random_tensor<double>(rng, {12, 12, 3}, 0.1, 0.9);
    Tensor<double> noise = testutil::random_tensor<double>(rng, {12, 12, 3}, -0.1, 0.1);
    auto t = img::make_pseudo_triple(clean, noise, 0.25, 0.5);
    CHECK(t.clipped_fraction == 0.0);
    for (int64_t i = 0; i < noise.numel(); ++i)
      CHECK(std::abs((t.j_enhanced[i] - t.j_clean[i]) - noise[i]) <= 1e-7);
  }
}

TEST_CASE("triple internals: lambda, gamma map, mask") {
  Rng rng(502);
  Image<double> clean = testutil::random_tensor<double>(rng, {8, 8, 3}, 0.2, 0.8);
  Tensor<double> noise(clean.shape());
  auto t = img::make_pseudo_triple(clean, noise, 0.25, 0.5);
  CHECK(t.lambda == Catch::Approx(2.0).margin(1e-9));

  // J_l = J_e^lambda and M_J = max(illu(J_e) - illu(J_l), 0), recomputed here
  Image<double> jl = img::gamma_apply(t.j_enhanced, t.lambda);
  for (int64_t i = 0; i < jl.numel(); ++i) CHECK(t.j_low[i] == jl[i]);
  auto mask = img::illumination_mask(t.j_low, t.j_enhanced);
  REQUIRE(t.mask.same_shape(mask));
  for (int64_t i = 0; i < mask.numel(); ++i) CHECK(t.mask[i] == mask[i]);
  // gamma > 1 darkens, so the mask is strictly positive on interior pixels
  for (int64_t i = 0; i < t.mask.numel(); ++i) CHECK(t.mask[i] >= 0.0);
}

TEST_CASE("lambda clamping happens in make_pseudo_triple, not estimate_gamma") {
  // means 0.9 -> 0.5: raw exponent log(0.9)/log(0.5) ~ 0.152, below the floor
  const double raw = img::estimate_gamma(0.9, 0.5);
  CHECK(raw == Catch::Approx(std::log(0.9) / std::log(0.5)).margin(1e-12));
  CHECK(raw < img::kLambdaMin);

  Image<double> clean({4, 4, 3});
  clean.fill(0.5);
  Tensor<double> noise(clean.shape());
  auto low = img::make_pseudo_triple(clean, noise, 0.9, 0.5);
  CHECK(low.lambda == img::kLambdaMin);

  // near-black mean: raw exponent log(1e-3)/log(0.6) ~ 13.5, clamped to the
  // ceiling; the mean itself is epsilon-clamped so the log stays finite
  auto high = img::make_pseudo_triple(clean, noise, 0.0, 0.6);
  CHECK(high.lambda == img::kLambdaMax);

  // in-range exponents pass through untouched
  auto mid = img::make_pseudo_triple(clean, noise, 0.1, 0.6);
  CHECK(mid.lambda == Catch::Approx(std::log(0.1) / std::log(0.6)).margin(1e-12));
}

TEST_CASE("clipped_fraction counts exactly the clamped pixels") {
  Image<double> clean({1, 4, 3});
  Tensor<double> noise({1, 4, 3});
  // pixel 0: 0.5+0.6=1.1 clips; pixel 1: 0.1-0.3=-0.2 clips; pixels 2,3 stay
  for (int64_t c = 0; c < 3; ++c) {
    clean.at3(0, 0, c) = 0.5;
    noise.at3(0, 0, c) = 0.6;
    clean.at3(0, 1, c) = 0.1;
    noise.at3(0, 1, c) = -0.3;
    clean.at3(0, 2, c) = 0.4;
    noise.at3(0, 2, c) = 0.2;
    clean.at3(0, 3, c) = 0.9;
    noise.at3(0, 3, c) = 0.1;  // exactly 1.0: not clipped
  }
  auto t = img::make_pseudo_triple(clean, noise, 0.25, 0.5);
  CHECK(t.clipped_fraction == Catch::Approx(6.0 / 12.0));
  for (int64_t c = 0; c < 3; ++c) {
    CHECK(t.j_enhanced.at3(0, 0, c) == 1.0);
    CHECK(t.j_enhanced.at3(0, 1, c) == 0.0);
    CHECK(t.j_enhanced.at3(0, 3, c) == 1.0);
  }
}

TEST_CASE("estimate_noise and shape validation") {
  Rng rng(503);
  Image<double> e = testutil::random_tensor<double>(rng, {5, 5, 3}, 0.0, 1.0);
  Image<double> c = testutil::random_tensor<double>(rng, {5, 5, 3}, 0.0, 1.0);
  Tensor<double> n = img::estimate_noise(e, c);
  for (int64_t i = 0; i < n.numel(); ++i) {
    CHECK(n[i] == e[i] - c[i]);
    CHECK(n[i] >= -1.0);
    CHECK(n[i] <= 1.0);
  }
  Image<double> other({4, 5, 3});
  CHECK_THROWS_AS(img::estimate_noise(e, other), std::invalid_argument);
  CHECK_THROWS_AS(img::make_pseudo_triple(c, Tensor<double>({5, 5, 2}), 0.25, 0.5),
                  std::invalid_argument);
}

TEST_CASE("clamp_mean pins to [eps, 1-eps]") {
  CHECK(img::clamp_mean(-0.5) == img::kMeanClampLo);
  CHECK(img::clamp_mean(0.0) == img::kMeanClampLo);
  CHECK(img::clamp_mean(0.5) == 0.5);
  CHECK(img::clamp_mean(1.0) == 1.0 - img::kMeanClampLo);
  CHECK(img::clamp_mean(7.0) == 1.0 - img::kMeanClampLo);
}

TEST_CASE("match_clean: uniform draws from the pool, empty pool refused") {
  Rng rng(504);
  CHECK_THROWS_AS(img::match_clean_index(rng, 0), ConfigError);

  std::vector<img::Image<double>> pool;
  for (int k = 0; k < 4; ++k) pool.push_back(Tensor<double>::full({2, 2, 3}, 0.25 * k));
  std::vector<int> hits(4, 0);
  for (int rep = 0; rep < 4000; ++rep) {
    const img::Image<double>& pick = img::match_clean(rng, pool);
    for (int k = 0; k < 4; ++k)
      if (&pick == &pool[static_cast<size_t>(k)]) ++hits[static_cast<size_t>(k)];
  }
  int total = 0;
  for (int k = 0; k < 4; ++k) {
    CHECK(hits[static_cast<size_t>(k)] > 800);  // ~1000 expected
    total += hits[static_cast<size_t>(k)];
  }
  CHECK(total == 4000);

  // reproducible from the generator state
  Rng a(99), b(99);
  for (int rep = 0; rep < 50; ++rep)
    CHECK(img::match_clean_index(a, 17) == img::match_clean_index(b, 17));
}

TEST_CASE("paper-mode gamma flows through the triple") {
  Image<double> clean({2, 2, 3});
  clean.fill(0.5);
  Tensor<double> noise(clean.shape());
  // paper form: log(0.6)/log(0.2) ~ 0.317 -> clamped up to 1
  auto t = img::make_pseudo_triple(clean, noise, 0.2, 0.6, img::GammaFormula::kPaper);
  CHECK(t.lambda == img::kLambdaMin);
  // corrected form with the same means: log(0.2)/log(0.6) ~ 3.15, in range
  auto t2 = img::make_pseudo_triple(clean, noise, 0.2, 0.6, img::GammaFormula::kCorrected);
  CHECK(t2.lambda == Catch::Approx(std::log(0.2) / std::log(0.6)).margin(1e-12));
}
