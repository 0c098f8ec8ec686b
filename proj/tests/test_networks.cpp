// Architecture contracts: parameter counts derived by hand from the channel
// tables, forward shapes and ranges, validation guards, extractor weights IO.

#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "delight/errors.hpp"
#include "delight/networks.hpp"
#include "delight/serialize.hpp"
#include "delight/sha256.hpp"
#include "test_util.hpp"

using namespace delight;
using ad::Var;

namespace {

// closed-form scalar counts from the layer tables in the class definitions
int64_t stage1_count(int64_t b) { return 718 * b * b + 102 * b + 87; }
int64_t stage2_count(int64_t b, int64_t R) {
  return (63 + 72 * R) * b * b + (101 + 8 * R) * b + 87;
}
int64_t disc_count(int64_t b) { return 672 * b * b + 191 * b + 1; }

Var<float> rand_input(Rng& rng, std::vector<int64_t> shape) {
  return Var<float>::leaf(testutil::random_tensor<float>(rng, std::move(shape), 0.0, 1.0));
}

}  // namespace

TEST_CASE("stage-1 generator parameter count matches the channel table") {
  for (int64_t b : {4, 8, 32}) {
    nn::Stage1Generator<float>::Spec spec;
    spec.base_channels = b;
    nn::Stage1Generator<float> g(spec, 42);
    CHECK(g.params().scalar_count() == stage1_count(b));
  }
}

TEST_CASE("stage-1 forward: illumination map in [eps_S, 1], input shape kept") {
  Rng rng(401);
  nn::Stage1Generator<float>::Spec spec;
  spec.base_channels = 4;
  nn::Stage1Generator<float> g(spec, 42);
  Var<float> x = rand_input(rng, {2, 3, 32, 40});
  Var<float> s = g.forward(x);
  REQUIRE(s.shape() == std::vector<int64_t>{2, 3, 32, 40});
  for (int64_t i = 0; i < s.numel(); ++i) {
    CHECK(s.value()[i] >= static_cast<float>(img::kEpsS));
    CHECK(s.value()[i] <= 1.0f);
  }

  CHECK_THROWS_AS(g.forward(rand_input(rng, {1, 3, 30, 32})), std::invalid_argument);
  CHECK_THROWS_AS(g.forward(rand_input(rng, {1, 1, 32, 32})), std::invalid_argument);
}

TEST_CASE("stage-1 pyramid strictness: public contract vs internal cap") {
  Rng rng(402);
  nn::Stage1Generator<float>::Spec spec;
  spec.base_channels = 4;
  nn::Stage1Generator<float> g(spec, 42);

  Var<float> small = rand_input(rng, {1, 16, 8, 8});
  CHECK_THROWS_AS(g.pyramid(small, /*strict=*/true), std::invalid_argument);
  CHECK(g.pyramid(small, /*strict=*/false).shape() == std::vector<int64_t>{1, 16, 8, 8});

  // 64x64 input bottlenecks to 8x8 (<16); the forward path must still work
  Var<float> x = rand_input(rng, {1, 3, 64, 64});
  CHECK(g.forward(x).shape() == std::vector<int64_t>{1, 3, 64, 64});

  Var<float> big = rand_input(rng, {1, 16, 16, 16});
  CHECK(g.pyramid(big, /*strict=*/true).shape() == std::vector<int64_t>{1, 16, 16, 16});
}

TEST_CASE("stage-1 zeroed weights give the constant sigmoid of the final bias") {
  nn::Stage1Generator<float>::Spec spec;
  spec.base_channels = 4;
  nn::Stage1Generator<float> g(spec, 42);
  for (const auto& name : g.params().names()) {
    Tensor<float>& v = g.params().get(name).value();
    for (int64_t i = 0; i < v.numel(); ++i) v[i] = 0.0f;
  }
  g.params().get("d3b.b").value().fill(-1.0f);

  Rng rng(403);
  Var<float> x = rand_input(rng, {1, 3, 16, 16});
  Var<float> s = g.forward(x);
  const float expect = 1.0f / (1.0f + std::exp(1.0f));  // sigmoid(-1) > eps_S
  for (int64_t i = 0; i < s.numel(); ++i)
    CHECK(s.value()[i] == Catch::Approx(expect).margin(1e-6));
}

TEST_CASE("stage-2 generator parameter count matches the channel table") {
  for (const auto& [b, R] : std::vector<std::pair<int64_t, int64_t>>{{4, 2}, {8, 6}, {32, 6}}) {
    nn::Stage2Generator<float>::Spec spec;
    spec.base_channels = b;
    spec.n_res_blocks = R;
    nn::Stage2Generator<float> g(spec, 43);
    CHECK(g.params().scalar_count() == stage2_count(b, R));
  }
}

TEST_CASE("stage-2 forward: shape preserved, sigmoid range, validation") {
  Rng rng(404);
  nn::Stage2Generator<float>::Spec spec;
  spec.base_channels = 4;
  spec.n_res_blocks = 2;
  nn::Stage2Generator<float> g(spec, 43);

  Var<float> low = rand_input(rng, {2, 3, 16, 20});
  Var<float> enh = rand_input(rng, {2, 3, 16, 20});
  Var<float> mask = rand_input(rng, {2, 1, 16, 20});
  Var<float> out = g.forward(low, enh, mask);
  REQUIRE(out.shape() == std::vector<int64_t>{2, 3, 16, 20});
  for (int64_t i = 0; i < out.numel(); ++i) {
    CHECK(out.value()[i] >= 0.0f);
    CHECK(out.value()[i] <= 1.0f);
  }

  CHECK_THROWS_AS(g.forward(low, enh, rand_input(rng, {2, 3, 16, 20})), std::invalid_argument);
  CHECK_THROWS_AS(g.forward(low, rand_input(rng, {2, 3, 16, 16}), mask), std::invalid_argument);
  CHECK_THROWS_AS(g.forward(rand_input(rng, {1, 3, 14, 20}), rand_input(rng, {1, 3, 14, 20}),
                            rand_input(rng, {1, 1, 14, 20})),
                  std::invalid_argument);
}

TEST_CASE("discriminator: parameter count, score shape, minimum input") {
  Rng rng(405);
  nn::Discriminator<float>::Spec spec;
  spec.base_channels = 8;
  nn::Discriminator<float> d(spec, 44);
  CHECK(d.params().scalar_count() == disc_count(8));

  Var<float> x = rand_input(rng, {3, 3, 32, 32});
  Var<float> s = d.forward(x);
  REQUIRE(s.shape() == std::vector<int64_t>{3});

  CHECK_THROWS_AS(d.forward(rand_input(rng, {1, 3, 31, 32})), std::invalid_argument);
  CHECK_THROWS_AS(d.forward(rand_input(rng, {1, 1, 32, 32})), std::invalid_argument);
  CHECK(d.forward(rand_input(rng, {1, 3, 48, 32})).shape() == std::vector<int64_t>{1});

  // same seed, same scores
  nn::Discriminator<float> d2(spec, 44);
  Var<float> s2 = d2.forward(x);
  for (int64_t i = 0; i < s.numel(); ++i) CHECK(s2.value()[i] == s.value()[i]);
}

TEST_CASE("multiscale discriminator: two independent critics, even-dim guard") {
  Rng rng(406);
  nn::MultiscaleDiscriminator<float>::Spec spec;
  spec.base_channels = 8;
  nn::MultiscaleDiscriminator<float> md(spec, 45);
  REQUIRE(md.n_scales() == 2);
  CHECK(md.scale(0).params().scalar_count() == disc_count(8));
  CHECK(md.scale(1).params().scalar_count() == disc_count(8));

  // the two critics share an init stream but not values
  const Tensor<float>& w0 = md.scale(0).params().get("s0.l1.w").value();
  const Tensor<float>& w1 = md.scale(1).params().get("s1.l1.w").value();
  bool any_diff = false;
  for (int64_t i = 0; i < w0.numel() && !any_diff; ++i) any_diff = w0[i] != w1[i];
  CHECK(any_diff);

  Var<float> x = rand_input(rng, {2, 3, 64, 64});
  auto scores = md.forward(x);
  REQUIRE(scores.size() == 2);
  CHECK(scores[0].shape() == std::vector<int64_t>{2});
  CHECK(scores[1].shape() == std::vector<int64_t>{2});
  // second critic scores the 2x-pooled input with its own weights
  Var<float> pooled_score = md.scale(1).forward(ad::avgpool(x, 2));
  for (int64_t i = 0; i < 2; ++i) CHECK(scores[1].value()[i] == pooled_score.value()[i]);

  CHECK_THROWS_AS(md.forward(rand_input(rng, {1, 3, 66, 65})), std::invalid_argument);
}

TEST_CASE("vgg extractor at width 1.0 has the canonical VGG19 conv count") {
  nn::VggExtractor<float>::Spec spec;
  spec.kind = nn::VggExtractor<float>::Kind::kTest;
  spec.width_mult = 1.0;
  spec.seed = 1;
  nn::VggExtractor<float> ex(spec);
  CHECK(ex.params().scalar_count() == 20024384);  // 16 convs + biases
  CHECK(ex.layers().size() == 5);
}

TEST_CASE("vgg extractor taps have the documented shapes and honor order") {
  Rng rng(407);
  nn::VggExtractor<float>::Spec spec;
  spec.kind = nn::VggExtractor<float>::Kind::kTest;
  spec.width_mult = 0.125;  // channels 8,16,32,64,64
  spec.seed = 7;
  nn::VggExtractor<float> ex(spec);

  Var<float> x = rand_input(rng, {2, 3, 32, 32});
  auto feats = ex.extract(x, nn::vgg_layer_names());
  REQUIRE(feats.size() == 5);
  CHECK(feats[0].shape() == std::vector<int64_t>{2, 8, 32, 32});
  CHECK(feats[1].shape() == std::vector<int64_t>{2, 16, 16, 16});
  CHECK(feats[2].shape() == std::vector<int64_t>{2, 32, 8, 8});
  CHECK(feats[3].shape() == std::vector<int64_t>{2, 64, 4, 4});
  CHECK(feats[4].shape() == std::vector<int64_t>{2, 64, 2, 2});

  // wanted order is preserved even when it is not depth order
  auto rev = ex.extract(x, {"relu3_2", "relu1_2"});
  REQUIRE(rev.size() == 2);
  CHECK(rev[0].shape() == std::vector<int64_t>{2, 32, 8, 8});
  CHECK(rev[1].shape() == std::vector<int64_t>{2, 8, 32, 32});

  // relu1_2 alone needs no divisibility beyond 1
  CHECK(ex.extract(rand_input(rng, {1, 3, 17, 23}), {"relu1_2"}).size() == 1);
  CHECK_THROWS_AS(ex.extract(rand_input(rng, {1, 3, 20, 20}), {"relu5_4"}),
                  std::invalid_argument);
  CHECK_THROWS_AS(ex.extract(x, {"relu9_9"}), ConfigError);
  CHECK(ex.extract(x, {}).empty());

  // same seed reproduces features; another seed changes them
  nn::VggExtractor<float> ex_same(spec);
  auto f2 = ex_same.extract(x, {"relu2_2"});
  auto f1 = ex.extract(x, {"relu2_2"});
  bool same = true;
  for (int64_t i = 0; i < f1[0].numel(); ++i) same = same && f1[0].value()[i] == f2[0].value()[i];
  CHECK(same);
  spec.seed = 8;
  nn::VggExtractor<float> ex_other(spec);
  auto f3 = ex_other.extract(x, {"relu2_2"});
  bool diff = false;
  for (int64_t i = 0; i < f1[0].numel() && !diff; ++i) diff = f1[0].value()[i] != f3[0].value()[i];
  CHECK(diff);
}

TEST_CASE("reference extractor: load errors, sha pin, weight round trip") {
  const std::string dir = testutil::temp_dir("vggref");

  nn::VggExtractor<float>::Spec missing;
  missing.kind = nn::VggExtractor<float>::Kind::kReference;
  missing.weights_path = dir + "/absent.bin";
  CHECK_THROWS_WITH(nn::VggExtractor<float>(missing),
                    Catch::Matchers::ContainsSubstring("absent.bin"));

  // serialize a seeded test extractor's tensors as a reference weight file
  nn::VggExtractor<float>::Spec tspec;
  tspec.kind = nn::VggExtractor<float>::Kind::kTest;
  tspec.width_mult = 0.125;
  tspec.seed = 21;
  nn::VggExtractor<float> donor(tspec);
  const std::string path = dir + "/weights.bin";
  {
    std::ofstream out(path, std::ios::binary);
    for (const auto& name : donor.params().names())
      ser::write_tensor(out, name, donor.params().get(name).value());
  }
  std::string blob;
  {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    blob = ss.str();
  }

  nn::VggExtractor<float>::Spec rspec;
  rspec.kind = nn::VggExtractor<float>::Kind::kReference;
  rspec.width_mult = 0.125;
  rspec.weights_path = path;
  rspec.weights_sha256 = Sha256::hex_of(blob.data(), blob.size());
  nn::VggExtractor<float> loaded(rspec);

  Rng rng(408);
  Var<float> x = rand_input(rng, {1, 3, 16, 16});
  auto fd = donor.extract(x, {"relu2_2"});
  auto fl = loaded.extract(x, {"relu2_2"});
  REQUIRE(fd[0].shape() == fl[0].shape());
  for (int64_t i = 0; i < fd[0].numel(); ++i) CHECK(fd[0].value()[i] == fl[0].value()[i]);

  rspec.weights_sha256 = std::string(64, '0');
  CHECK_THROWS_WITH(nn::VggExtractor<float>(rspec),
                    Catch::Matchers::ContainsSubstring("integrity"));

  // truncated file: width mismatch surfaces as a shape/missing-tensor error
  nn::VggExtractor<float>::Spec wrong = rspec;
  wrong.weights_sha256.clear();
  wrong.width_mult = 0.25;
  CHECK_THROWS_AS(nn::VggExtractor<float>(wrong), ConfigError);
}

TEST_CASE("params registry basics") {
  nn::Params<float> p;
  Var<float>& a = p.add("w", Tensor<float>::full({2, 2}, 1.0f));
  CHECK(p.has("w"));
  CHECK_FALSE(p.has("v"));
  CHECK(p.size() == 1);
  CHECK(p.scalar_count() == 4);
  CHECK(a.requires_grad());
  CHECK_THROWS_AS(p.add("w", Tensor<float>({1})), std::invalid_argument);
  CHECK_THROWS_AS(p.get("nope"), std::invalid_argument);

  p.set_trainable(false);
  CHECK_FALSE(p.get("w").requires_grad());

  std::map<std::string, Tensor<float>> vals{{"w", Tensor<float>::full({2, 2}, 3.0f)}};
  p.load_values(vals);
  CHECK(p.get("w").value()[0] == 3.0f);
  CHECK(p.all_finite());
  p.get("w").value()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(p.all_finite());

  std::map<std::string, Tensor<float>> bad{{"w", Tensor<float>({3})}};
  CHECK_THROWS_AS(p.load_values(bad), ConfigError);
  std::map<std::string, Tensor<float>> missing{{"x", Tensor<float>({2, 2})}};
  CHECK_THROWS_AS(p.load_values(missing), ConfigError);
}
