// Dataset ingestion and sampling: manifest order, rejects, seedable splits,
// batch determinism, augmentation geometry.

#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "delight/config.hpp"
#include "delight/data.hpp"
#include "delight/errors.hpp"
#include "delight/image_io.hpp"
#include "test_util.hpp"

using namespace delight;

namespace {

struct Fixture {
  std::string root;
  cfg::Config config;
};

// small on-disk corpus: 5 low + 4 normal PNGs plus one junk file per role
Fixture make_fixture(int64_t h = 40, int64_t w = 48) {
  Fixture f;
  f.root = testutil::temp_dir("data");
  const std::string low = f.root + "/low", normal = f.root + "/normal";
  std::filesystem::create_directories(low);
  std::filesystem::create_directories(normal);
  Rng rng(601);
  for (int i = 0; i < 5; ++i)
    io::save_png(low + "/l" + std::to_string(i) + ".png",
                 testutil::synthetic_image<float>(rng, h, w, 0.15, 0.1));
  for (int i = 0; i < 4; ++i)
    io::save_png(normal + "/n" + std::to_string(i) + ".png",
                 testutil::synthetic_image<float>(rng, h, w, 0.6, 0.2));
  std::ofstream(low + "/broken.png") << "not a png";
  std::ofstream(normal + "/notes.txt") << "ignored: wrong extension";
  f.config = cfg::default_config("desk");
  f.config.data.low_dir = low;
  f.config.data.normal_dir = normal;
  return f;
}

}  // namespace

TEST_CASE("load_dataset: lexicographic manifest, rejects, role partition") {
  Fixture f = make_fixture();
  data::UnpairedDataset ds = data::load_dataset(f.config);

  REQUIRE(ds.records.size() == 9);
  REQUIRE(ds.rejects.size() == 1);
  CHECK(ds.rejects[0] == "low/broken.png");

  // low block first, then normal, each sorted by filename
  for (size_t i = 0; i < 5; ++i) {
    CHECK(ds.records[i].role == "low");
    CHECK(ds.records[i].rel_path == "l" + std::to_string(i) + ".png");
    CHECK(ds.records[i].split == "train");
    CHECK(ds.records[i].width == 48);
    CHECK(ds.records[i].height == 40);
  }
  for (size_t i = 5; i < 9; ++i) CHECK(ds.records[i].role == "normal");

  // .txt never enters the manifest or the rejects
  for (const auto& r : ds.records) CHECK(r.rel_path.find(".txt") == std::string::npos);

  const std::string manifest = f.root + "/manifest.tsv";
  data::write_manifest(ds, manifest);
  std::ifstream in(manifest);
  std::string line;
  std::getline(in, line);
  CHECK(line == "l0.png\tlow\ttrain\t48\t40");

  cfg::Config missing = f.config;
  missing.data.low_dir = f.root + "/absent";
  CHECK_THROWS_AS(data::load_dataset(missing), ConfigError);
}

TEST_CASE("split: seeded, stable, fraction rounded, role-stratified") {
  Fixture f = make_fixture();
  data::UnpairedDataset base = data::load_dataset(f.config);

  data::UnpairedDataset a = data::split(base, 0.4, 123);
  data::UnpairedDataset b = data::split(base, 0.4, 123);
  for (size_t i = 0; i < a.records.size(); ++i) CHECK(a.records[i].split == b.records[i].split);

  CHECK(a.indices("low", "val").size() == 2);     // round(5*0.4)
  CHECK(a.indices("normal", "val").size() == 2);  // round(4*0.4)
  CHECK(a.indices("low", "train").size() == 3);
  CHECK(a.indices("normal", "train").size() == 2);

  // a different seed eventually picks a different subset
  bool differs = false;
  for (uint64_t s = 124; s < 140 && !differs; ++s) {
    data::UnpairedDataset c = data::split(base, 0.4, s);
    for (size_t i = 0; i < a.records.size(); ++i)
      if (a.records[i].split != c.records[i].split) differs = true;
  }
  CHECK(differs);

  CHECK(data::split(base, 0.0, 1).indices("low", "val").empty());
  CHECK_THROWS_AS(data::split(base, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(data::split(base, -0.1, 1), std::invalid_argument);
}

TEST_CASE("sample_batch: deterministic replay, shapes, ids") {
  Fixture f = make_fixture();
  data::UnpairedDataset ds = data::load_dataset(f.config);
  data::BatchSpec spec;
  spec.batch_size = 3;
  spec.crop = 24;
  spec.hflip = true;

  data::ImageCache<float> cache1(ds), cache2(ds);
  Rng r1 = Rng::substream(7, "data"), r2 = Rng::substream(7, "data");
  data::Batch<float> b1 = data::sample_batch(ds, cache1, spec, r1);
  data::Batch<float> b2 = data::sample_batch(ds, cache2, spec, r2);

  REQUIRE(b1.low.size() == 3);
  REQUIRE(b1.normal.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(b1.low_ids[i] == b2.low_ids[i]);
    CHECK(b1.normal_ids[i] == b2.normal_ids[i]);
    REQUIRE(b1.low[i].shape() == std::vector<int64_t>{24, 24, 3});
    for (int64_t j = 0; j < b1.low[i].numel(); ++j) CHECK(b1.low[i][j] == b2.low[i][j]);
    for (int64_t j = 0; j < b1.normal[i].numel(); ++j) CHECK(b1.normal[i][j] == b2.normal[i][j]);
  }
  CHECK(b1.low_ids[0].rfind("low/", 0) == 0);
  CHECK(b1.normal_ids[0].rfind("normal/", 0) == 0);

  // a different stream gives a different draw sequence somewhere
  Rng r3 = Rng::substream(8, "data");
  data::Batch<float> b3 = data::sample_batch(ds, cache1, spec, r3);
  bool differs = false;
  for (size_t i = 0; i < 3 && !differs; ++i)
    differs = b3.low_ids[i] != b1.low_ids[i] || b3.normal_ids[i] != b1.normal_ids[i];
  for (int64_t j = 0; j < b3.low[0].numel() && !differs; ++j)
    differs = b3.low[0][j] != b1.low[0][j];
  CHECK(differs);
}

TEST_CASE("sample_batch: oversized crop names the offending file") {
  Fixture f = make_fixture(40, 48);
  data::UnpairedDataset ds = data::load_dataset(f.config);
  data::ImageCache<float> cache(ds);
  data::BatchSpec spec;
  spec.batch_size = 1;
  spec.crop = 41;  // taller than every image
  Rng rng(9);
  bool threw = false;
  try {
    for (int rep = 0; rep < 20; ++rep) data::sample_batch(ds, cache, spec, rng);
  } catch (const std::invalid_argument& e) {
    threw = true;
    CHECK(std::string(e.what()).find(".png") != std::string::npos);
  }
  CHECK(threw);

  CHECK_THROWS_AS(data::sample_batch(ds, cache, spec, rng, "val"), std::invalid_argument);
}

TEST_CASE("augmentation geometry: hflip involution, rot90 cycle and shapes") {
  Rng rng(602);
  img::Image<float> im = testutil::synthetic_image<float>(rng, 10, 14, 0.5, 0.3);

  img::Image<float> flip2 = data::hflip_image(data::hflip_image(im));
  for (int64_t i = 0; i < im.numel(); ++i) CHECK(flip2[i] == im[i]);
  CHECK(data::hflip_image(im).at3(0, 0, 0) == im.at3(0, 13, 0));

  CHECK(data::rot90_image(im, 1).shape() == std::vector<int64_t>{14, 10, 3});
  CHECK(data::rot90_image(im, 2).shape() == std::vector<int64_t>{10, 14, 3});
  img::Image<float> full = data::rot90_image(data::rot90_image(im, 3), 1);
  for (int64_t i = 0; i < im.numel(); ++i) CHECK(full[i] == im[i]);
  // CCW quarter turn sends (r, c) to (w-1-c, r)
  CHECK(data::rot90_image(im, 1).at3(13, 0, 1) == im.at3(0, 0, 1));
  img::Image<float> k5 = data::rot90_image(im, 5);
  img::Image<float> k1 = data::rot90_image(im, 1);
  for (int64_t i = 0; i < k1.numel(); ++i) CHECK(k5[i] == k1[i]);
}

TEST_CASE("resize_long_side: aspect kept, identity when already sized") {
  Rng rng(603);
  img::Image<float> im = testutil::synthetic_image<float>(rng, 30, 60, 0.5, 0.2);
  img::Image<float> out = data::resize_long_side(im, 20);
  CHECK(out.shape() == std::vector<int64_t>{10, 20, 3});
  img::Image<float> same = data::resize_long_side(im, 60);
  CHECK(same.shape() == im.shape());
  for (int64_t i = 0; i < im.numel(); ++i) CHECK(same[i] == im[i]);
}

TEST_CASE("image cache: one decode per record, resize policy applied") {
  Fixture f = make_fixture();
  f.config.data.resize = "long1008";
  data::UnpairedDataset ds = data::load_dataset(f.config);
  data::ImageCache<float> cache(ds);
  const img::Image<float>& first = cache.get(0);
  CHECK(std::max(first.shape()[0], first.shape()[1]) == 1008);
  const img::Image<float>& again = cache.get(0);
  CHECK(&first == &again);  // cached, not re-decoded

  // deleting the file after caching is harmless; a fresh cache must fail
  std::filesystem::remove(ds.abs_path(ds.records[0]));
  CHECK(&cache.get(0) == &first);
  data::ImageCache<float> cold(ds);
  CHECK_THROWS_AS(cold.get(0), DataError);
}

TEST_CASE("png round trip is bit-exact in 8-bit space") {
  Rng rng(604);
  const std::string dir = testutil::temp_dir("png");
  img::Image<float> im = testutil::synthetic_image<float>(rng, 9, 7, 0.5, 0.4);
  io::save_png(dir + "/x.png", im);
  auto back = io::load_image<float>(dir + "/x.png");
  REQUIRE(back.has_value());
  REQUIRE(back->same_shape(im));
  // save quantizes to 8 bits; a second round trip must be lossless
  io::save_png(dir + "/y.png", *back);
  auto twice = io::load_image<float>(dir + "/y.png");
  REQUIRE(twice.has_value());
  for (int64_t i = 0; i < back->numel(); ++i) CHECK((*twice)[i] == (*back)[i]);
  for (int64_t i = 0; i < im.numel(); ++i)
    CHECK(std::abs((*back)[i] - im[i]) <= 0.5 / 255.0 + 1e-6);

  CHECK_FALSE(io::load_image<float>(dir + "/missing.png").has_value());
  CHECK(io::is_image_file("a.PNG"));
  CHECK(io::is_image_file("b.jpg"));
  CHECK_FALSE(io::is_image_file("c.txt"));
}
