#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "deco/data.hpp"
#include "deco/rng.hpp"

using deco::GeneratorConfig;
using deco::Manifest;
using deco::SeededRng;
using deco::Shape;
using deco::Tensor;
using Catch::Approx;

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "deco_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.domains = 4;
  cfg.classes = 5;
  cfg.per_cell = 10;
  cfg.image_size = 64;
  cfg.seed = 20240611;
  return cfg;
}

}  // namespace

TEST_CASE("ppm round trip and error paths") {
  const auto dir = scratch_dir("ppm");
  SeededRng rng(4);
  std::vector<std::uint8_t> rgb(3 * 8 * 6);
  for (auto& b : rgb) b = std::uint8_t(rng.below(256));
  deco::ppm::write(dir / "a.ppm", rgb, 8, 6);

  std::size_t w = 0, h = 0;
  auto back = deco::ppm::read(dir / "a.ppm", &w, &h);
  CHECK(w == 8);
  CHECK(h == 6);
  CHECK(back == rgb);

  // truncated pixel data
  {
    std::ofstream out(dir / "trunc.ppm", std::ios::binary);
    out << "P6\n8 6\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), 10);
  }
  CHECK_THROWS_WITH(deco::ppm::read(dir / "trunc.ppm", &w, &h),
                    Catch::Matchers::ContainsSubstring("trunc.ppm"));

  // corrupt header
  {
    std::ofstream out(dir / "bad.ppm", std::ios::binary);
    out << "P5\n8 6\n255\n";
  }
  CHECK_THROWS_AS(deco::ppm::read(dir / "bad.ppm", &w, &h),
                  std::runtime_error);
  CHECK_THROWS_AS(deco::ppm::read(dir / "missing.ppm", &w, &h),
                  std::runtime_error);
}

TEST_CASE("generate_dataset writes the full grid and a consistent manifest") {
  const auto dir = scratch_dir("gen");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 20;
  auto m = deco::generate_dataset(cfg, dir.string());

  CHECK(m.records.size() == 4 * 5 * 20);
  auto counts = m.count_matrix();
  for (std::size_t d = 0; d < 4; ++d)
    for (std::size_t c = 0; c < 5; ++c) REQUIRE(counts.n[d][c] == 20);

  for (const auto& r : m.records) REQUIRE(fs::exists(dir / r.path));

  auto loaded = deco::load_manifest(dir.string());
  CHECK(loaded.records.size() == m.records.size());
  CHECK(loaded.seed == cfg.seed);
  CHECK(loaded.image_size == 64);
}

TEST_CASE("generation is byte-identical for a fixed seed") {
  const auto a = scratch_dir("det_a");
  const auto b = scratch_dir("det_b");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 2;
  auto ma = deco::generate_dataset(cfg, a.string());
  auto mb = deco::generate_dataset(cfg, b.string());

  REQUIRE(ma.records.size() == mb.records.size());
  for (std::size_t i = 0; i < ma.records.size(); ++i) {
    REQUIRE(ma.records[i].path == mb.records[i].path);
    REQUIRE(slurp(a / ma.records[i].path) == slurp(b / mb.records[i].path));
  }
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));

  GeneratorConfig other = cfg;
  other.seed = 999;
  const auto c = scratch_dir("det_c");
  deco::generate_dataset(other, c.string());
  CHECK(slurp(a / ma.records[0].path) != slurp(c / ma.records[0].path));
}

TEST_CASE("long-tail profile follows the documented decay") {
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 40;
  cfg.longtail_ratio = 0.5;
  // max(1, round(40 * 0.5^c))
  const std::size_t want[5] = {40, 20, 10, 5, 3};
  for (std::size_t c = 0; c < 5; ++c) REQUIRE(cfg.cell_count(c) == want[c]);

  const auto dir = scratch_dir("tail");
  cfg.per_cell = 8;
  auto m = deco::generate_dataset(cfg, dir.string());
  auto counts = m.count_matrix();
  for (std::size_t d = 0; d < 4; ++d)
    for (std::size_t c = 0; c < 5; ++c)
      REQUIRE(counts.n[d][c] == cfg.cell_count(c));
}

TEST_CASE("load_dataset round trips pixels exactly") {
  const auto dir = scratch_dir("load");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 2;
  deco::generate_dataset(cfg, dir.string());
  auto ds = deco::load_dataset<double>(dir.string());
  REQUIRE(ds.size() == 40);
  REQUIRE(ds.images[0].shape() == Shape{3, 64, 64});

  // decoded values are exactly byte/255
  std::size_t w = 0, h = 0;
  auto rgb = deco::ppm::read(dir / ds.manifest.records[0].path, &w, &h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        REQUIRE(ds.images[0][(c * h + y) * w + x] ==
                double(rgb[(y * w + x) * 3 + c]) / 255.0);
}

TEST_CASE("manifest count mismatch names the offending cell") {
  const auto dir = scratch_dir("mismatch");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 2;
  deco::generate_dataset(cfg, dir.string());

  // doctor the stored count for domain 1 class 3
  auto lines = slurp(dir / "manifest.csv");
  std::string text(lines.begin(), lines.end());
  const std::string needle = "#count,1,3,2";
  const auto pos = text.find(needle);
  REQUIRE(pos != std::string::npos);
  text.replace(pos, needle.size(), "#count,1,3,7");
  std::ofstream(dir / "manifest.csv") << text;

  CHECK_THROWS_WITH(deco::load_manifest(dir.string()),
                    Catch::Matchers::ContainsSubstring("domain 1 class 3"));
}

TEST_CASE("truncated image fails the load with its path") {
  const auto dir = scratch_dir("truncimg");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 2;
  auto m = deco::generate_dataset(cfg, dir.string());
  const auto victim = dir / m.records[3].path;
  auto bytes = slurp(victim);
  std::ofstream(victim, std::ios::binary)
      .write(bytes.data(), std::streamsize(bytes.size() / 2));
  CHECK_THROWS_WITH(deco::load_dataset<double>(dir.string()),
                    Catch::Matchers::ContainsSubstring(m.records[3].path));
}

TEST_CASE("leave-one-domain-out split partitions the records") {
  const auto dir = scratch_dir("split");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 3;
  auto m = deco::generate_dataset(cfg, dir.string());

  auto s = deco::split_leave_one_domain_out(m, 2);
  CHECK(s.train.size() + s.test.size() == m.records.size());

  std::set<std::size_t> train_domains;
  for (auto i : s.train) train_domains.insert(m.records[i].domain);
  CHECK(train_domains == std::set<std::size_t>{0, 1, 3});
  for (auto i : s.test) REQUIRE(m.records[i].domain == 2);

  std::set<std::size_t> both(s.train.begin(), s.train.end());
  for (auto i : s.test) REQUIRE(both.insert(i).second);
  CHECK(both.size() == m.records.size());

  auto counts = m.count_matrix(s.train);
  for (std::size_t c = 0; c < 5; ++c) REQUIRE(counts.n[2][c] == 0);

  CHECK_THROWS_AS(deco::split_leave_one_domain_out(m, 9),
                  std::invalid_argument);
}

TEST_CASE("single-source split mirrors leave-one-out") {
  const auto dir = scratch_dir("split2");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 3;
  auto m = deco::generate_dataset(cfg, dir.string());

  auto s = deco::split_single_source(m, 1);
  for (auto i : s.train) REQUIRE(m.records[i].domain == 1);
  for (auto i : s.test) REQUIRE(m.records[i].domain != 1);
  CHECK(s.train.size() + s.test.size() == m.records.size());
  CHECK(s.train.size() == 15);

  CHECK_THROWS_AS(deco::split_single_source(m, 4), std::invalid_argument);
}

TEST_CASE("batch iterator pairing and determinism") {
  const auto dir = scratch_dir("batch");
  GeneratorConfig cfg = small_config();
  cfg.per_cell = 4;
  auto m = deco::generate_dataset(cfg, dir.string());
  auto s = deco::split_leave_one_domain_out(m, 0);

  deco::BatchIterator it(s.train, m, 16, SeededRng(5));
  auto batches = it.epoch_batches(1);
  REQUIRE(!batches.empty());

  for (const auto& b : batches) {
    std::set<std::size_t> domains;
    for (auto idx : b.indices) domains.insert(m.records[idx].domain);
    for (std::size_t i = 0; i < b.indices.size(); ++i) {
      REQUIRE(b.pair[i] != i);  // never self-paired
      if (domains.size() >= 2) {
        // when a cross-domain partner exists the pairing must use one
        const auto di = m.records[b.indices[i]].domain;
        bool has_cross = false;
        for (std::size_t j = 0; j < b.indices.size(); ++j)
          has_cross |= m.records[b.indices[j]].domain != di;
        if (has_cross)
          REQUIRE(m.records[b.indices[b.pair[i]]].domain != di);
      }
    }
  }

  deco::BatchIterator it2(s.train, m, 16, SeededRng(5));
  auto again = it2.epoch_batches(1);
  REQUIRE(again.size() == batches.size());
  for (std::size_t b = 0; b < batches.size(); ++b) {
    REQUIRE(again[b].indices == batches[b].indices);
    REQUIRE(again[b].pair == batches[b].pair);
  }

  auto later = it.epoch_batches(2);
  CHECK(later[0].indices != batches[0].indices);  // reshuffled per epoch

  CHECK_THROWS_AS(deco::BatchIterator(s.train, m, 1, SeededRng(1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(deco::BatchIterator(s.train, m, 10000, SeededRng(1)),
                  std::invalid_argument);
}

TEST_CASE("single-domain batches fall back to any partner") {
  const auto dir = scratch_dir("single");
  GeneratorConfig cfg = small_config();
  cfg.domains = 1;
  cfg.per_cell = 6;
  auto m = deco::generate_dataset(cfg, dir.string());
  std::vector<std::size_t> all(m.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  deco::BatchIterator it(all, m, 8, SeededRng(3));
  for (const auto& b : it.epoch_batches(1))
    for (std::size_t i = 0; i < b.indices.size(); ++i)
      REQUIRE(b.pair[i] != i);
}

TEST_CASE("generated data separates domain and class factors") {
  const auto dir = scratch_dir("separable");
  GeneratorConfig cfg = small_config();  // 10 per cell, 200 images
  deco::generate_dataset(cfg, dir.string());
  auto ds = deco::load_dataset<double>(dir.string());
  const std::size_t hw = 64 * 64;

  // domain probe: nearest centroid on per-channel means
  std::vector<std::array<double, 3>> feats(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t j = 0; j < hw; ++j) s += ds.images[i][c * hw + j];
      feats[i][c] = s / double(hw);
    }
  std::vector<std::array<double, 3>> centroid(4, {0, 0, 0});
  std::vector<std::size_t> count(4, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto d = ds.manifest.records[i].domain;
    for (std::size_t c = 0; c < 3; ++c) centroid[d][c] += feats[i][c];
    ++count[d];
  }
  for (std::size_t d = 0; d < 4; ++d)
    for (std::size_t c = 0; c < 3; ++c) centroid[d][c] /= double(count[d]);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double best = 1e18;
    std::size_t arg = 0;
    for (std::size_t d = 0; d < 4; ++d) {
      double dist = 0;
      for (std::size_t c = 0; c < 3; ++c)
        dist += (feats[i][c] - centroid[d][c]) * (feats[i][c] - centroid[d][c]);
      if (dist < best) {
        best = dist;
        arg = d;
      }
    }
    hits += arg == ds.manifest.records[i].domain;
  }
  CHECK(double(hits) / double(ds.size()) >= 0.9);

  // class probe: bright-lesion pixel count (green z-score above 3)
  std::vector<double> class_mean(5, 0);
  std::vector<std::size_t> class_n(5, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& img = ds.images[i];
    double s = 0, s2 = 0;
    for (std::size_t j = 0; j < hw; ++j) {
      s += img[hw + j];
      s2 += img[hw + j] * img[hw + j];
    }
    const double mean = s / hw;
    const double sd = std::sqrt(std::max(1e-12, s2 / hw - mean * mean));
    std::size_t bright = 0;
    for (std::size_t j = 0; j < hw; ++j)
      if ((img[hw + j] - mean) / sd > 3.0) ++bright;
    class_mean[ds.manifest.records[i].label] += double(bright);
    ++class_n[ds.manifest.records[i].label];
  }
  for (std::size_t c = 0; c < 5; ++c) class_mean[c] /= double(class_n[c]);
  for (std::size_t c = 1; c < 5; ++c)
    REQUIRE(class_mean[c] > class_mean[c - 1]);
}
