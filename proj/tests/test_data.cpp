#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "msdet/augment.hpp"
#include "msdet/data.hpp"
#include "msdet/dataset_io.hpp"
#include "msdet/morphology.hpp"

using namespace msdet;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("msdet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Mask square(std::size_t n, std::size_t x0, std::size_t y0, std::size_t side) {
  Mask m(n, n);
  for (std::size_t y = y0; y < y0 + side; ++y)
    for (std::size_t x = x0; x < x0 + side; ++x) m.at(x, y) = 1;
  return m;
}

std::string error_of(auto fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("scene generation is a pure function of its seed and settings") {
  SceneSpec spec;
  spec.seed = 42;
  const Sample a = generate_scene(spec);
  const Sample b = generate_scene(spec);
  CHECK(a.raw == b.raw);
  CHECK(a.image == b.image);
  CHECK(a.boxes == b.boxes);
  spec.seed = 43;
  CHECK_FALSE(generate_scene(spec).raw == a.raw);
}

TEST_CASE("scene nodule count follows the configured range") {
  SceneSpec spec;
  spec.min_nodules = spec.max_nodules = 3;
  for (std::uint64_t s = 0; s < 20; ++s) {
    spec.seed = s;
    CHECK(generate_scene(spec).boxes.size() == 3);
  }
  spec.min_nodules = 4;
  CHECK_THROWS_AS(generate_scene(spec), DataError);
}

TEST_CASE("nodule centers are brighter than their neighbourhood") {
  SceneSpec spec;
  for (std::uint64_t s = 0; s < 30; ++s) {
    spec.seed = s;
    const Sample smp = generate_scene(spec);
    const auto n = static_cast<long>(spec.size);
    for (const auto& g : smp.boxes) {
      CHECK(g.box.w * spec.size >= 2.0);
      CHECK(g.box.w * spec.size <= 13.0);
      const long cx = static_cast<long>(g.box.cx * n), cy = static_cast<long>(g.box.cy * n);
      const long half = static_cast<long>(1.5 * g.box.w * n) + 2;
      std::vector<int> around;
      for (long y = std::max(0L, cy - half); y <= std::min(n - 1, cy + half); ++y)
        for (long x = std::max(0L, cx - half); x <= std::min(n - 1, cx + half); ++x)
          around.push_back(smp.image.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)));
      std::nth_element(around.begin(), around.begin() + around.size() / 2, around.end());
      CHECK(smp.image.at(static_cast<std::size_t>(cx), static_cast<std::size_t>(cy)) > around[around.size() / 2]);
    }
  }
}

TEST_CASE("HU clipping and 8-bit normalization") {
  CHECK(hu_clip(-3000) == -1200);
  CHECK(hu_clip(2000) == 600);
  CHECK(hu_clip(17) == 17);
  CHECK(normalize_255(-1200) == 0);
  CHECK(normalize_255(600) == 255);
  CHECK(normalize_255(0) == 170);
  CHECK(normalize_255(-1000) == 28);   // 28.33
  CHECK(normalize_255(-1196) == 1);    // 0.5666
  CHECK(normalize_255(-1197) == 0);    // 0.425
  CHECK(normalize_255(-1020) == 26);   // 180·255/1800 = 25.5, tie rounds up
  CHECK_THROWS_AS(normalize_255(601), DataError);
  CHECK_THROWS_AS(normalize_255(-1201), DataError);
}

TEST_CASE("erode and dilate use a 3x3 square with zero outside the plane") {
  const Mask block = square(7, 2, 2, 3);
  const Mask e = erode(block);
  CHECK(count(e) == 1);
  CHECK(e.at(3, 3) == 1);
  CHECK(count(dilate(e)) == 9);
  CHECK(count(dilate(block)) == 25);
  const Mask full = Mask(5, 5, 1);
  CHECK(count(erode(full)) == 9);
  const Mask corner = square(5, 0, 0, 1);
  CHECK(count(dilate(corner)) == 4);
}

TEST_CASE("largest component is 4-connected with raster-order ties") {
  Mask m(6, 6);
  m.at(0, 0) = m.at(1, 1) = 1;  // diagonal: two components of size 1
  m.at(4, 4) = m.at(5, 4) = m.at(4, 5) = 1;
  CHECK(count(largest_component(m)) == 3);
  Mask tie(6, 6);
  tie.at(3, 0) = tie.at(4, 0) = 1;
  tie.at(0, 3) = tie.at(0, 4) = 1;
  const Mask t = largest_component(tie);
  CHECK(t.at(3, 0) == 1);
  CHECK(t.at(0, 3) == 0);
  CHECK(count(largest_component(Mask(4, 4))) == 0);
}

TEST_CASE("lung mask covers the lung and ignores the outside air") {
  SceneSpec spec;
  spec.seed = 5;
  const Sample s = generate_scene(spec);
  const Plane8 img = normalize_255(hu_clip(s.raw));
  const Mask m = lung_mask(img, 113, 7);
  CHECK(m.at(48, 48) == 1);
  CHECK(m.at(1, 1) == 0);
  CHECK(m.at(48, 1) == 0);
  for (const auto& g : s.boxes) {
    CHECK(m.at(static_cast<std::size_t>(g.box.cx * 96), static_cast<std::size_t>(g.box.cy * 96)) == 1);
  }
  CHECK_THROWS_AS(lung_mask(Plane8(16, 16, 200), 113, 7), DataError);

  spec.noise_sigma = 0.0;
  const Mask clean = lung_mask(normalize_255(hu_clip(generate_scene(spec).raw)), 113, 7);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < m.data.size(); ++i) diff += m.data[i] != clean.data[i];
  CHECK(diff < m.data.size() / 50);
}

TEST_CASE("preprocess zeroes everything outside the mask") {
  SceneSpec spec;
  spec.seed = 8;
  const Sample s = generate_scene(spec);
  CHECK(s.image.at(0, 0) == 0);
  CHECK(s.image.at(48, 48) > 0);
  const Plane8 unmasked = preprocess(s.raw, {113, 7, false});
  CHECK(unmasked.at(0, 0) > 0);
}

TEST_CASE("raw, pgm and label files round-trip") {
  Plane16 raw(3, 2);
  raw.data = {-1200, 600, 0, -1, 32767, -32768};
  CHECK(decode_raw(encode_raw(raw)) == raw);
  Plane8 pgm(2, 3);
  pgm.data = {0, 1, 127, 128, 254, 255};
  CHECK(decode_pgm(encode_pgm(pgm)) == pgm);
  const std::vector<GroundTruth> boxes{{0, {0.5, 0.25, 0.125, 0.0625}}, {2, {0.1, 0.9, 0.05, 0.05}}};
  const auto back = parse_labels(format_labels(boxes));
  REQUIRE(back.size() == 2);
  CHECK(back[1].cls == 2);
  CHECK(back[0].box.cx == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(format_labels(back) == format_labels(boxes));
  CHECK(parse_labels("").empty());
}

TEST_CASE("file decoders report what is wrong") {
  CHECK(error_of([] { decode_raw("3 2\n\x01\x02"); }).find("byte") != std::string::npos);
  CHECK(!error_of([] { decode_raw("P5"); }).empty());
  CHECK(!error_of([] { decode_pgm("P2\n2 2\n255\n"); }).empty());
  CHECK(!error_of([] { decode_pgm("P5\n2 2\n65535\n"); }).empty());
  CHECK(error_of([] { parse_labels("0 0.5 0.5 0.1 0.1\n0 0.5 0.5 -0.1 0.1\n"); }).find("line 2") != std::string::npos);
  CHECK(!error_of([] { parse_labels("0 1.5 0.5 0.1 0.1\n"); }).empty());
  CHECK(!error_of([] { parse_labels("-1 0.5 0.5 0.1 0.1\n"); }).empty());
  CHECK(!error_of([] { parse_labels("0 0.5 0.5 0.1\n"); }).empty());
  CHECK(!error_of([] { read_file("/nonexistent/msdet/file"); }).empty());
}

TEST_CASE("generated datasets load back through their manifest") {
  const fs::path dir = scratch("dataset");
  SceneSpec spec;
  spec.size = 48;
  spec.seed = 3;
  const auto entries = generate_dataset(dir, "s", 4, spec);
  write_manifest(dir / "manifest.tsv", entries);
  const auto read = read_manifest(dir / "manifest.tsv");
  REQUIRE(read.size() == 4);
  const Dataset ds = load_dataset(dir / "manifest.tsv");
  REQUIRE(ds.size() == 4);
  const Sample s0 = read_sample(dir, "s0000");
  CHECK(ds.images[0] == s0.image);
  CHECK(ds.labels[0].size() == s0.boxes.size());
  CHECK(derive_seed(3, 0) != derive_seed(3, 1));
  CHECK(derive_seed(3, 1) == derive_seed(3, 1));

  // A manifest that points at raw planes preprocesses them on load.
  write_manifest(dir / "raw.tsv", {{"s0001.raw", "s0001.txt"}});
  CHECK(load_dataset(dir / "raw.tsv").images[0] == ds.images[1]);
  fs::remove_all(dir);
}

TEST_CASE("flips and rotation move pixels and boxes together") {
  Plane8 img(4, 4);
  img.at(0, 1) = 9;  // pixel (x=0, y=1)
  std::vector<GroundTruth> boxes{{0, {0.125, 0.375, 0.25, 0.5}}};

  Plane8 h = img;
  auto hb = boxes;
  hflip(h, hb);
  CHECK(h.at(3, 1) == 9);
  CHECK(hb[0].box.cx == doctest::Approx(0.875));

  Plane8 v = img;
  auto vb = boxes;
  vflip(v, vb);
  CHECK(v.at(0, 2) == 9);
  CHECK(vb[0].box.cy == doctest::Approx(0.625));

  Plane8 r = img;
  auto rb = boxes;
  rot90(r, rb);
  CHECK(r.at(2, 0) == 9);  // (H-1-y, x)
  CHECK(rb[0].box.cx == doctest::Approx(0.625));
  CHECK(rb[0].box.cy == doctest::Approx(0.125));
  CHECK(rb[0].box.w == doctest::Approx(0.5));
  CHECK(rb[0].box.h == doctest::Approx(0.25));
  for (int i = 0; i < 3; ++i) rot90(r, rb);
  CHECK(r == img);
  CHECK(rb[0].box.cx == doctest::Approx(0.125));
}

TEST_CASE("augmentation is deterministic per seed and keeps boxes inside the image") {
  SceneSpec spec;
  spec.seed = 11;
  const Sample s = generate_scene(spec);
  AugmentConfig cfg;
  cfg.p_salt_pepper = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Plane8 a = s.image, b = s.image;
    auto ab = s.boxes, bb = s.boxes;
    Rng ra(seed), rb(seed);
    augment(a, ab, cfg, ra);
    augment(b, bb, cfg, rb);
    CHECK(a == b);
    CHECK(ab == bb);
    for (const auto& g : ab) {
      CHECK(g.box.x0() >= -1e-12);
      CHECK(g.box.x1() <= 1.0 + 1e-12);
    }
  }
  AugmentConfig off;
  off.enabled = false;
  Plane8 same = s.image;
  auto sb = s.boxes;
  Rng rng(1);
  augment(same, sb, off, rng);
  CHECK(same == s.image);
}
