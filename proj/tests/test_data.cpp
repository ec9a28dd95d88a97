#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mscrack/data.hpp"
#include "mscrack/error.hpp"
#include "test_util.hpp"

using namespace mscrack;
using testutil::rand_tensor;
namespace fs = std::filesystem;

namespace {

double total(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += v;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Tensor binary_mask(Rng& rng, std::size_t h, std::size_t w) {
  Tensor m({h, w});
  for (auto& v : m.data()) v = double(rng.bernoulli(0.3));
  return m;
}

}  // namespace

TEST_CASE("ppm roundtrip and errors") {
  Rng rng(1);
  const Tensor img = rand_tensor({3, 5, 7}, rng, 0, 1);
  const std::string bytes = encode_ppm(img);
  CHECK(bytes.substr(0, 2) == "P6");
  const Tensor back = parse_ppm(bytes);
  CHECK(back.shape() == img.shape());
  CHECK(testutil::max_abs_diff(back, img) <= 0.5 / 255 + 1e-12);
  CHECK(parse_ppm(encode_ppm(back)) == back);

  CHECK_THROWS_WITH_AS(parse_ppm("P3\n1 1\n255\nabc"), doctest::Contains("byte offset"), ParseError);
  CHECK_THROWS_WITH_AS(parse_ppm("P6\n2 2\n255\nabc"), doctest::Contains("byte offset"), ParseError);
  CHECK_THROWS_WITH_AS(parse_ppm("P6\n2 x\n255\n"), doctest::Contains("byte offset"), ParseError);
  CHECK_THROWS_WITH_AS(parse_ppm("P6\n1 1\n65535\n" + std::string(6, '\0')),
                       doctest::Contains("maxval"), ParseError);
  // Comments in the header are skipped.
  const std::string commented = std::string("P6\n# note\n1 1\n255\n") + char(255) + char(0) + char(128);
  const Tensor px = parse_ppm(commented);
  CHECK(px.at(0, 0, 0) == 1.0);
  CHECK(px.at(1, 0, 0) == 0.0);
}

TEST_CASE("pgm mask roundtrip and validation") {
  Rng rng(2);
  const Tensor m = binary_mask(rng, 6, 4);
  CHECK(parse_pgm_mask(encode_pgm_mask(m)) == m);
  std::string bytes = encode_pgm_mask(m);
  bytes.back() = char(7);
  CHECK_THROWS_AS(parse_pgm_mask(bytes), ParseError);
  CHECK_THROWS_AS(encode_pgm_mask(Tensor({2, 2}, {0, 0.5, 1, 0})), Error);
}

TEST_CASE("image files") {
  const fs::path dir = fs::temp_directory_path() / "mscrack_test_data_files";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(3);
  const Tensor img = rand_tensor({3, 4, 4}, rng, 0, 1);
  save_image(dir / "a.ppm", img);
  CHECK(testutil::max_abs_diff(load_image(dir / "a.ppm"), img) <= 0.5 / 255 + 1e-12);
  const Tensor m = binary_mask(rng, 4, 4);
  save_mask(dir / "m.pgm", m);
  CHECK(load_mask(dir / "m.pgm") == m);
  CHECK_THROWS_AS(load_image(dir / "missing.ppm"), Error);
  fs::remove_all(dir);
}

TEST_CASE("synthetic samples") {
  const Rational f{10, 3};
  const auto a = synth_dataset(5, 3, 120, 120, f);
  const auto b = synth_dataset(5, 3, 120, 120, f);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i].rgb == b[i].rgb);
    CHECK(a[i].ir == b[i].ir);
    CHECK(a[i].mask == b[i].mask);
    CHECK(a[i].rgb.shape() == Shape{3, 120, 120});
    CHECK(a[i].ir.shape() == Shape{3, 36, 36});
    CHECK(a[i].mask.shape() == Shape{120, 120});
    for (double v : a[i].mask.data()) REQUIRE((v == 0 || v == 1));
    for (double v : a[i].rgb.data()) REQUIRE((v >= 0 && v <= 1));
    for (double v : a[i].ir.data()) REQUIRE((v >= 0 && v <= 1));
  }
  CHECK(a[0].id != a[1].id);
  CHECK(synth_dataset(6, 1, 120, 120, f)[0].rgb != a[0].rgb);
  CHECK(synth_dataset(5, 1, 96, 96, f)[0].ir.shape() == Shape{3, 29, 29});
  CHECK_THROWS_AS(synth_dataset(5, 0, 120, 120, f), ConfigError);
}

TEST_CASE("crack coverage stays within 0.2%..8% over 100 seeds") {
  double lo = 1, hi = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SynthSample s = synth_sample(seed, 0, 64, 64, Rational{10, 3});
    const double frac = total(s.pair.mask) / double(s.pair.mask.size());
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  CHECK(lo >= 0.002);
  CHECK(hi <= 0.08);
}

TEST_CASE("IR-only cracks have zero RGB contrast") {
  std::size_t ir_only_pixels = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const SynthSample s = synth_sample(9, i, 96, 96, Rational{10, 3});
    const std::size_t plane = 96 * 96;
    for (std::size_t p = 0; p < plane; ++p) {
      if (s.ir_only[p] == 0) continue;
      ++ir_only_pixels;
      CHECK(s.pair.mask[p] == 1);
      for (std::size_t c = 0; c < 3; ++c) REQUIRE(s.pair.rgb[c * plane + p] == s.background[c * plane + p]);
    }
  }
  CHECK(ir_only_pixels > 0);
}

TEST_CASE("input variants") {
  const SamplePair s = synth_dataset(1, 1, 120, 120, Rational{10, 3})[0];
  Rng rng(4);
  const SrModel sr = SrModel::init(Rational{10, 3}, rng, 4);
  const Example p = make_variant(s, Variant::p_RGB, nullptr);
  CHECK(p.input.shape() == Shape{3, 36, 36});
  CHECK(p.target.shape() == Shape{36, 36});
  const Example P = make_variant(s, Variant::P_RGB, nullptr);
  CHECK(P.input == s.rgb);
  CHECK(P.target == s.mask);
  const Example pi = make_variant(s, Variant::pRGB_plus_PIR, nullptr);
  CHECK(pi.input.shape() == Shape{6, 36, 36});
  const Example ours = make_variant(s, Variant::PRGB_plus_PIRprime, &sr);
  CHECK(ours.input.shape() == Shape{6, 120, 120});
  CHECK(ours.target == s.mask);
  CHECK_THROWS_AS(make_variant(s, Variant::PRGB_plus_PIRprime, nullptr), Error);
  for (const Example* e : {&p, &pi})
    for (double v : e->target.data()) CHECK((v == 0 || v == 1));

  const std::size_t channels[] = {3, 3, 6, 6};
  const char* labels[] = {"p_RGB", "P_RGB", "pRGB+PIR", "PRGB+P'IR"};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(variant_channels(kVariants[i]) == channels[i]);
    CHECK(variant_label(kVariants[i]) == labels[i]);
    CHECK(parse_variant(variant_tag(kVariants[i])) == kVariants[i]);
    CHECK(parse_variant(labels[i]) == kVariants[i]);
  }
  CHECK(variant_needs_sr(Variant::PRGB_plus_PIRprime));
  CHECK_FALSE(variant_needs_sr(Variant::pRGB_plus_PIR));
  CHECK_THROWS_AS(parse_variant("IR"), ConfigError);
}

TEST_CASE("augmentation") {
  Rng rng(5);
  Example e{"x", rand_tensor({2, 9, 9}, rng), binary_mask(rng, 9, 9)};
  SUBCASE("identity parameters") {
    AugmentParams id;
    id.patch_h = id.patch_w = 9;
    const Example out = apply_augment(e, id);
    CHECK(out.input == e.input);
    CHECK(out.target == e.target);
  }
  SUBCASE("full-size transforms preserve crack count") {
    for (int trial = 0; trial < 32; ++trial) {
      const Example out = augment(e, rng, 9);
      CHECK(total(out.target) == total(e.target));
      CHECK(out.input.shape() == e.input.shape());
    }
  }
  SUBCASE("input and target move together") {
    Example marker{"m", Tensor({1, 7, 11}), Tensor({7, 11})};
    marker.input.at(0, 2, 5) = 1;
    marker.target.at(2, 5) = 1;
    for (int trial = 0; trial < 64; ++trial) {
      const Example out = augment(marker, rng, 6);
      CHECK(out.input.shape() == Shape{1, 6, 6});
      for (std::size_t p = 0; p < 36; ++p) REQUIRE(out.input[p] == out.target[p]);
    }
  }
  SUBCASE("rotation is counter-clockwise") {
    Example t{"t", Tensor({1, 2, 2}, {1, 2, 3, 4}), Tensor({2, 2}, {1, 0, 0, 0})};
    AugmentParams p;
    p.rot90 = 1;
    p.patch_h = p.patch_w = 2;
    const Example out = apply_augment(t, p);
    CHECK(out.input.vec() == std::vector<double>{2, 4, 1, 3});
  }
  SUBCASE("determinism and errors") {
    Rng r1(11), r2(11);
    CHECK(augment(e, r1, 5).input == augment(e, r2, 5).input);
    CHECK_THROWS_AS(augment(e, rng, 10), ShapeError);
  }
}

TEST_CASE("splits") {
  CHECK(train_count(914) == 731);
  CHECK(914 - train_count(914) == 183);
  CHECK(train_count(10) == 8);
  CHECK(train_count(80) == 64);
  DatasetManifest m;
  for (int i = 0; i < 914; ++i) m.ids.push_back("id" + std::to_string(i));
  assign_split(m);
  CHECK(m.train_ids.size() == 731);
  CHECK(m.val_ids.size() == 183);
  std::set<std::string> all(m.train_ids.begin(), m.train_ids.end());
  all.insert(m.val_ids.begin(), m.val_ids.end());
  CHECK(all.size() == 914);
  DatasetManifest again = m;
  assign_split(again);
  CHECK(again.train_ids == m.train_ids);
  const DatasetManifest j = DatasetManifest::from_json(m.to_json(), "root");
  CHECK(j.train_ids == m.train_ids);
  CHECK(j.val_ids == m.val_ids);
  CHECK(j.variant == m.variant);
  CHECK(j.ir_factor == m.ir_factor);
}

TEST_CASE("epoch batches") {
  const auto eval = epoch_batches(10, 4, false, 0, 0);
  REQUIRE(eval.size() == 3);
  CHECK(eval[2].size() == 2);
  std::vector<std::size_t> seen;
  for (const auto& b : eval) seen.insert(seen.end(), b.begin(), b.end());
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto tr = epoch_batches(10, 4, true, 0, 0);
  CHECK(tr.size() == 2);
  std::set<std::size_t> uniq;
  for (const auto& b : tr) {
    CHECK(b.size() == 4);
    uniq.insert(b.begin(), b.end());
  }
  CHECK(uniq.size() == 8);
  CHECK(epoch_batches(10, 4, true, 0, 0) == tr);
  CHECK(epoch_batches(10, 4, true, 0, 1) != tr);
  CHECK_THROWS_AS(epoch_batches(0, 4, false, 0, 0), Error);
}

TEST_CASE("assembled batches") {
  const auto samples = synth_dataset(2, 4, 48, 48, Rational{10, 3});
  std::vector<Example> ex;
  for (const auto& s : samples) ex.push_back(make_variant(s, Variant::P_RGB, nullptr));
  const Batch b = assemble_batch(ex, {2, 0}, 24, 3, 7, 1, 4);
  CHECK(b.inputs.shape() == Shape{2, 3, 24, 24});
  CHECK(b.targets.shape() == Shape{2, 24, 24});
  CHECK(b.ids == std::vector<std::string>{ex[2].id, ex[0].id});
  const Batch again = assemble_batch(ex, {2, 0}, 24, 3, 7, 1, 4);
  CHECK(again.inputs == b.inputs);
  CHECK(again.targets == b.targets);
  CHECK_THROWS_AS(assemble_batch(ex, {0}, 24, 6, 7, 1, 0), ShapeError);
}

TEST_CASE("dataset directory layout") {
  const fs::path root = fs::temp_directory_path() / "mscrack_test_data_layout";
  fs::remove_all(root);
  const auto samples = synth_dataset(3, 5, 40, 40, Rational{10, 3});
  DatasetManifest m;
  m.seed = 3;
  m.rgb_h = m.rgb_w = 40;
  write_dataset(root, samples, m);
  CHECK(fs::exists(root / "manifest.json"));
  CHECK(fs::exists(root / "rgb" / (samples[0].id + ".ppm")));
  CHECK(fs::exists(root / "ir" / (samples[0].id + ".ppm")));
  CHECK(fs::exists(root / "mask" / (samples[0].id + ".pgm")));
  const DatasetManifest back = load_manifest(root);
  CHECK(back.ids.size() == 5);
  CHECK(back.train_ids.size() == 4);
  const SamplePair s = load_sample(root, samples[1].id);
  CHECK(s.mask == samples[1].mask);
  CHECK(testutil::max_abs_diff(s.rgb, samples[1].rgb) <= 0.5 / 255 + 1e-12);
  CHECK(s.ir.shape() == samples[1].ir.shape());

  const fs::path root2 = root.string() + "_again";
  fs::remove_all(root2);
  DatasetManifest m2;
  m2.seed = 3;
  m2.rgb_h = m2.rgb_w = 40;
  write_dataset(root2, samples, m2);
  CHECK(slurp(root / "rgb" / (samples[4].id + ".ppm")) == slurp(root2 / "rgb" / (samples[4].id + ".ppm")));
  CHECK(slurp(root / "manifest.json") == slurp(root2 / "manifest.json"));
  CHECK_THROWS_AS(load_manifest(root / "nope"), Error);
  fs::remove_all(root);
  fs::remove_all(root2);
}
