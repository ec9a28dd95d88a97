#include <algorithm>
#include <cmath>
#include <utility>
#include <filesystem>

#include "doctest.h"
#include "mscrack/data.hpp"
#include "mscrack/error.hpp"
#include "mscrack/gradcheck.hpp"
#include "mscrack/metrics.hpp"
#include "mscrack/ops.hpp"
#include "mscrack/resolution.hpp"
#include "test_util.hpp"

using namespace mscrack;
using testutil::rand_tensor;

namespace {

SrModel random_sr(Rational f, std::uint64_t seed, std::size_t width = 4) {
  Rng rng(seed);
  SrModel m = SrModel::init(f, rng, width);
  m.conv3.w = rand_tensor(m.conv3.w.shape(), rng, -0.2, 0.2);
  m.conv3.b = rand_tensor(m.conv3.b.shape(), rng, -0.05, 0.05);
  m.conv1.b = rand_tensor(m.conv1.b.shape(), rng, 0.05, 0.2);
  m.conv2.b = rand_tensor(m.conv2.b.shape(), rng, 0.05, 0.2);
  return m;
}

}  // namespace

TEST_CASE("rational factors") {
  const Rational f = Rational::parse("10/3");
  CHECK(f == Rational{10, 3});
  CHECK(Rational::parse("20/6") == Rational{10, 3});
  CHECK(Rational::parse("2") == Rational{2, 1});
  CHECK(f.str() == "10/3");
  CHECK(f.shrink(384) == 115);
  CHECK(f.shrink(288) == 86);
  CHECK(f.shrink(96) == 29);
  CHECK(f.shrink(120) == 36);
  for (const char* bad : {"", "x", "3/0", "0/3", "1/-2", "10/3/2"})
    CHECK_THROWS_AS(Rational::parse(bad), ConfigError);
}

TEST_CASE("degrade") {
  Rng rng(1);
  CHECK(degrade(Tensor({3, 64, 64}), Rational{2, 1}).shape() == Shape{3, 32, 32});
  const Tensor d = degrade(Tensor({3, 288, 384}), Rational{10, 3});
  CHECK(d.shape() == Shape{3, 86, 115});
  const Tensor c = degrade(Tensor::full({3, 40, 30}, 0.3), Rational{10, 3});
  for (double v : c.data()) CHECK(v == doctest::Approx(0.3).epsilon(1e-14));
  const Tensor x = rand_tensor({3, 20, 20}, rng, 0, 1);
  CHECK(degrade(x, Rational{1, 1}) == x);
  CHECK_THROWS_AS(degrade(x, Rational{1, 2}), Error);
  CHECK_THROWS_AS(degrade(Tensor({3, 20, 20}), Rational{3, 1}), Error);
}

TEST_CASE("sr_forward contracts") {
  Rng rng(2);
  const Tensor low = rand_tensor({3, 9, 12}, rng, 0, 1);
  const SrModel zero = SrModel::init(Rational{10, 3}, rng, 4);
  const Tensor out = sr_forward(zero, low, 30, 40);
  CHECK(out.shape() == Shape{3, 30, 40});
  Tensor ref = resize_bicubic(low, 30, 40);
  for (auto& v : ref.data()) v = std::clamp(v, 0.0, 1.0);
  CHECK(out == ref);
  const Tensor r = sr_forward(random_sr(Rational{10, 3}, 3), low, 30, 40);
  for (double v : r.data()) CHECK((v >= 0 && v <= 1));
  SrCache cache;
  CHECK(sr_forward(random_sr(Rational{10, 3}, 3), low, 30, 40, cache) == r);
}

TEST_CASE("sr residual path passes grad_check") {
  const SrModel base = random_sr(Rational{2, 1}, 4, 3);
  Rng rng(5);
  // Mid-range input keeps the output clamp inactive.
  std::vector<Tensor> inputs{rand_tensor({3, 4, 5}, rng, 0.4, 0.6)};
  for (const auto& [name, t] : base.params()) inputs.push_back(*t);
  auto unpack = [&](const std::vector<Tensor>& in) {
    SrModel m = base;
    const auto ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i) *ps[i].second = in[i + 1];
    return m;
  };
  const ForwardFn f = [&](const std::vector<Tensor>& in) { return sr_forward(unpack(in), in[0], 8, 10); };
  const VjpFn vjp = [&](const std::vector<Tensor>& in, const Tensor& gy) {
    const SrModel m = unpack(in);
    SrCache cache;
    sr_forward(m, in[0], 8, 10, cache);
    SrModel g = m.zeros_like();
    std::vector<Tensor> out{sr_backward(m, cache, gy, g)};
    for (const auto& [name, t] : std::as_const(g).params()) out.push_back(*t);
    return out;
  };
  const auto rep = grad_check("sr_forward", f, vjp, inputs, {.tol = 1e-5});
  INFO(format_report(rep));
  CHECK(rep.pass);
}

TEST_CASE("sr_apply and fuse_channels") {
  Rng rng(6);
  const SrModel zero = SrModel::init(Rational{10, 3}, rng, 4);
  const Tensor ir = rand_tensor({3, 288, 384}, rng, 0, 1);
  const Tensor sr = sr_apply(zero, ir, 960, 1280);
  CHECK(sr.shape() == Shape{3, 960, 1280});
  for (double v : sr.data()) REQUIRE((v >= 0 && v <= 1));
  CHECK_THROWS_AS(sr_apply(zero, ir, 200, 1280), Error);

  const Tensor rgb = rand_tensor({3, 48, 48}, rng), irs = rand_tensor({3, 48, 48}, rng);
  const Tensor fused = fuse_channels(rgb, irs);
  CHECK(fused.shape() == Shape{6, 48, 48});
  const std::size_t plane = 3 * 48 * 48;
  CHECK(std::equal(rgb.ptr(), rgb.ptr() + plane, fused.ptr()));
  CHECK(std::equal(irs.ptr(), irs.ptr() + plane, fused.ptr() + plane));
  try {
    fuse_channels(rgb, Tensor({3, 24, 24}));
    FAIL("expected an error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3,48,48]") != std::string::npos);
    CHECK(msg.find("[3,24,24]") != std::string::npos);
  }
}

TEST_CASE("self-supervised training lowers the loss and roundtrips") {
  const auto samples = synth_dataset(0, 4, 120, 120, Rational{10, 3});
  std::vector<Tensor> irs;
  for (const auto& s : samples) irs.push_back(s.ir);
  SrTrainConfig cfg;
  cfg.iterations = 40;
  cfg.batch_size = 2;
  cfg.crop = 30;
  cfg.probe_crops = 8;
  SrTrainLog log;
  const SrModel m = sr_train_selfsupervised(irs, Rational{10, 3}, cfg, &log);
  CHECK(log.losses.size() == 40);
  CHECK(m.final_loss < m.initial_loss);
  const SrModel again = sr_train_selfsupervised(irs, Rational{10, 3}, cfg);
  CHECK(again.conv1.w == m.conv1.w);
  CHECK(again.final_loss == m.final_loss);

  const auto dir = std::filesystem::temp_directory_path() / "mscrack_test_sr";
  std::filesystem::remove_all(dir);
  save_sr_model(m, dir);
  const SrModel back = load_sr_model(dir);
  CHECK(back.factor == m.factor);
  CHECK(back.conv2.w == m.conv2.w);
  CHECK(back.conv3.b == m.conv3.b);
  CHECK(back.final_loss == m.final_loss);
  std::filesystem::remove_all(dir);

  SrTrainConfig hot = cfg;
  hot.lr = 1e3;
  CHECK_THROWS_WITH_AS(sr_train_selfsupervised(irs, Rational{10, 3}, hot),
                       doctest::Contains("learning rate"), Error);
}

TEST_CASE("factor 1 degenerates to the identity") {
  const auto samples = synth_dataset(1, 2, 30, 30, Rational{10, 3});
  std::vector<Tensor> irs{samples[0].ir, samples[1].ir};
  SrTrainConfig cfg;
  cfg.iterations = 5;
  cfg.crop = 8;
  cfg.probe_crops = 4;
  const SrModel m = sr_train_selfsupervised(irs, Rational{1, 1}, cfg);
  CHECK(m.initial_loss < 1e-20);
  CHECK(m.final_loss < 1e-6);
}
