#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include "doctest.h"
#include "mscrack/checkpoint.hpp"
#include "mscrack/error.hpp"
#include "mscrack/gradcheck.hpp"
#include "mscrack/optim.hpp"
#include "mscrack/train.hpp"
#include "test_util.hpp"

using namespace mscrack;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mscrack_test_train_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Concatenation of every file under a directory, in path order.
std::string tree_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.string() + "\n" + slurp(dir / f);
  return all;
}

ModelConfig small_model() {
  ModelConfig c;
  c.in_channels = 3;
  c.patch_size = 3;
  c.embed_dim = 4;
  c.depths = {1, 1};
  c.state_dim = 2;
  c.decoder_channels = 4;
  c.pool_bins = {1, 2};
  return c;
}

struct SmallData {
  std::vector<Example> train, val;
};

SmallData small_data() {
  const auto samples = synth_dataset(7, 8, 30, 30, Rational{10, 3});
  SmallData d;
  for (std::size_t i = 0; i < samples.size(); ++i)
    (i < 6 ? d.train : d.val).push_back(make_variant(samples[i], Variant::P_RGB, nullptr));
  return d;
}

TrainConfig small_train(std::size_t iters) {
  TrainConfig c;
  c.total_iters = iters;
  c.batch_size = 2;
  c.base_lr = 1e-2;
  c.warmup_iters = 2;
  c.eval_interval = 4;
  c.patch = 12;
  c.seed = 3;
  return c;
}

std::vector<double> loss_curve(const TrainState& st) {
  std::vector<double> v;
  for (const auto& r : st.losses) v.push_back(r.loss);
  return v;
}

}  // namespace

TEST_CASE("cross_entropy values") {
  const Tensor zeros({2, 3, 4});
  CHECK(cross_entropy(zeros, Tensor({3, 4})).loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  Tensor logits({2, 2, 2});
  Tensor target({2, 2}, {0, 1, 1, 0});
  for (std::size_t p = 0; p < 4; ++p) logits[(target[p] == 0 ? 0 : 4) + p] = 20.0;
  CHECK(cross_entropy(logits, target).loss < 1e-8);
  Tensor big({2, 1, 1}, {1000.0, -1000.0});
  const auto lg = cross_entropy(big, Tensor({1, 1}, {0}));
  CHECK(std::isfinite(lg.loss));
  CHECK(lg.loss == 0.0);
  CHECK_THROWS_AS(cross_entropy(zeros, Tensor({3, 4}, std::vector<double>(12, 2.0))), Error);
  CHECK_THROWS_AS(cross_entropy(zeros, Tensor({3, 5})), ShapeError);
}

TEST_CASE("cross_entropy gradient") {
  Rng rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t b = 1 + rng.below(2), h = 1 + rng.below(4), w = 1 + rng.below(4);
    Tensor target({b, h, w});
    for (auto& v : target.data()) v = double(rng.below(2));
    const ForwardFn f = [&](const std::vector<Tensor>& in) {
      return Tensor({1}, {cross_entropy(in[0], target).loss});
    };
    const VjpFn vjp = [&](const std::vector<Tensor>& in, const Tensor& gy) {
      Tensor g = cross_entropy(in[0], target).grad;
      g *= gy[0];
      return std::vector<Tensor>{g};
    };
    const auto rep = grad_check("cross_entropy", f, vjp, {testutil::rand_tensor({b, 2, h, w}, rng, -3, 3)});
    INFO(format_report(rep));
    CHECK(rep.pass);
  }
}

TEST_CASE("adamw single step") {
  Tensor theta({1}, {1.0}), g({1}, {1.0});
  ParamList p{{"theta", &theta}};
  ConstParamList gr{{"theta", &g}};
  AdamState st = AdamState::zeros_for({{"theta", &theta}});
  adamw_step(p, gr, st, 0.1);
  CHECK(theta[0] == doctest::Approx(1 - 0.1 * (1 / (1 + 1e-8)) - 0.1 * 0.01).epsilon(1e-15));
  CHECK(theta[0] == doctest::Approx(0.899).epsilon(1e-7));
  // First step: mhat = g, so the update direction is g / (|g| + eps).
  CHECK(st.m[0][0] == doctest::Approx(0.1));
  CHECK(st.step == 1);
}

TEST_CASE("adamw with zero gradients is pure decay") {
  Tensor theta({3}, {1.0, -2.0, 0.5}), g({3});
  ParamList p{{"w", &theta}};
  AdamState st = AdamState::zeros_for({{"w", &theta}});
  const Tensor start = theta;
  for (int k = 1; k <= 5; ++k) {
    adamw_step(p, {{"w", &g}}, st, 0.1);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(theta[i] == doctest::Approx(start[i] * std::pow(1 - 0.1 * 0.01, k)).epsilon(1e-14));
  }
}

TEST_CASE("adamw rejects non-finite gradients without touching parameters") {
  Tensor a({2}, {1, 2}), b({2}, {3, 4});
  Tensor ga({2}, {0.1, 0.2}), gb({2}, {NAN, 0});
  ParamList p{{"a", &a}, {"b", &b}};
  AdamState st = AdamState::zeros_for({{"a", &a}, {"b", &b}});
  try {
    adamw_step(p, {{"a", &ga}, {"b", &gb}}, st, 0.1);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  CHECK(a == Tensor({2}, {1, 2}));
  CHECK(st.step == 0);
}

TEST_CASE("clip_grad_norm") {
  Tensor a({2}, {3, 0}), b({1}, {4});
  const double n = clip_grad_norm({{"a", &a}, {"b", &b}}, 1.0);
  CHECK(n == doctest::Approx(5.0));
  CHECK(a[0] == doctest::Approx(0.6));
  CHECK(b[0] == doctest::Approx(0.8));
}

TEST_CASE("poly_lr schedule") {
  TrainConfig c;
  CHECK(poly_lr(0, c) == doctest::Approx(3e-5 / 1500));
  CHECK(poly_lr(1500, c) == 3e-5);
  CHECK(poly_lr(20000, c) == 0.0);
  CHECK(poly_lr(10750, c) == doctest::Approx(3e-5 * std::pow(0.5, 0.9)).epsilon(1e-12));
  CHECK(poly_lr(10750, c) == doctest::Approx(1.6075e-5).epsilon(1e-4));
  CHECK(std::fabs(poly_lr(1499, c) - poly_lr(1500, c)) < 1e-12);
  for (std::size_t it = 1500; it < 20000; it += 37) CHECK(poly_lr(it + 1, c) <= poly_lr(it, c));
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.total_iters = 700;
  c.warmup_iters = 50;
  c.base_lr = 1e-3;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["learning_rate"] = 1;
  try {
    TrainConfig::from_json(j);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
  }
  TrainConfig bad;
  bad.warmup_iters = bad.total_iters;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.base_lr = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const ModelConfig m = small_model();
  CHECK(model_config_to_json(model_config_from_json(model_config_to_json(m))) == model_config_to_json(m));
  auto mj = model_config_to_json(m);
  mj["heads"] = 4;
  CHECK_THROWS_AS(model_config_from_json(mj), ConfigError);
}

TEST_CASE("predict_logits pads and crops to the input extent") {
  Rng rng(9);
  const SegNet net = init_train_state(small_model(), 0).net;
  const Tensor img = testutil::rand_tensor({3, 13, 7}, rng, 0, 1);
  const Tensor logits = predict_logits(net, img);
  CHECK(logits.shape() == Shape{2, 13, 7});
  const Tensor exact = testutil::rand_tensor({3, 12, 6}, rng, 0, 1);
  CHECK(predict_logits(net, exact) == model_forward(net, exact));
}

TEST_CASE("one small adamw step lowers the loss on a fixed batch") {
  const SmallData d = small_data();
  int failures = 0;
  for (int trial = 0; trial < 20; ++trial) {
    TrainState st = init_train_state(small_model(), 100 + trial);
    Rng rng(trial);
    const Example e = augment(d.train[trial % d.train.size()], rng, 12);
    ModelCache cache;
    const auto lg = cross_entropy(model_forward(st.net, e.input, cache), e.target);
    SegNetWeights g = st.net.weights.zeros_like();
    model_backward(st.net, cache, lg.grad, g);
    AdamWHyper h;
    h.weight_decay = 0;
    adamw_step(st.net.weights.params(), std::as_const(g).params(), st.opt, 1e-6, h);
    const double after = cross_entropy(model_forward(st.net, e.input), e.target).loss;
    failures += after >= lg.loss;
  }
  CHECK(failures <= 1);
}

TEST_CASE("training is deterministic and resumable") {
  const SmallData d = small_data();
  const TrainConfig cfg = small_train(10);
  TrainState a = init_train_state(small_model(), cfg.seed);
  train(a, d.train, d.val, cfg);
  TrainState b = init_train_state(small_model(), cfg.seed);
  train(b, d.train, d.val, cfg);
  REQUIRE(a.losses.size() == 10);
  CHECK(loss_curve(a) == loss_curve(b));
  CHECK(a.net.weights.params().size() == b.net.weights.params().size());
  for (const auto& r : a.losses) CHECK(std::isfinite(r.loss));
  CHECK(a.evals.size() == 3);  // iterations 3, 7 and the final one

  const fs::path dir = scratch("resume");
  TrainConfig rc = cfg;
  rc.checkpoint_dir = dir;
  TrainState c = init_train_state(small_model(), cfg.seed);
  TrainOptions stop;
  stop.stop_at = 5;
  train(c, d.train, d.val, rc, stop);
  CHECK(c.iter == 5);
  TrainConfig loaded_cfg;
  TrainState r = load_checkpoint(dir / "last", &loaded_cfg);
  CHECK(r.iter == 5);
  CHECK(loaded_cfg.to_json() == rc.to_json());
  train(r, d.train, d.val, loaded_cfg);
  CHECK(loss_curve(r) == loss_curve(a));
  CHECK(fs::exists(dir / "best" / "manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint save, load, save is byte-identical") {
  const SmallData d = small_data();
  const TrainConfig cfg = small_train(3);
  TrainState st = init_train_state(small_model(), 1);
  train(st, d.train, d.val, cfg);
  const fs::path one = scratch("ck1"), two = scratch("ck2");
  save_checkpoint(one, st, cfg);
  TrainConfig back;
  const TrainState loaded = load_checkpoint(one, &back);
  save_checkpoint(two, loaded, back);
  CHECK(tree_bytes(one) == tree_bytes(two));
  CHECK_FALSE(fs::exists(one.string() + ".tmp"));
  fs::remove_all(one);
  fs::remove_all(two);
}

TEST_CASE("archive errors") {
  const fs::path dir = scratch("archive");
  Tensor t({2}, {1, 2});
  save_archive(dir, nlohmann::json{{"kind", "test"}}, {{"t", &t}});
  const Archive a = load_archive(dir);
  CHECK(a.at("t") == t);
  CHECK_THROWS_AS(a.at("missing"), Error);
  Tensor wrong({3});
  CHECK_THROWS_AS(assign_params(a, {{"t", &wrong}}), Error);
  CHECK_THROWS_AS(load_archive(dir / "nope"), Error);
  fs::remove_all(dir);
}

TEST_CASE("channel mismatch is rejected before training") {
  const SmallData d = small_data();
  ModelConfig six = small_model();
  six.in_channels = 6;
  TrainState st = init_train_state(six, 0);
  CHECK_THROWS_AS(train(st, d.train, d.val, small_train(2)), ConfigError);
}

TEST_CASE("metrics log is json lines") {
  const SmallData d = small_data();
  const fs::path log = scratch("log.jsonl");
  TrainConfig cfg = small_train(4);
  cfg.log_path = log;
  TrainState st = init_train_state(small_model(), 0);
  train(st, d.train, d.val, cfg);
  std::ifstream in(log);
  std::string line;
  int steps = 0, evals = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("loss")) {
      CHECK(j.contains("lr"));
      ++steps;
    } else {
      CHECK(j.contains("miou"));
      CHECK(j.contains("iou_bg"));
      CHECK(j.contains("iou_crack"));
      ++evals;
    }
  }
  CHECK(steps == 4);
  CHECK(evals == 1);
  fs::remove(log);
}
