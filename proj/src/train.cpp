#include "mscrack/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "mscrack/checkpoint.hpp"
#include "mscrack/ops.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mscrack {

LossAndGrad cross_entropy(const Tensor& logits, const Tensor& target) {
  const bool batched = logits.rank() == 4;
  if (!(batched || logits.rank() == 3) || target.rank() != logits.rank() - 1) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  }
  const std::size_t b = batched ? logits.dim(0) : 1;
  const std::size_t k = logits.dim(batched ? 1 : 0);
  const std::size_t h = logits.dim(batched ? 2 : 1), w = logits.dim(batched ? 3 : 2);
  if (target.dim(target.rank() - 2) != h || target.dim(target.rank() - 1) != w || (batched && target.dim(0) != b)) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  }
  const std::size_t hw = h * w;
  const double scale = 1.0 / double(b * hw);
  LossAndGrad out{0.0, Tensor(logits.shape())};
  for (std::size_t n = 0; n < b; ++n) {
    const double* z = logits.ptr() + n * k * hw;
    double* g = out.grad.ptr() + n * k * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      const double tv = target[n * hw + p];
      if (!(tv >= 0) || tv >= double(k) || tv != std::floor(tv)) {
        throw Error("cross_entropy: target value " + std::to_string(tv) + " outside 0.." + std::to_string(k - 1));
      }
      const std::size_t t = std::size_t(tv);
      double mx = z[p];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[c * hw + p]);
      double se = 0;
      for (std::size_t c = 0; c < k; ++c) se += std::exp(z[c * hw + p] - mx);
      const double lse = mx + std::log(se);
      out.loss += (lse - z[t * hw + p]) * scale;
      for (std::size_t c = 0; c < k; ++c) {
        g[c * hw + p] = (std::exp(z[c * hw + p] - lse) - (c == t ? 1.0 : 0.0)) * scale;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- config

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  std::string bad;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) bad += (bad.empty() ? "" : ", ") + it.key();
  if (!bad.empty()) throw ConfigError(where + ": unknown keys: " + bad);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (total_iters == 0) fail("total_iters must be positive");
  if (warmup_iters >= total_iters) fail("warmup_iters must be below total_iters");
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (patch == 0) fail("patch must be positive");
  if (weight_decay < 0 || grad_clip < 0 || poly_power <= 0) fail("weight_decay, grad_clip and poly_power out of range");
}

json TrainConfig::to_json() const {
  return {{"total_iters", total_iters}, {"batch_size", batch_size},   {"base_lr", base_lr},
          {"weight_decay", weight_decay}, {"warmup_iters", warmup_iters}, {"poly_power", poly_power},
          {"seed", seed},               {"eval_interval", eval_interval}, {"patch", patch},
          {"grad_clip", grad_clip},     {"checkpoint_dir", checkpoint_dir.string()},
          {"log_path", log_path.string()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  const std::string w = "train config";
  reject_unknown(j, {"total_iters", "batch_size", "base_lr", "weight_decay", "warmup_iters", "poly_power", "seed",
                     "eval_interval", "patch", "grad_clip", "checkpoint_dir", "log_path"},
                 w);
  TrainConfig c;
  read(j, "total_iters", c.total_iters, w);
  read(j, "batch_size", c.batch_size, w);
  read(j, "base_lr", c.base_lr, w);
  read(j, "weight_decay", c.weight_decay, w);
  read(j, "warmup_iters", c.warmup_iters, w);
  read(j, "poly_power", c.poly_power, w);
  read(j, "seed", c.seed, w);
  read(j, "eval_interval", c.eval_interval, w);
  read(j, "patch", c.patch, w);
  read(j, "grad_clip", c.grad_clip, w);
  std::string s;
  read(j, "checkpoint_dir", s, w);
  c.checkpoint_dir = s;
  s.clear();
  read(j, "log_path", s, w);
  c.log_path = s;
  c.validate();
  return c;
}

json model_config_to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels},       {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
          {"depths", c.depths},                 {"state_dim", c.state_dim},   {"ssm_expand", c.ssm_expand},
          {"decoder_channels", c.decoder_channels}, {"num_classes", c.num_classes}, {"pool_bins", c.pool_bins},
          {"tie_directions", c.tie_directions}};
}

ModelConfig model_config_from_json(const json& j) {
  const std::string w = "model config";
  reject_unknown(j, {"in_channels", "patch_size", "embed_dim", "depths", "state_dim", "ssm_expand",
                     "decoder_channels", "num_classes", "pool_bins", "tie_directions"},
                 w);
  ModelConfig c;
  read(j, "in_channels", c.in_channels, w);
  read(j, "patch_size", c.patch_size, w);
  read(j, "embed_dim", c.embed_dim, w);
  read(j, "depths", c.depths, w);
  read(j, "state_dim", c.state_dim, w);
  read(j, "ssm_expand", c.ssm_expand, w);
  read(j, "decoder_channels", c.decoder_channels, w);
  read(j, "num_classes", c.num_classes, w);
  read(j, "pool_bins", c.pool_bins, w);
  read(j, "tie_directions", c.tie_directions, w);
  c.validate();
  return c;
}

double poly_lr(std::size_t iter, const TrainConfig& cfg) {
  if (iter < cfg.warmup_iters) return cfg.base_lr * double(iter + 1) / double(cfg.warmup_iters);
  const double span = double(cfg.total_iters - cfg.warmup_iters);
  const double frac = std::min(1.0, double(iter - cfg.warmup_iters) / span);
  return cfg.base_lr * std::pow(1.0 - frac, cfg.poly_power);
}

// ---------------------------------------------------------------- inference

Tensor predict_logits(const SegNet& net, const Tensor& input) {
  if (input.rank() != 3) throw ShapeError("predict: expected [C,H,W], got " + shape_str(input.shape()));
  const std::size_t m = net.cfg.input_multiple();
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  if (ph == h && pw == w) return model_forward(net, input);
  Tensor padded({c, ph, pw});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) padded.at(ch, y, x) = input.at(ch, std::min(y, h - 1), std::min(x, w - 1));
  const Tensor full = model_forward(net, padded);
  const std::size_t k = full.dim(0);
  Tensor out({k, h, w});
  for (std::size_t ch = 0; ch < k; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(ch, y, x) = full.at(ch, y, x);
  return out;
}

ConfusionMatrix evaluate(const SegNet& net, const std::vector<Example>& examples) {
  ConfusionMatrix cm(net.cfg.num_classes);
  for (const auto& e : examples) cm.accumulate(argmax_labels(predict_logits(net, e.input)), e.target);
  return cm;
}

// ---------------------------------------------------------------- checkpoints

namespace {

json history_json(const TrainState& st) {
  json losses = json::array(), evals = json::array();
  for (const auto& r : st.losses) losses.push_back({r.iter, r.loss, r.lr});
  for (const auto& r : st.evals) evals.push_back({r.iter, r.miou, r.iou_bg, r.iou_crack});
  return {{"losses", losses}, {"evals", evals}};
}

}  // namespace

void save_checkpoint(const fs::path& dir, const TrainState& st, const TrainConfig& cfg) {
  json m{{"kind", "segnet"},
         {"model", model_config_to_json(st.net.cfg)},
         {"train", cfg.to_json()},
         {"iteration", st.iter},
         {"optimizer_step", st.opt.step},
         {"best_miou", st.best_miou},
         {"history", history_json(st)}};
  m["rng"] = {{"seed", cfg.seed}, {"stream", "shuffle/augment"}, {"next_iteration", st.iter}};
  ConstParamList tensors;
  const ConstParamList params = st.net.weights.params();
  for (const auto& p : params) tensors.push_back({"param." + p.first, p.second});
  if (st.opt.m.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      tensors.push_back({"adam_m." + params[i].first, &st.opt.m[i]});
      tensors.push_back({"adam_v." + params[i].first, &st.opt.v[i]});
    }
  }
  save_archive(dir, m, tensors);
}

TrainState load_checkpoint(const fs::path& dir, TrainConfig* cfg_out) {
  const Archive a = load_archive(dir);
  if (a.manifest.value("kind", "") != "segnet") throw Error("checkpoint " + dir.string() + " is not a segmentation model");
  TrainState st;
  st.net.cfg = model_config_from_json(a.manifest.at("model"));
  Rng rng(0);
  st.net = SegNet::init(st.net.cfg, rng);
  const ParamList params = st.net.weights.params();
  assign_params(a, params, "param.");
  st.opt = AdamState::zeros_for(std::as_const(st.net.weights).params());
  if (a.tensors.count("adam_m." + params.front().first)) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.opt.m[i] = a.at("adam_m." + params[i].first);
      st.opt.v[i] = a.at("adam_v." + params[i].first);
    }
  }
  st.opt.step = a.manifest.at("optimizer_step").get<std::size_t>();
  st.iter = a.manifest.at("iteration").get<std::size_t>();
  st.best_miou = a.manifest.at("best_miou").get<double>();
  for (const auto& r : a.manifest.at("history").at("losses"))
    st.losses.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>()});
  for (const auto& r : a.manifest.at("history").at("evals"))
    st.evals.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>()});
  if (cfg_out) *cfg_out = TrainConfig::from_json(a.manifest.at("train"));
  return st;
}

// ---------------------------------------------------------------- loop

TrainState init_train_state(const ModelConfig& model_cfg, std::uint64_t seed) {
  model_cfg.validate();
  Rng rng(seed, "init");
  TrainState st;
  st.net = SegNet::init(model_cfg, rng);
  st.opt = AdamState::zeros_for(std::as_const(st.net.weights).params());
  return st;
}

void train(TrainState& st, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
           const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const std::size_t channels = st.net.cfg.in_channels;
  for (const auto* set : {&train_set, &val_set})
    for (const auto& e : *set)
      if (e.input.dim(0) != channels) {
        throw ConfigError("train: example " + e.id + " has " + std::to_string(e.input.dim(0)) +
                          " channels but the model expects " + std::to_string(channels));
      }
  if (cfg.patch % st.net.cfg.input_multiple() != 0) {
    throw ConfigError("train: patch " + std::to_string(cfg.patch) + " is not a multiple of " +
                      std::to_string(st.net.cfg.input_multiple()));
  }
  std::ofstream log_file;
  if (!cfg.log_path.empty()) {
    log_file.open(cfg.log_path, st.iter == 0 ? std::ios::trunc : std::ios::app);
    if (!log_file) throw Error("cannot open metrics log " + cfg.log_path.string());
  }
  auto emit = [&](const json& j) {
    const std::string line = j.dump();
    if (log_file) log_file << line << '\n' << std::flush;
    if (opts.on_log) opts.on_log(line);
  };
  const bool ckpt = !cfg.checkpoint_dir.empty();

  const std::size_t end = std::min(cfg.total_iters, opts.stop_at.value_or(cfg.total_iters));
  std::uint64_t cached_epoch = ~std::uint64_t(0);
  std::vector<std::vector<std::size_t>> batches;
  const std::size_t per_epoch = epoch_batches(train_set.size(), cfg.batch_size, true, cfg.seed, 0).size();
  const ParamList params = st.net.weights.params();

  while (st.iter < end) {
    const std::size_t it = st.iter;
    const std::uint64_t epoch = it / per_epoch;
    const std::size_t pos = it % per_epoch;
    if (epoch != cached_epoch) {
      batches = epoch_batches(train_set.size(), cfg.batch_size, true, cfg.seed, epoch);
      cached_epoch = epoch;
    }
    const Batch batch =
        assemble_batch(train_set, batches[pos], cfg.patch, channels, cfg.seed, epoch, pos * cfg.batch_size);
    const std::size_t b = batch.ids.size(), in_sz = channels * cfg.patch * cfg.patch, px = cfg.patch * cfg.patch;
    SegNetWeights grads = st.net.weights.zeros_like();
    double loss = 0;
    for (std::size_t k = 0; k < b; ++k) {
      const Tensor input({channels, cfg.patch, cfg.patch},
                         std::vector<double>(batch.inputs.ptr() + k * in_sz, batch.inputs.ptr() + (k + 1) * in_sz));
      const Tensor target({cfg.patch, cfg.patch},
                          std::vector<double>(batch.targets.ptr() + k * px, batch.targets.ptr() + (k + 1) * px));
      ModelCache cache;
      const Tensor logits = model_forward(st.net, input, cache);
      LossAndGrad lg = cross_entropy(logits, target);
      loss += lg.loss / double(b);
      lg.grad *= 1.0 / double(b);
      model_backward(st.net, cache, lg.grad, grads);
    }
    if (!std::isfinite(loss)) {
      throw Error("train: non-finite loss at iteration " + std::to_string(it) +
                  (ckpt ? "; last good checkpoint kept in " + cfg.checkpoint_dir.string() : std::string()));
    }
    if (cfg.grad_clip > 0) clip_grad_norm(grads.params(), cfg.grad_clip);
    const double lr = poly_lr(it, cfg);
    adamw_step(params, std::as_const(grads).params(), st.opt, lr, {.weight_decay = cfg.weight_decay});
    st.iter = it + 1;
    st.losses.push_back({it, loss, lr});
    emit({{"iter", it}, {"loss", loss}, {"lr", lr}});

    const bool eval_now = !val_set.empty() && ((cfg.eval_interval && st.iter % cfg.eval_interval == 0) ||
                                               st.iter == cfg.total_iters);
    if (eval_now) {
      const ConfusionMatrix cm = evaluate(st.net, val_set);
      const EvalRecord r{it, miou(cm), class_iou(cm, 0), cm.num_classes() > 1 ? class_iou(cm, 1) : -1.0};
      st.evals.push_back(r);
      emit({{"iter", it}, {"miou", r.miou}, {"iou_bg", r.iou_bg}, {"iou_crack", r.iou_crack}});
      if (r.miou > st.best_miou) {
        st.best_miou = r.miou;
        if (ckpt) save_checkpoint(cfg.checkpoint_dir / "best", st, cfg);
      }
      if (ckpt) save_checkpoint(cfg.checkpoint_dir / "last", st, cfg);
    }
  }
  if (ckpt) save_checkpoint(cfg.checkpoint_dir / "last", st, cfg);
}

}  // namespace mscrack
