#include "mscrack/suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <utility>

#include "mscrack/cross_scan.hpp"
#include "mscrack/error.hpp"
#include "mscrack/metrics.hpp"
#include "mscrack/ops.hpp"
#include "mscrack/resolution.hpp"
#include "mscrack/ssm.hpp"

namespace mscrack {

namespace {

Tensor rnd(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return uniform_tensor(std::move(s), rng, lo, hi);
}

std::size_t pick(Rng& r, std::size_t lo, std::size_t hi) { return lo + r.below(hi - lo + 1); }

struct Case {
  std::string name;
  ForwardFn f;
  VjpFn vjp;
  std::vector<Tensor> inputs;
  GradCheckOptions opts;
};

// Weight structs with a static visit(self, prefix, fn) are flattened into the
// input list after `lead` leading tensors.
template <typename W>
std::vector<Tensor> flatten(W w) {
  std::vector<Tensor> out;
  W::visit(w, "", [&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

template <typename W>
W unflatten(const W& proto, const std::vector<Tensor>& in, std::size_t lead) {
  W w = proto;
  std::size_t i = lead;
  W::visit(w, "", [&](const std::string&, Tensor& t) { t = in[i++]; });
  return w;
}

template <typename W>
W zeroed(const W& proto) {
  W w = proto;
  W::visit(w, "", [](const std::string&, Tensor& t) { t.fill(0.0); });
  return w;
}

template <typename W>
void jitter(W& w, Rng& rng, double amount) {
  W::visit(w, "", [&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v += rng.uniform(-amount, amount);
  });
}

SsmParams ssm_from(const std::vector<Tensor>& in, std::size_t o) {
  return SsmParams{in[o], in[o + 1], in[o + 2], in[o + 3], in[o + 4], in[o + 5]};
}

std::vector<Tensor> ssm_tensors(const SsmParams& p) { return {p.a_log, p.d, p.delta_w, p.delta_b, p.b_w, p.c_w}; }

SsmParams random_ssm(std::size_t c, std::size_t n, Rng& rng) {
  SsmParams p = SsmParams::init(c, n, rng);
  p.delta_w = rnd({c, c}, rng, -0.5, 0.5);
  p.b_w = rnd({c, n}, rng);
  p.c_w = rnd({c, n}, rng);
  p.d = rnd({c}, rng);
  return p;
}

ModelConfig reduced_config() {
  ModelConfig cfg;
  cfg.in_channels = 2;
  cfg.patch_size = 1;
  cfg.embed_dim = 2;
  cfg.depths = {1, 1};
  cfg.state_dim = 2;
  cfg.decoder_channels = 3;
  cfg.pool_bins = {1, 2};
  return cfg;
}

void elementary_cases(std::vector<Case>& cases, Rng& r) {
  for (int trial = 0; trial < 3; ++trial) {
    cases.push_back({"silu", [](auto& in) { return silu(in[0]); },
                     [](auto& in, auto& g) { return std::vector<Tensor>{silu_vjp(in[0], g)}; },
                     {rnd({pick(r, 1, 4), pick(r, 1, 5)}, r, -3, 3)}, {}});
    cases.push_back({"relu", [](auto& in) { return relu(in[0]); },
                     [](auto& in, auto& g) { return std::vector<Tensor>{relu_vjp(in[0], g)}; },
                     {rnd({pick(r, 2, 9)}, r)}, {}});
    const std::size_t d = pick(r, 2, 6);
    cases.push_back({"layer_norm", [](auto& in) { return layer_norm(in[0], in[1], in[2]); },
                     [](auto& in, auto& g) {
                       auto lg = layer_norm_vjp(in[0], in[1], 1e-5, g);
                       return std::vector<Tensor>{lg.dx, lg.dgamma, lg.dbeta};
                     },
                     {rnd({pick(r, 1, 4), d}, r), rnd({d}, r, 0.5, 1.5), rnd({d}, r)}, {}});
    const std::size_t li = pick(r, 1, 5), lo = pick(r, 1, 5);
    cases.push_back({"linear", [](auto& in) { return linear(in[0], in[1], in[2]); },
                     [](auto& in, auto& g) {
                       auto lg = linear_vjp(in[0], in[1], g);
                       return std::vector<Tensor>{lg.dx, lg.dw, lg.db};
                     },
                     {rnd({pick(r, 1, 3), pick(r, 1, 3), li}, r), rnd({li, lo}, r), rnd({lo}, r)}, {}});
    const std::size_t dc = pick(r, 1, 3), dk = 2 * pick(r, 0, 2) + 1;
    cases.push_back({"depthwise_conv2d", [](auto& in) { return depthwise_conv2d(in[0], in[1]); },
                     [](auto& in, auto& g) {
                       auto dg = depthwise_conv2d_vjp(in[0], in[1], g);
                       return std::vector<Tensor>{dg.dx, dg.dk};
                     },
                     {rnd({dc, pick(r, 1, 6), pick(r, 1, 6)}, r), rnd({dc, dk, dk}, r)}, {}});
    const std::size_t ci = pick(r, 1, 3), co = pick(r, 1, 3), ck = 2 * pick(r, 0, 1) + 1;
    cases.push_back({"conv2d", [](auto& in) { return conv2d(in[0], in[1], in[2]); },
                     [](auto& in, auto& g) {
                       auto cg = conv2d_vjp(in[0], in[1], g);
                       return std::vector<Tensor>{cg.dx, cg.dw, cg.db};
                     },
                     {rnd({ci, pick(r, 1, 5), pick(r, 1, 5)}, r), rnd({co, ci, ck, ck}, r), rnd({co}, r)}, {}});
    for (bool cubic : {true, false}) {
      const std::size_t oh = pick(r, 1, 9), ow = pick(r, 1, 9);
      cases.push_back({cubic ? "resize_bicubic" : "resize_bilinear",
                       [=](auto& in) { return cubic ? resize_bicubic(in[0], oh, ow) : resize_bilinear(in[0], oh, ow); },
                       [=](auto& in, auto& g) {
                         return std::vector<Tensor>{cubic ? resize_bicubic_vjp(g, in[0].dim(1), in[0].dim(2))
                                                          : resize_bilinear_vjp(g, in[0].dim(1), in[0].dim(2))};
                       },
                       {rnd({pick(r, 1, 2), pick(r, 1, 6), pick(r, 1, 6)}, r)}, {}});
    }
    const std::size_t bins = pick(r, 1, 6);
    cases.push_back({"adaptive_avg_pool2d", [=](auto& in) { return adaptive_avg_pool2d(in[0], bins); },
                     [](auto& in, auto& g) {
                       return std::vector<Tensor>{adaptive_avg_pool2d_vjp(g, in[0].dim(1), in[0].dim(2))};
                     },
                     {rnd({pick(r, 1, 3), pick(r, 1, 7), pick(r, 1, 7)}, r)}, {}});
  }
}

void scan_cases(std::vector<Case>& cases, Rng& r) {
  const SsmParams p = random_ssm(3, 4, r);
  std::vector<Tensor> in{rnd({16, 3}, r)};
  for (auto& t : ssm_tensors(p)) in.push_back(t);
  cases.push_back({"selective_scan", [](auto& in) { return selective_scan_seq(in[0], ssm_from(in, 1)); },
                   [](auto& in, auto& g) {
                     const ScanGrads sg = selective_scan_vjp(in[0], ssm_from(in, 1), g);
                     std::vector<Tensor> out{sg.dx};
                     for (auto& t : ssm_tensors(sg.dp)) out.push_back(t);
                     return out;
                   },
                   in, {}});
  // |A| near 1e-5 keeps |delta * A| under the series threshold.
  SsmParams tiny = p;
  tiny.a_log = rnd({3, 4}, r, -13, -11);
  std::vector<Tensor> tin{in[0]};
  for (auto& t : ssm_tensors(tiny)) tin.push_back(t);
  cases.push_back({"selective_scan_series", cases.back().f, cases.back().vjp, tin, {}});

  DirectionParams dirs;
  for (auto& q : dirs) q = random_ssm(2, 3, r);
  std::vector<Tensor> sin{rnd({3, 3, 2}, r)};
  for (const auto& q : dirs)
    for (auto& t : ssm_tensors(q)) sin.push_back(t);
  auto unpack = [](const std::vector<Tensor>& in) {
    DirectionParams d;
    for (std::size_t k = 0; k < 4; ++k) d[k] = ssm_from(in, 1 + 6 * k);
    return d;
  };
  cases.push_back({"ss2d", [=](auto& in) { return ss2d(in[0], unpack(in)); },
                   [=](auto& in, auto& g) {
                     const DirectionParams d = unpack(in);
                     Ss2dCache cache;
                     ss2d_forward(in[0], d, cache);
                     const Ss2dGrads sg = ss2d_vjp(cache, d, g);
                     std::vector<Tensor> out{sg.dx};
                     for (const auto& q : sg.dparams)
                       for (auto& t : ssm_tensors(q)) out.push_back(t);
                     return out;
                   },
                   sin, {}});
}

void model_cases(std::vector<Case>& cases, Rng& r) {
  cases.push_back({"patch_embed", [](auto& in) { return patch_embed(in[0], {in[1], in[2]}, 2); },
                   [](auto& in, auto& g) {
                     LinearWeights gw{Tensor(in[1].shape()), Tensor(in[2].shape())};
                     const Tensor dx = patch_embed_vjp(in[0], {in[1], in[2]}, 2, g, gw);
                     return std::vector<Tensor>{dx, gw.w, gw.b};
                   },
                   {rnd({2, 4, 6}, r), rnd({8, 3}, r), rnd({3}, r)}, {}});

  for (bool tied : {false, true}) {
    ModelConfig bc;
    bc.state_dim = 3;
    bc.tie_directions = tied;
    BlockWeights bw = BlockWeights::init(4, bc, r);
    jitter(bw, r, 0.1);
    std::vector<Tensor> in{rnd({3, 3, 4}, r)};
    for (auto& t : flatten(bw)) in.push_back(t);
    cases.push_back({tied ? "vss_block_tied" : "vss_block",
                     [=](auto& in) { return vss_block(in[0], unflatten(bw, in, 1)); },
                     [=](auto& in, auto& g) {
                       const BlockWeights b = unflatten(bw, in, 1);
                       BlockWeights gw = zeroed(b);
                       BlockCache cache;
                       vss_block_forward(in[0], b, cache);
                       std::vector<Tensor> out{vss_block_vjp(cache, b, g, gw)};
                       for (auto& t : flatten(gw)) out.push_back(t);
                       return out;
                     },
                     in, {}});
  }

  cases.push_back({"downsample", [](auto& in) { return downsample(in[0], {in[1], in[2]}); },
                   [](auto& in, auto& g) {
                     LinearWeights gw{Tensor(in[1].shape()), Tensor(in[2].shape())};
                     const Tensor dx = downsample_vjp(in[0], {in[1], in[2]}, g, gw);
                     return std::vector<Tensor>{dx, gw.w, gw.b};
                   },
                   {rnd({4, 2, 3}, r), rnd({12, 6}, r), rnd({6}, r)}, {}});

  const ModelConfig cfg = reduced_config();
  DecoderWeights dw = DecoderWeights::init({2, 4}, cfg, r);
  jitter(dw, r, 0.05);
  std::vector<Tensor> din{rnd({4, 4, 2}, r), rnd({2, 2, 4}, r)};
  for (auto& t : flatten(dw)) din.push_back(t);
  GradCheckOptions dopts;
  dopts.max_coords_per_input = 40;
  cases.push_back({"uper_decode", [=](auto& in) { return uper_decode({in[0], in[1]}, unflatten(dw, in, 2), 2, 7, 9); },
                   [=](auto& in, auto& g) {
                     const DecoderWeights d = unflatten(dw, in, 2);
                     DecoderWeights gw = zeroed(d);
                     DecoderCache cache;
                     uper_decode_forward({in[0], in[1]}, d, 7, 9, cache);
                     const auto df = uper_decode_vjp(cache, d, g, gw);
                     std::vector<Tensor> out{df[0], df[1]};
                     for (auto& t : flatten(gw)) out.push_back(t);
                     return out;
                   },
                   din, dopts});

  const SegNet proto = SegNet::init(cfg, r);
  std::vector<Tensor> min{rnd({2, 4, 4}, r, 0, 1)};
  for (const auto& [name, t] : proto.weights.params()) min.push_back(*t);
  auto net_from = [proto](const std::vector<Tensor>& in) {
    SegNet n = proto;
    const auto ps = n.weights.params();
    for (std::size_t i = 0; i < ps.size(); ++i) *ps[i].second = in[i + 1];
    return n;
  };
  GradCheckOptions mopts;
  mopts.max_coords_per_input = 12;
  cases.push_back({"segnet", [=](auto& in) { return model_forward(net_from(in), in[0]); },
                   [=](auto& in, auto& g) {
                     const SegNet n = net_from(in);
                     ModelCache cache;
                     model_forward(n, in[0], cache);
                     SegNetWeights gw = n.weights.zeros_like();
                     std::vector<Tensor> out{model_backward(n, cache, g, gw)};
                     for (const auto& [name, t] : std::as_const(gw).params()) out.push_back(*t);
                     return out;
                   },
                   min, mopts});

  Tensor target({2, 3, 4});
  for (auto& v : target.data()) v = double(r.below(2));
  cases.push_back({"cross_entropy", [=](auto& in) { return Tensor({1}, {cross_entropy(in[0], target).loss}); },
                   [=](auto& in, auto& g) {
                     Tensor grad = cross_entropy(in[0], target).grad;
                     grad *= g[0];
                     return std::vector<Tensor>{grad};
                   },
                   {rnd({2, 2, 3, 4}, r, -3, 3)}, {}});

  SrModel sr = SrModel::init(Rational{2, 1}, r, 3);
  sr.conv3.w = rnd(sr.conv3.w.shape(), r, -0.2, 0.2);
  sr.conv3.b = rnd(sr.conv3.b.shape(), r, -0.05, 0.05);
  sr.conv1.b = rnd(sr.conv1.b.shape(), r, 0.05, 0.2);
  sr.conv2.b = rnd(sr.conv2.b.shape(), r, 0.05, 0.2);
  // Mid-range input keeps the output clamp inactive.
  std::vector<Tensor> srin{rnd({3, 4, 5}, r, 0.4, 0.6)};
  for (const auto& [name, t] : std::as_const(sr).params()) srin.push_back(*t);
  auto sr_from = [sr](const std::vector<Tensor>& in) {
    SrModel m = sr;
    const auto ps = m.params();
    for (std::size_t i = 0; i < ps.size(); ++i) *ps[i].second = in[i + 1];
    return m;
  };
  cases.push_back({"sr_residual", [=](auto& in) { return sr_forward(sr_from(in), in[0], 8, 10); },
                   [=](auto& in, auto& g) {
                     const SrModel m = sr_from(in);
                     SrCache cache;
                     sr_forward(m, in[0], 8, 10, cache);
                     SrModel gm = m.zeros_like();
                     std::vector<Tensor> out{sr_backward(m, cache, g, gm)};
                     for (const auto& [name, t] : std::as_const(gm).params()) out.push_back(*t);
                     return out;
                   },
                   srin, {}});
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<GradCheckReport> gradient_suite(double tol, const ReportFn& on_report) {
  Rng rng(20240);
  std::vector<Case> cases;
  elementary_cases(cases, rng);
  scan_cases(cases, rng);
  model_cases(cases, rng);
  std::vector<GradCheckReport> reports;
  for (auto& c : cases) {
    c.opts.tol = tol;
    reports.push_back(grad_check(c.name, c.f, c.vjp, c.inputs, c.opts));
    if (on_report) on_report(reports.back());
  }
  return reports;
}

std::string BenchReport::table() const {
  std::string s = "| L | sequential (ms) | parallel (ms) | seq ratio | par ratio |\n|---|---|---|---|---|\n";
  char buf[160];
  for (const auto& r : rows) {
    if (r.seq_ratio > 0) {
      std::snprintf(buf, sizeof buf, "| %zu | %.3f | %.3f | %.3f | %.3f |\n", r.length, r.seq_seconds * 1e3,
                    r.par_seconds * 1e3, r.seq_ratio, r.par_ratio);
    } else {
      std::snprintf(buf, sizeof buf, "| %zu | %.3f | %.3f | - | - |\n", r.length, r.seq_seconds * 1e3,
                    r.par_seconds * 1e3);
    }
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "\nmedian doubling ratio: sequential %.3f, parallel %.3f (C=%zu, N=%zu, median of %zu)\n",
                median_seq_ratio, median_par_ratio, channels, state_dim, repeats);
  return s + buf;
}

BenchReport bench_scan(unsigned min_log2, unsigned max_log2, std::size_t repeats, std::size_t channels,
                       std::size_t state_dim) {
  if (min_log2 > max_log2 || repeats == 0) throw ConfigError("bench-scan: empty length range or zero repeats");
  using clock = std::chrono::steady_clock;
  BenchReport rep{channels, state_dim, repeats, {}, 0, 0};
  Rng rng(99);
  const SsmParams p = random_ssm(channels, state_dim, rng);
  double sink = 0;
  auto time = [&](auto&& fn) {
    std::vector<double> t;
    for (std::size_t k = 0; k < repeats; ++k) {
      const auto t0 = clock::now();
      const Tensor y = fn();
      t.push_back(std::chrono::duration<double>(clock::now() - t0).count());
      sink += y[0];
    }
    return median(t);
  };
  std::vector<double> seq_ratios, par_ratios;
  for (unsigned e = min_log2; e <= max_log2; ++e) {
    const std::size_t len = std::size_t(1) << e;
    const Tensor x = rnd({len, channels}, rng);
    BenchRow row;
    row.length = len;
    row.seq_seconds = time([&] { return selective_scan_seq(x, p); });
    row.par_seconds = time([&] { return selective_scan_par(x, p); });
    if (!rep.rows.empty()) {
      row.seq_ratio = row.seq_seconds / rep.rows.back().seq_seconds;
      row.par_ratio = row.par_seconds / rep.rows.back().par_seconds;
      seq_ratios.push_back(row.seq_ratio);
      par_ratios.push_back(row.par_ratio);
    }
    rep.rows.push_back(row);
  }
  if (!seq_ratios.empty()) {
    rep.median_seq_ratio = median(seq_ratios);
    rep.median_par_ratio = median(par_ratios);
  }
  if (!std::isfinite(sink)) throw Error("bench-scan: non-finite scan output");
  return rep;
}

TrainConfig toy_train_config(std::size_t iters, std::uint64_t seed) {
  TrainConfig c;
  c.total_iters = iters;
  c.batch_size = 4;
  c.base_lr = 1e-3;
  c.warmup_iters = std::max<std::size_t>(1, iters / 10);
  c.eval_interval = std::max<std::size_t>(1, iters / 5);
  c.patch = 48;
  c.seed = seed;
  return c;
}

std::size_t variant_patch(Variant v, std::size_t patch, Rational ir_factor, std::size_t multiple) {
  if (v == Variant::P_RGB || v == Variant::PRGB_plus_PIRprime) return patch;
  const std::size_t shrunk = ir_factor.shrink(patch) / multiple * multiple;
  return std::max(shrunk, multiple);
}

std::vector<Example> build_examples(const std::vector<SamplePair>& samples, const std::vector<std::string>& ids,
                                    Variant v, const SrModel* sr) {
  std::vector<Example> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = std::find_if(samples.begin(), samples.end(), [&](const SamplePair& s) { return s.id == id; });
    if (it == samples.end()) throw Error("unknown sample id " + id);
    out.push_back(make_variant(*it, v, sr));
  }
  return out;
}

double all_background_miou(const std::vector<Example>& examples) {
  ConfusionMatrix cm(2);
  for (const auto& e : examples) cm.accumulate(Tensor(e.target.shape()), e.target);
  return miou(cm);
}

VariantRun run_variant(const std::vector<SamplePair>& samples, const DatasetManifest& split, Variant v,
                       const SrModel* sr, const ModelConfig& model, TrainConfig train_cfg, const TrainOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc = model;
  mc.in_channels = variant_channels(v);
  train_cfg.patch = variant_patch(v, train_cfg.patch, split.ir_factor, mc.input_multiple());
  const auto tr = build_examples(samples, split.train_ids, v, sr);
  const auto va = build_examples(samples, split.val_ids, v, sr);
  TrainState st = init_train_state(mc, train_cfg.seed);
  train(st, tr, va, train_cfg, opts);
  const ConfusionMatrix cm = evaluate(st.net, va);
  VariantRun run;
  run.variant = v;
  run.patch = train_cfg.patch;
  run.miou = miou(cm);
  run.iou_bg = class_iou(cm, 0);
  run.iou_crack = class_iou(cm, 1);
  run.best_miou = st.best_miou;
  run.baseline_miou = all_background_miou(va);
  run.losses = st.losses;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

}  // namespace mscrack
