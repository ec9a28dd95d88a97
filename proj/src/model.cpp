#include "mscrack/model.hpp"

#include <cmath>

#include "mscrack/ops.hpp"

namespace mscrack {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (in_channels == 0) fail("in_channels must be >= 1");
  if (patch_size == 0) fail("patch_size must be >= 1");
  if (embed_dim == 0) fail("embed_dim must be >= 1");
  if (depths.empty()) fail("depths must name at least one stage");
  if (state_dim == 0) fail("state_dim must be >= 1");
  if (ssm_expand == 0) fail("ssm_expand must be >= 1");
  if (decoder_channels == 0) fail("decoder_channels must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (pool_bins.empty()) fail("pool_bins must not be empty");
  for (auto b : pool_bins) {
    if (b == 0) fail("pool bins must be >= 1");
  }
}

namespace {

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  return uniform_tensor(std::move(shape), rng, -bound, bound);
}

LinearWeights init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {fan_in_uniform({in, out}, in, 1.0, rng), Tensor({out})};
}

}  // namespace

ConvWeights init_conv(std::size_t cin, std::size_t cout, std::size_t k, double gain, Rng& rng) {
  return {fan_in_uniform({cout, cin, k, k}, cin * k * k, gain, rng), Tensor({cout})};
}

namespace {

void add_linear_grads(LinearWeights& acc, const LinearGrads& g) {
  acc.w += g.dw;
  acc.b += g.db;
}

void add_conv_grads(ConvWeights& acc, const ConvGrads& g) {
  acc.w += g.dw;
  acc.b += g.db;
}

void add_ssm(SsmParams& acc, const SsmParams& g) {
  acc.a_log += g.a_log;
  acc.d += g.d;
  acc.delta_w += g.delta_w;
  acc.delta_b += g.delta_b;
  acc.b_w += g.b_w;
  acc.c_w += g.c_w;
}

}  // namespace

BlockWeights BlockWeights::init(std::size_t dim, const ModelConfig& cfg, Rng& rng) {
  const std::size_t inner = dim * cfg.ssm_expand;
  BlockWeights w;
  w.ln1_gamma = Tensor::full({dim}, 1.0);
  w.ln1_beta = Tensor({dim});
  auto gate = init_linear(dim, inner, rng);
  w.gate_w = std::move(gate.w);
  w.gate_b = std::move(gate.b);
  auto main = init_linear(dim, inner, rng);
  w.main_w = std::move(main.w);
  w.main_b = std::move(main.b);
  w.dw_kernel = fan_in_uniform({inner, 3, 3}, 9, 1.0, rng);
  const std::size_t groups = cfg.tie_directions ? 1 : 4;
  for (std::size_t d = 0; d < groups; ++d) w.ssm.push_back(SsmParams::init(inner, cfg.state_dim, rng));
  w.ln2_gamma = Tensor::full({inner}, 1.0);
  w.ln2_beta = Tensor({inner});
  auto out = init_linear(inner, dim, rng);
  w.out_w = std::move(out.w);
  w.out_b = std::move(out.b);
  return w;
}

DirectionParams BlockWeights::directions() const {
  if (ssm.size() == 1) return {ssm[0], ssm[0], ssm[0], ssm[0]};
  if (ssm.size() != 4) throw ShapeError("block must hold 1 or 4 SSM parameter groups");
  return {ssm[0], ssm[1], ssm[2], ssm[3]};
}

DecoderWeights DecoderWeights::init(const std::vector<std::size_t>& level_dims,
                                    const ModelConfig& cfg, Rng& rng) {
  const std::size_t ch = cfg.decoder_channels;
  const std::size_t levels = level_dims.size();
  const std::size_t deepest = level_dims.back();
  DecoderWeights w;
  w.bins = cfg.pool_bins;
  for (std::size_t i = 0; i < cfg.pool_bins.size(); ++i) {
    w.ppm.push_back(init_conv(deepest, ch, 1, std::sqrt(2.0), rng));
  }
  w.bottleneck = init_conv(deepest + cfg.pool_bins.size() * ch, ch, 3, std::sqrt(2.0), rng);
  for (std::size_t i = 0; i + 1 < levels; ++i) {
    w.lateral.push_back(init_conv(level_dims[i], ch, 1, std::sqrt(2.0), rng));
    w.fpn.push_back(init_conv(ch, ch, 3, std::sqrt(2.0), rng));
  }
  w.fpn_bottleneck = init_conv(levels * ch, ch, 3, std::sqrt(2.0), rng);
  w.classifier = init_conv(ch, cfg.num_classes, 1, 1.0, rng);
  return w;
}

ParamList SegNetWeights::params() {
  ParamList out;
  auto add = [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); };
  add("embed.w", embed.w);
  add("embed.b", embed.b);
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    if (s > 0) {
      add("stage" + std::to_string(s) + ".downsample.w", downsample[s - 1].w);
      add("stage" + std::to_string(s) + ".downsample.b", downsample[s - 1].b);
    }
    for (std::size_t b = 0; b < blocks[s].size(); ++b) {
      BlockWeights::visit(blocks[s][b],
                          "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".", add);
    }
  }
  DecoderWeights::visit(decoder, "decoder.", add);
  return out;
}

ConstParamList SegNetWeights::params() const {
  ConstParamList out;
  for (auto& [n, t] : const_cast<SegNetWeights*>(this)->params()) out.emplace_back(n, t);
  return out;
}

std::size_t SegNetWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params()) n += t->size();
  return n;
}

SegNetWeights SegNetWeights::zeros_like() const {
  SegNetWeights z = *this;
  for (auto& [name, t] : z.params()) t->fill(0.0);
  return z;
}

SegNet SegNet::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  SegNet net{cfg, {}};
  auto& w = net.weights;
  w.embed = init_linear(cfg.in_channels * cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng);
  std::vector<std::size_t> dims;
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    const std::size_t dim = cfg.stage_dim(s);
    dims.push_back(dim);
    if (s > 0) w.downsample.push_back(init_linear(4 * cfg.stage_dim(s - 1), dim, rng));
    std::vector<BlockWeights> stage;
    for (std::size_t b = 0; b < cfg.depths[s]; ++b) stage.push_back(BlockWeights::init(dim, cfg, rng));
    w.blocks.push_back(std::move(stage));
  }
  w.decoder = DecoderWeights::init(dims, cfg, rng);
  return net;
}

// ---------------------------------------------------------------- patch embed

namespace {

Tensor patchify(const Tensor& image, std::size_t ps) {
  if (image.rank() != 3) {
    throw ShapeError("patch_embed: expected [C,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h % ps != 0 || w % ps != 0) {
    throw ShapeError("patch_embed: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " are not divisible by patch size " + std::to_string(ps));
  }
  const std::size_t gh = h / ps, gw = w / ps, pd = c * ps * ps;
  Tensor t({gh, gw, pd});
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* dst = t.ptr() + (gy * gw + gx) * pd;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t dy = 0; dy < ps; ++dy) {
          for (std::size_t dx = 0; dx < ps; ++dx) {
            dst[(ch * ps + dy) * ps + dx] = image.at(ch, gy * ps + dy, gx * ps + dx);
          }
        }
      }
    }
  }
  return t;
}

}  // namespace

Tensor patch_embed(const Tensor& image, const LinearWeights& w, std::size_t patch_size) {
  return linear(patchify(image, patch_size), w.w, w.b);
}

Tensor patch_embed_vjp(const Tensor& image, const LinearWeights& w, std::size_t ps,
                       const Tensor& gy, LinearWeights& grads) {
  const Tensor tokens = patchify(image, ps);
  const LinearGrads g = linear_vjp(tokens, w.w, gy);
  add_linear_grads(grads, g);
  const std::size_t c = image.dim(0), gh = tokens.dim(0), gw = tokens.dim(1), pd = tokens.dim(2);
  Tensor dimg(image.shape());
  for (std::size_t gyi = 0; gyi < gh; ++gyi) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const double* src = g.dx.ptr() + (gyi * gw + gx) * pd;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t dy = 0; dy < ps; ++dy) {
          for (std::size_t dx = 0; dx < ps; ++dx) {
            dimg.at(ch, gyi * ps + dy, gx * ps + dx) = src[(ch * ps + dy) * ps + dx];
          }
        }
      }
    }
  }
  return dimg;
}

// ---------------------------------------------------------------- VSS block

Tensor vss_block(const Tensor& x, const BlockWeights& w) {
  BlockCache cache;
  return vss_block_forward(x, w, cache);
}

Tensor vss_block_forward(const Tensor& x, const BlockWeights& w, BlockCache& c) {
  if (x.rank() != 3) throw ShapeError("vss_block: expected [H,W,C], got " + shape_str(x.shape()));
  c.x = x;
  c.xn = layer_norm(x, w.ln1_gamma, w.ln1_beta);
  c.z = linear(c.xn, w.gate_w, w.gate_b);
  c.gate = silu(c.z);
  c.m_chw = hwc_to_chw(linear(c.xn, w.main_w, w.main_b));
  c.d = chw_to_hwc(depthwise_conv2d(c.m_chw, w.dw_kernel));
  c.a = silu(c.d);
  c.s = ss2d_forward(c.a, w.directions(), c.ss2d);
  c.sn = layer_norm(c.s, w.ln2_gamma, w.ln2_beta);
  Tensor p = c.sn;
  for (std::size_t i = 0; i < p.size(); ++i) p[i] *= c.gate[i];
  Tensor y = linear(p, w.out_w, w.out_b);
  y += x;
  return y;
}

Tensor vss_block_vjp(const BlockCache& c, const BlockWeights& w, const Tensor& gy,
                     BlockWeights& grads) {
  Tensor p = c.sn;
  for (std::size_t i = 0; i < p.size(); ++i) p[i] *= c.gate[i];
  const LinearGrads go = linear_vjp(p, w.out_w, gy);
  grads.out_w += go.dw;
  grads.out_b += go.db;

  Tensor dsn(c.sn.shape()), dgate(c.gate.shape());
  for (std::size_t i = 0; i < dsn.size(); ++i) {
    dsn[i] = go.dx[i] * c.gate[i];
    dgate[i] = go.dx[i] * c.sn[i];
  }
  const Tensor dz = silu_vjp(c.z, dgate);

  const LayerNormGrads g2 = layer_norm_vjp(c.s, w.ln2_gamma, 1e-5, dsn);
  grads.ln2_gamma += g2.dgamma;
  grads.ln2_beta += g2.dbeta;

  Ss2dGrads gs = ss2d_vjp(c.ss2d, w.directions(), g2.dx);
  if (grads.ssm.size() == 1) {
    for (const auto& dp : gs.dparams) add_ssm(grads.ssm[0], dp);
  } else {
    for (std::size_t d = 0; d < 4; ++d) add_ssm(grads.ssm[d], gs.dparams[d]);
  }

  const Tensor dd = silu_vjp(c.d, gs.dx);
  const DepthwiseGrads gdw = depthwise_conv2d_vjp(c.m_chw, w.dw_kernel, hwc_to_chw(dd));
  grads.dw_kernel += gdw.dk;
  const Tensor dm = chw_to_hwc(gdw.dx);

  const LinearGrads gm = linear_vjp(c.xn, w.main_w, dm);
  grads.main_w += gm.dw;
  grads.main_b += gm.db;
  const LinearGrads gg = linear_vjp(c.xn, w.gate_w, dz);
  grads.gate_w += gg.dw;
  grads.gate_b += gg.db;

  Tensor dxn = gm.dx;
  dxn += gg.dx;
  const LayerNormGrads g1 = layer_norm_vjp(c.x, w.ln1_gamma, 1e-5, dxn);
  grads.ln1_gamma += g1.dgamma;
  grads.ln1_beta += g1.dbeta;
  Tensor dx = gy;
  dx += g1.dx;
  return dx;
}

// ---------------------------------------------------------------- downsample

namespace {

// Sub-position order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
constexpr std::size_t kMergeDy[4] = {0, 1, 0, 1};
constexpr std::size_t kMergeDx[4] = {0, 0, 1, 1};

Tensor merge_patches(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("downsample: expected [H,W,C], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("downsample: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be even");
  }
  Tensor m({h / 2, w / 2, 4 * c});
  for (std::size_t y = 0; y < h / 2; ++y) {
    for (std::size_t xx = 0; xx < w / 2; ++xx) {
      double* dst = m.ptr() + (y * (w / 2) + xx) * 4 * c;
      for (std::size_t q = 0; q < 4; ++q) {
        const double* src = x.ptr() + ((2 * y + kMergeDy[q]) * w + 2 * xx + kMergeDx[q]) * c;
        std::copy_n(src, c, dst + q * c);
      }
    }
  }
  return m;
}

}  // namespace

Tensor downsample(const Tensor& x, const LinearWeights& w) {
  return linear(merge_patches(x), w.w, w.b);
}

Tensor downsample_vjp(const Tensor& x, const LinearWeights& w, const Tensor& gy,
                      LinearWeights& grads) {
  const Tensor merged = merge_patches(x);
  const LinearGrads g = linear_vjp(merged, w.w, gy);
  add_linear_grads(grads, g);
  const std::size_t h = x.dim(0), wd = x.dim(1), c = x.dim(2);
  Tensor dx(x.shape());
  for (std::size_t y = 0; y < h / 2; ++y) {
    for (std::size_t xx = 0; xx < wd / 2; ++xx) {
      const double* src = g.dx.ptr() + (y * (wd / 2) + xx) * 4 * c;
      for (std::size_t q = 0; q < 4; ++q) {
        double* dst = dx.ptr() + ((2 * y + kMergeDy[q]) * wd + 2 * xx + kMergeDx[q]) * c;
        std::copy_n(src + q * c, c, dst);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- encoder

std::vector<Tensor> encoder_forward(const Tensor& image, const SegNetWeights& w,
                                    const ModelConfig& cfg) {
  EncoderCache cache;
  return encoder_forward(image, w, cfg, cache);
}

std::vector<Tensor> encoder_forward(const Tensor& image, const SegNetWeights& w,
                                    const ModelConfig& cfg, EncoderCache& cache) {
  if (image.rank() != 3) {
    throw ShapeError("encoder: expected [C,H,W] image, got " + shape_str(image.shape()));
  }
  const std::size_t mult = cfg.input_multiple();
  if (image.dim(1) % mult != 0 || image.dim(2) % mult != 0) {
    throw ShapeError("encoder: input extents " + std::to_string(image.dim(1)) + "x" +
                     std::to_string(image.dim(2)) + " must be multiples of " +
                     std::to_string(mult));
  }
  cache.image = image;
  cache.stage_inputs.assign(cfg.stages(), Tensor{});
  cache.blocks.assign(cfg.stages(), {});
  std::vector<Tensor> features;
  Tensor x = patch_embed(image, w.embed, cfg.patch_size);
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    if (s > 0) {
      cache.stage_inputs[s] = x;
      x = downsample(x, w.downsample[s - 1]);
    }
    cache.blocks[s].resize(w.blocks[s].size());
    for (std::size_t b = 0; b < w.blocks[s].size(); ++b) {
      x = vss_block_forward(x, w.blocks[s][b], cache.blocks[s][b]);
    }
    features.push_back(x);
  }
  return features;
}

Tensor encoder_vjp(const EncoderCache& cache, const SegNetWeights& w, const ModelConfig& cfg,
                   const std::vector<Tensor>& dfeatures, SegNetWeights& grads) {
  if (dfeatures.size() != cfg.stages()) {
    throw ShapeError("encoder_vjp: expected one cotangent per stage");
  }
  Tensor g;
  for (std::size_t s = cfg.stages(); s-- > 0;) {
    if (g.empty()) {
      g = dfeatures[s];
    } else {
      g += dfeatures[s];
    }
    for (std::size_t b = w.blocks[s].size(); b-- > 0;) {
      g = vss_block_vjp(cache.blocks[s][b], w.blocks[s][b], g, grads.blocks[s][b]);
    }
    if (s > 0) {
      g = downsample_vjp(cache.stage_inputs[s], w.downsample[s - 1], g, grads.downsample[s - 1]);
    }
  }
  return patch_embed_vjp(cache.image, w.embed, cfg.patch_size, g, grads.embed);
}

// ---------------------------------------------------------------- decoder

Tensor uper_decode(const std::vector<Tensor>& features, const DecoderWeights& w,
                   std::size_t num_classes, std::size_t out_h, std::size_t out_w) {
  if (w.classifier.w.dim(0) != num_classes) {
    throw ShapeError("uper_decode: classifier produces " + std::to_string(w.classifier.w.dim(0)) +
                     " classes, expected " + std::to_string(num_classes));
  }
  DecoderCache cache;
  return uper_decode_forward(features, w, out_h, out_w, cache);
}

Tensor uper_decode_forward(const std::vector<Tensor>& features, const DecoderWeights& w,
                           std::size_t out_h, std::size_t out_w, DecoderCache& c) {
  const std::size_t levels = features.size();
  if (levels == 0 || w.lateral.size() + 1 != levels || w.fpn.size() + 1 != levels) {
    throw ShapeError("uper_decode: " + std::to_string(levels) +
                     " feature levels do not match decoder weights for " +
                     std::to_string(w.lateral.size() + 1) + " levels");
  }
  c.out_h = out_h;
  c.out_w = out_w;
  c.feats.clear();
  for (const auto& f : features) c.feats.push_back(hwc_to_chw(f));
  const Tensor& deepest = c.feats.back();
  const std::size_t hl = deepest.dim(1), wl = deepest.dim(2);

  std::vector<Tensor> parts{deepest};
  c.ppm_pooled.clear();
  c.ppm_pre.clear();
  for (std::size_t j = 0; j < w.ppm.size(); ++j) {
    c.ppm_pooled.push_back(adaptive_avg_pool2d(deepest, w.bins[j]));
    c.ppm_pre.push_back(conv2d(c.ppm_pooled[j], w.ppm[j].w, w.ppm[j].b));
    parts.push_back(resize_bilinear(relu(c.ppm_pre[j]), hl, wl));
  }
  c.psp_in = concat_channels(parts);
  c.psp_pre = conv2d(c.psp_in, w.bottleneck.w, w.bottleneck.b);

  c.lat_pre.assign(levels, Tensor{});
  c.lat.assign(levels, Tensor{});
  c.lat[levels - 1] = relu(c.psp_pre);
  for (std::size_t i = 0; i + 1 < levels; ++i) {
    c.lat_pre[i] = conv2d(c.feats[i], w.lateral[i].w, w.lateral[i].b);
    c.lat[i] = relu(c.lat_pre[i]);
  }
  for (std::size_t i = levels - 1; i > 0; --i) {
    c.lat[i - 1] += resize_bilinear(c.lat[i], c.lat[i - 1].dim(1), c.lat[i - 1].dim(2));
  }

  c.fpn_pre.assign(levels, Tensor{});
  c.outs.assign(levels, Tensor{});
  for (std::size_t i = 0; i + 1 < levels; ++i) {
    c.fpn_pre[i] = conv2d(c.lat[i], w.fpn[i].w, w.fpn[i].b);
    c.outs[i] = relu(c.fpn_pre[i]);
  }
  c.outs[levels - 1] = c.lat[levels - 1];

  const std::size_t h0 = c.feats[0].dim(1), w0 = c.feats[0].dim(2);
  std::vector<Tensor> ups;
  for (const auto& o : c.outs) ups.push_back(resize_bilinear(o, h0, w0));
  c.fused_in = concat_channels(ups);
  c.fused_pre = conv2d(c.fused_in, w.fpn_bottleneck.w, w.fpn_bottleneck.b);
  c.fused = relu(c.fused_pre);
  const Tensor small = conv2d(c.fused, w.classifier.w, w.classifier.b);
  return resize_bilinear(small, out_h, out_w);
}

std::vector<Tensor> uper_decode_vjp(const DecoderCache& c, const DecoderWeights& w,
                                    const Tensor& gy, DecoderWeights& grads) {
  const std::size_t levels = c.feats.size();
  const std::size_t h0 = c.feats[0].dim(1), w0 = c.feats[0].dim(2);
  const std::size_t ch = w.fpn_bottleneck.w.dim(0);

  const Tensor dsmall = resize_bilinear_vjp(gy, h0, w0);
  const ConvGrads gc = conv2d_vjp(c.fused, w.classifier.w, dsmall);
  add_conv_grads(grads.classifier, gc);
  const ConvGrads gf = conv2d_vjp(c.fused_in, w.fpn_bottleneck.w, relu_vjp(c.fused_pre, gc.dx));
  add_conv_grads(grads.fpn_bottleneck, gf);
  const std::vector<std::size_t> fsizes(levels, ch);
  const std::vector<Tensor> dups = split_channels(gf.dx, fsizes);

  std::vector<Tensor> dlat(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    const Tensor douts = resize_bilinear_vjp(dups[i], c.outs[i].dim(1), c.outs[i].dim(2));
    if (i + 1 < levels) {
      const ConvGrads g = conv2d_vjp(c.lat[i], w.fpn[i].w, relu_vjp(c.fpn_pre[i], douts));
      add_conv_grads(grads.fpn[i], g);
      dlat[i] = g.dx;
    } else {
      dlat[i] = douts;
    }
  }
  for (std::size_t i = 0; i + 1 < levels; ++i) {
    dlat[i + 1] += resize_bilinear_vjp(dlat[i], c.lat[i + 1].dim(1), c.lat[i + 1].dim(2));
  }

  std::vector<Tensor> dfeat(levels);
  for (std::size_t i = 0; i + 1 < levels; ++i) {
    const ConvGrads g = conv2d_vjp(c.feats[i], w.lateral[i].w, relu_vjp(c.lat_pre[i], dlat[i]));
    add_conv_grads(grads.lateral[i], g);
    dfeat[i] = g.dx;
  }

  const Tensor& deepest = c.feats.back();
  const std::size_t hl = deepest.dim(1), wl = deepest.dim(2);
  const ConvGrads gb =
      conv2d_vjp(c.psp_in, w.bottleneck.w, relu_vjp(c.psp_pre, dlat[levels - 1]));
  add_conv_grads(grads.bottleneck, gb);
  std::vector<std::size_t> psizes{deepest.dim(0)};
  for (std::size_t j = 0; j < w.ppm.size(); ++j) psizes.push_back(ch);
  std::vector<Tensor> dparts = split_channels(gb.dx, psizes);
  Tensor ddeep = std::move(dparts[0]);
  for (std::size_t j = 0; j < w.ppm.size(); ++j) {
    const Tensor dr = resize_bilinear_vjp(dparts[j + 1], w.bins[j], w.bins[j]);
    const ConvGrads g = conv2d_vjp(c.ppm_pooled[j], w.ppm[j].w, relu_vjp(c.ppm_pre[j], dr));
    add_conv_grads(grads.ppm[j], g);
    ddeep += adaptive_avg_pool2d_vjp(g.dx, hl, wl);
  }
  dfeat[levels - 1] = std::move(ddeep);

  for (auto& f : dfeat) f = chw_to_hwc(f);
  return dfeat;
}

// ---------------------------------------------------------------- full model

Tensor model_forward(const SegNet& net, const Tensor& image) {
  ModelCache cache;
  return model_forward(net, image, cache);
}

Tensor model_forward(const SegNet& net, const Tensor& image, ModelCache& cache) {
  if (image.rank() != 3) {
    throw ShapeError("model: expected [C,H,W] image, got " + shape_str(image.shape()));
  }
  if (image.dim(0) != net.cfg.in_channels) {
    throw ShapeError("model: channel mismatch, expected " + std::to_string(net.cfg.in_channels) +
                     " input channels, got " + std::to_string(image.dim(0)));
  }
  const auto features = encoder_forward(image, net.weights, net.cfg, cache.encoder);
  return uper_decode_forward(features, net.weights.decoder, image.dim(1), image.dim(2),
                             cache.decoder);
}

Tensor model_backward(const SegNet& net, const ModelCache& cache, const Tensor& dlogits,
                      SegNetWeights& grads) {
  const auto dfeat = uper_decode_vjp(cache.decoder, net.weights.decoder, dlogits, grads.decoder);
  return encoder_vjp(cache.encoder, net.weights, net.cfg, dfeat, grads);
}

}  // namespace mscrack
