#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mscrack/cross_scan.hpp"
#include "mscrack/random.hpp"
#include "mscrack/tensor.hpp"

namespace mscrack {

struct ModelConfig {
  std::size_t in_channels = 6;
  std::size_t patch_size = 3;
  std::size_t embed_dim = 16;  // stage i width is embed_dim * 2^i
  std::vector<std::size_t> depths{1, 1, 1, 1};
  std::size_t state_dim = 4;
  std::size_t ssm_expand = 2;
  std::size_t decoder_channels = 32;
  std::size_t num_classes = 2;
  std::vector<std::size_t> pool_bins{1, 2, 3, 6};
  bool tie_directions = false;

  std::size_t stages() const { return depths.size(); }
  std::size_t stage_dim(std::size_t stage) const { return embed_dim << stage; }
  // Input extents must be multiples of this.
  std::size_t input_multiple() const { return patch_size << (stages() - 1); }
  void validate() const;
};

// One gated VisionMamba block on a [H,W,C] grid with inner width E.
struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;  // [C]
  Tensor gate_w, gate_b;       // [C,E], [E]
  Tensor main_w, main_b;       // [C,E], [E]
  Tensor dw_kernel;            // [E,3,3]
  std::vector<SsmParams> ssm;  // 4 directions, or 1 when tied
  Tensor ln2_gamma, ln2_beta;  // [E]
  Tensor out_w, out_b;         // [E,C], [C]

  static BlockWeights init(std::size_t dim, const ModelConfig& cfg, Rng& rng);
  DirectionParams directions() const;

  template <typename Self, typename F>
  static void visit(Self& s, const std::string& prefix, F&& f);
};

struct LinearWeights {
  Tensor w, b;
};

struct ConvWeights {
  Tensor w, b;  // [Cout,Cin,k,k], [Cout]
};
// Uniform fan-in init with bound gain * sqrt(3 / (cin*k*k)); zero bias.
ConvWeights init_conv(std::size_t cin, std::size_t cout, std::size_t k, double gain, Rng& rng);

struct DecoderWeights {
  std::vector<std::size_t> bins;      // pyramid pooling grid sizes (not learned)
  std::vector<ConvWeights> ppm;       // one 1x1 conv per pooling bin
  ConvWeights bottleneck;             // 3x3 over [deepest, ppm...]
  std::vector<ConvWeights> lateral;   // 1x1, levels 0..L-2
  std::vector<ConvWeights> fpn;       // 3x3, levels 0..L-2
  ConvWeights fpn_bottleneck;         // 3x3 over all L levels
  ConvWeights classifier;             // 1x1 to num_classes

  // level_dims: channel width of each encoder level, shallowest first.
  static DecoderWeights init(const std::vector<std::size_t>& level_dims, const ModelConfig& cfg,
                             Rng& rng);

  template <typename Self, typename F>
  static void visit(Self& s, const std::string& prefix, F&& f);
};

struct SegNetWeights {
  LinearWeights embed;                            // [Cin*ps*ps, C0]
  std::vector<std::vector<BlockWeights>> blocks;  // per stage
  std::vector<LinearWeights> downsample;          // before stages 1..S-1: [4C, 2C]
  DecoderWeights decoder;

  ParamList params();
  ConstParamList params() const;
  std::size_t parameter_count() const;
  SegNetWeights zeros_like() const;
};

struct SegNet {
  ModelConfig cfg;
  SegNetWeights weights;

  static SegNet init(const ModelConfig& cfg, Rng& rng);
};

// ---- forward / backward building blocks ----

Tensor patch_embed(const Tensor& image, const LinearWeights& w, std::size_t patch_size);
Tensor patch_embed_vjp(const Tensor& image, const LinearWeights& w, std::size_t patch_size,
                       const Tensor& gy, LinearWeights& grads);

struct BlockCache {
  Tensor x, xn, z, m_chw, d, a, s, sn, gate;
  Ss2dCache ss2d;
};
Tensor vss_block(const Tensor& x, const BlockWeights& w);
Tensor vss_block_forward(const Tensor& x, const BlockWeights& w, BlockCache& cache);
// Accumulates parameter gradients into `grads`, returns d/dx.
Tensor vss_block_vjp(const BlockCache& cache, const BlockWeights& w, const Tensor& gy,
                     BlockWeights& grads);

// 2x2 patch merging, [H,W,C] -> [H/2,W/2,2C].
Tensor downsample(const Tensor& x, const LinearWeights& w);
Tensor downsample_vjp(const Tensor& x, const LinearWeights& w, const Tensor& gy,
                      LinearWeights& grads);

struct EncoderCache {
  Tensor image;
  std::vector<Tensor> stage_inputs;  // grid entering each downsample (stage >= 1)
  std::vector<std::vector<BlockCache>> blocks;
};
std::vector<Tensor> encoder_forward(const Tensor& image, const SegNetWeights& w,
                                    const ModelConfig& cfg);
std::vector<Tensor> encoder_forward(const Tensor& image, const SegNetWeights& w,
                                    const ModelConfig& cfg, EncoderCache& cache);
// dfeatures: one cotangent per encoder level. Returns d/dimage.
Tensor encoder_vjp(const EncoderCache& cache, const SegNetWeights& w, const ModelConfig& cfg,
                   const std::vector<Tensor>& dfeatures, SegNetWeights& grads);

struct DecoderCache {
  std::vector<Tensor> feats;  // [C,h,w] per level
  std::vector<Tensor> ppm_pooled, ppm_pre;
  Tensor psp_in, psp_pre;
  std::vector<Tensor> lat_pre;  // lateral conv outputs before relu
  std::vector<Tensor> lat;      // after top-down fusion
  std::vector<Tensor> fpn_pre;
  std::vector<Tensor> outs;
  Tensor fused_in, fused_pre, fused;
  std::size_t out_h = 0, out_w = 0;
};
// features: [H_i,W_i,C_i] grids, shallowest first. Returns [K,out_h,out_w].
Tensor uper_decode(const std::vector<Tensor>& features, const DecoderWeights& w,
                   std::size_t num_classes, std::size_t out_h, std::size_t out_w);
Tensor uper_decode_forward(const std::vector<Tensor>& features, const DecoderWeights& w,
                           std::size_t out_h, std::size_t out_w, DecoderCache& cache);
// Returns one [H_i,W_i,C_i] cotangent per feature level.
std::vector<Tensor> uper_decode_vjp(const DecoderCache& cache, const DecoderWeights& w,
                                    const Tensor& gy, DecoderWeights& grads);

struct ModelCache {
  EncoderCache encoder;
  DecoderCache decoder;
};
Tensor model_forward(const SegNet& net, const Tensor& image);
Tensor model_forward(const SegNet& net, const Tensor& image, ModelCache& cache);
Tensor model_backward(const SegNet& net, const ModelCache& cache, const Tensor& dlogits,
                      SegNetWeights& grads);

// ---- template definitions ----

template <typename Self, typename F>
void BlockWeights::visit(Self& s, const std::string& p, F&& f) {
  f(p + "ln1.gamma", s.ln1_gamma);
  f(p + "ln1.beta", s.ln1_beta);
  f(p + "gate.w", s.gate_w);
  f(p + "gate.b", s.gate_b);
  f(p + "main.w", s.main_w);
  f(p + "main.b", s.main_b);
  f(p + "dw.kernel", s.dw_kernel);
  for (std::size_t d = 0; d < s.ssm.size(); ++d) {
    const std::string sp =
        p + "ssm." +
        (s.ssm.size() == 1 ? std::string("tied") : std::string(direction_name(kScanDirections[d]))) +
        ".";
    for (auto& [name, t] : s.ssm[d].named()) f(sp + name, *t);
  }
  f(p + "ln2.gamma", s.ln2_gamma);
  f(p + "ln2.beta", s.ln2_beta);
  f(p + "out.w", s.out_w);
  f(p + "out.b", s.out_b);
}

template <typename Self, typename F>
void DecoderWeights::visit(Self& s, const std::string& p, F&& f) {
  for (std::size_t i = 0; i < s.ppm.size(); ++i) {
    f(p + "ppm" + std::to_string(i) + ".w", s.ppm[i].w);
    f(p + "ppm" + std::to_string(i) + ".b", s.ppm[i].b);
  }
  f(p + "bottleneck.w", s.bottleneck.w);
  f(p + "bottleneck.b", s.bottleneck.b);
  for (std::size_t i = 0; i < s.lateral.size(); ++i) {
    f(p + "lateral" + std::to_string(i) + ".w", s.lateral[i].w);
    f(p + "lateral" + std::to_string(i) + ".b", s.lateral[i].b);
    f(p + "fpn" + std::to_string(i) + ".w", s.fpn[i].w);
    f(p + "fpn" + std::to_string(i) + ".b", s.fpn[i].b);
  }
  f(p + "fpn_bottleneck.w", s.fpn_bottleneck.w);
  f(p + "fpn_bottleneck.b", s.fpn_bottleneck.b);
  f(p + "classifier.w", s.classifier.w);
  f(p + "classifier.b", s.classifier.b);
}

}  // namespace mscrack
