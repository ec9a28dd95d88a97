#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mscrack/model.hpp"
#include "mscrack/random.hpp"
#include "mscrack/tensor.hpp"

namespace mscrack {

// Positive rational scale factor num/den, e.g. 10/3.
struct Rational {
  std::uint64_t num = 1;
  std::uint64_t den = 1;

  double value() const { return double(num) / double(den); }
  // round(n / factor) with exact integer arithmetic, halves rounded up.
  std::size_t shrink(std::size_t n) const { return std::size_t((2 * n * den + num) / (2 * num)); }
  std::string str() const;
  static Rational parse(const std::string& s);
  bool operator==(const Rational&) const = default;
};

// Bicubic downsampling by `factor` (>= 1; 1 is the identity).
Tensor degrade(const Tensor& img, Rational factor);

// Three 3x3 conv layers 3 -> width -> width -> 3 predicting a residual on the
// bicubic upsample.
struct SrModel {
  ConvWeights conv1, conv2, conv3;
  Rational factor;
  double initial_loss = 0;
  double final_loss = 0;

  static SrModel init(Rational factor, Rng& rng, std::size_t width = 32);
  ParamList params();
  ConstParamList params() const;
  SrModel zeros_like() const;
};

struct SrCache {
  std::size_t low_h = 0, low_w = 0;
  Tensor up, a1_pre, a1, a2_pre, a2, out_pre;
};

// clamp(bicubic_up(low) + residual(bicubic_up(low)), 0, 1)
Tensor sr_forward(const SrModel& m, const Tensor& low, std::size_t out_h, std::size_t out_w);
Tensor sr_forward(const SrModel& m, const Tensor& low, std::size_t out_h, std::size_t out_w,
                  SrCache& cache);
// Parameter gradients accumulate into `grads`; returns d/dlow.
Tensor sr_backward(const SrModel& m, const SrCache& cache, const Tensor& gy, SrModel& grads);

struct SrTrainConfig {
  std::size_t iterations = 400;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  std::size_t crop = 30;  // ground-truth crop; must be a multiple of the factor numerator
  std::uint64_t seed = 0;
  std::size_t probe_crops = 32;
};

struct SrTrainLog {
  std::vector<double> losses;
};

SrModel sr_train_selfsupervised(const std::vector<Tensor>& irs, Rational factor,
                                const SrTrainConfig& cfg, SrTrainLog* log = nullptr);

Tensor sr_apply(const SrModel& m, const Tensor& ir, std::size_t rgb_h, std::size_t rgb_w);

// Reduced-scale fidelity: ground truth `img` against its own degrade-then-restore.
struct SrPsnr {
  double model = 0;
  double bicubic = 0;
};
SrPsnr sr_selfsupervised_psnr(const SrModel& m, const Tensor& img);

// [R,G,B,IR1,IR2,IR3]
Tensor fuse_channels(const Tensor& rgb, const Tensor& ir_sr);

void save_sr_model(const SrModel& m, const std::filesystem::path& dir);
SrModel load_sr_model(const std::filesystem::path& dir);

}  // namespace mscrack
