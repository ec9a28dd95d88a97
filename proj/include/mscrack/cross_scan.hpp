#pragma once

#include <array>
#include <cstddef>
#include <string_view>
#include <vector>

#include "mscrack/ssm.hpp"
#include "mscrack/tensor.hpp"

namespace mscrack {

enum class ScanDirection { LR = 0, TB = 1, RL = 2, BT = 3 };
inline constexpr std::array<ScanDirection, 4> kScanDirections{
    ScanDirection::LR, ScanDirection::TB, ScanDirection::RL, ScanDirection::BT};
std::string_view direction_name(ScanDirection d);

// Sequence position k reads row-major grid token permutation[k].
struct ScanOrder {
  ScanDirection direction;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::size_t> permutation;
  std::vector<std::size_t> inverse;
};

ScanOrder scan_order(ScanDirection direction, std::size_t height, std::size_t width);

// x [H,W,C] -> four [H*W, C] sequences in LR, TB, RL, BT order.
std::array<Tensor, 4> cross_scan(const Tensor& x);
// Un-permutes each sequence to its grid position and sums: [H,W,C].
Tensor cross_merge(const std::array<Tensor, 4>& seqs, std::size_t height, std::size_t width);

using DirectionParams = std::array<SsmParams, 4>;

Tensor ss2d(const Tensor& x, const DirectionParams& params);

struct Ss2dCache {
  std::size_t height = 0, width = 0;
  std::array<ScanCache, 4> scans;
};
Tensor ss2d_forward(const Tensor& x, const DirectionParams& params, Ss2dCache& cache);

struct Ss2dGrads {
  Tensor dx;
  DirectionParams dparams;
};
Ss2dGrads ss2d_vjp(const Ss2dCache& cache, const DirectionParams& params, const Tensor& gy);

}  // namespace mscrack
