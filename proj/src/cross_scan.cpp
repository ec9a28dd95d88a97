#include "mscrack/cross_scan.hpp"

#include <algorithm>

namespace mscrack {

std::string_view direction_name(ScanDirection d) {
  switch (d) {
    case ScanDirection::LR: return "LR";
    case ScanDirection::TB: return "TB";
    case ScanDirection::RL: return "RL";
    case ScanDirection::BT: return "BT";
  }
  return "?";
}

ScanOrder scan_order(ScanDirection direction, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) {
    throw ShapeError("scan_order: grid extents must be >= 1, got " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  const std::size_t n = height * width;
  ScanOrder o{direction, height, width, std::vector<std::size_t>(n), std::vector<std::size_t>(n)};
  auto column_major = [&](std::size_t k) { return (k % height) * width + k / height; };
  for (std::size_t k = 0; k < n; ++k) {
    switch (direction) {
      case ScanDirection::LR: o.permutation[k] = k; break;
      case ScanDirection::TB: o.permutation[k] = column_major(k); break;
      case ScanDirection::RL: o.permutation[k] = n - 1 - k; break;
      case ScanDirection::BT: o.permutation[k] = column_major(n - 1 - k); break;
    }
  }
  for (std::size_t k = 0; k < n; ++k) o.inverse[o.permutation[k]] = k;
  return o;
}

namespace {

void check_grid(const Tensor& x, const char* what) {
  if (x.rank() != 3) {
    throw ShapeError(std::string(what) + ": expected [H,W,C], got " + shape_str(x.shape()));
  }
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& perm, std::size_t c) {
  Tensor s({perm.size(), c});
  for (std::size_t k = 0; k < perm.size(); ++k) {
    std::copy_n(x.ptr() + perm[k] * c, c, s.ptr() + k * c);
  }
  return s;
}

void scatter_add_rows(Tensor& grid, const Tensor& seq, const std::vector<std::size_t>& perm,
                      std::size_t c) {
  for (std::size_t k = 0; k < perm.size(); ++k) {
    double* dst = grid.ptr() + perm[k] * c;
    const double* src = seq.ptr() + k * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
  }
}

}  // namespace

std::array<Tensor, 4> cross_scan(const Tensor& x) {
  check_grid(x, "cross_scan");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::array<Tensor, 4> out;
  for (auto d : kScanDirections) {
    out[static_cast<std::size_t>(d)] = gather_rows(x, scan_order(d, h, w).permutation, c);
  }
  return out;
}

Tensor cross_merge(const std::array<Tensor, 4>& seqs, std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  const std::size_t c = seqs[0].rank() == 2 ? seqs[0].dim(1) : 0;
  for (const auto& s : seqs) {
    if (s.rank() != 2 || s.dim(0) != n || s.dim(1) != c) {
      throw ShapeError("cross_merge: sequence shape " + shape_str(s.shape()) + " does not match " +
                       std::to_string(height) + "x" + std::to_string(width) + " grid with " +
                       std::to_string(c) + " channels");
    }
  }
  Tensor grid({height, width, c});
  for (auto d : kScanDirections) {
    scatter_add_rows(grid, seqs[static_cast<std::size_t>(d)],
                     scan_order(d, height, width).permutation, c);
  }
  return grid;
}

Tensor ss2d(const Tensor& x, const DirectionParams& params) {
  check_grid(x, "ss2d");
  auto seqs = cross_scan(x);
  for (std::size_t d = 0; d < 4; ++d) seqs[d] = selective_scan_seq(seqs[d], params[d]);
  return cross_merge(seqs, x.dim(0), x.dim(1));
}

Tensor ss2d_forward(const Tensor& x, const DirectionParams& params, Ss2dCache& cache) {
  check_grid(x, "ss2d");
  cache.height = x.dim(0);
  cache.width = x.dim(1);
  auto seqs = cross_scan(x);
  for (std::size_t d = 0; d < 4; ++d) {
    seqs[d] = selective_scan_forward(seqs[d], params[d], cache.scans[d]);
  }
  return cross_merge(seqs, cache.height, cache.width);
}

Ss2dGrads ss2d_vjp(const Ss2dCache& cache, const DirectionParams& params, const Tensor& gy) {
  check_grid(gy, "ss2d_vjp");
  const std::size_t c = gy.dim(2);
  Ss2dGrads g{Tensor(gy.shape()), {}};
  for (auto d : kScanDirections) {
    const auto di = static_cast<std::size_t>(d);
    const auto order = scan_order(d, cache.height, cache.width);
    const Tensor gseq = gather_rows(gy, order.permutation, c);
    ScanGrads sg = selective_scan_vjp(cache.scans[di], params[di], gseq);
    scatter_add_rows(g.dx, sg.dx, order.permutation, c);
    g.dparams[di] = std::move(sg.dp);
  }
  return g;
}

}  // namespace mscrack
