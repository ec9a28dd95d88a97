#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "mscrack/tensor.hpp"

namespace mscrack {

// counts[gt * n + pred], exact 64-bit pixel counts.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 2);

  std::size_t num_classes() const { return n_; }
  std::uint64_t count(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t tp(std::size_t c) const;
  std::uint64_t fp(std::size_t c) const;
  std::uint64_t fn(std::size_t c) const;
  std::uint64_t tn(std::size_t c) const;

  // pred and gt hold integer labels of equal shape.
  void accumulate(const Tensor& pred, const Tensor& gt);
  void merge(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

  std::size_t images = 0;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

// IoU of class c, or a negative value when TP+FP+FN = 0.
double class_iou(const ConfusionMatrix& cm, std::size_t c);
// Mean over classes with TP+FP+FN > 0.
double miou(const ConfusionMatrix& cm);

// logits [K,H,W] -> labels [H,W]; ties go to the lower class.
Tensor argmax_labels(const Tensor& logits);

inline constexpr double kPsnrLogCap = 120.0;
// +inf when the tensors are identical.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

nlohmann::json metrics_report(const ConfusionMatrix& cm);

}  // namespace mscrack
