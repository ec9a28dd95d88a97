#include "mscrack/metrics.hpp"

#include <cmath>
#include <limits>

#include "mscrack/error.hpp"

namespace mscrack {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : n_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw Error("ConfusionMatrix: need at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto v : counts_) s += v;
  return s;
}

std::uint64_t ConfusionMatrix::tp(std::size_t c) const { return count(c, c); }

std::uint64_t ConfusionMatrix::fp(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t g = 0; g < n_; ++g)
    if (g != c) s += count(g, c);
  return s;
}

std::uint64_t ConfusionMatrix::fn(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < n_; ++p)
    if (p != c) s += count(c, p);
  return s;
}

std::uint64_t ConfusionMatrix::tn(std::size_t c) const { return total() - tp(c) - fp(c) - fn(c); }

namespace {

std::size_t label_of(double v, std::size_t n, const char* what, std::size_t i) {
  const double r = std::round(v);
  if (!(r >= 0.0) || r >= double(n) || r != v) {
    throw Error(std::string("accumulate: ") + what + " label " + std::to_string(v) + " at index " +
                std::to_string(i) + " is outside 0.." + std::to_string(n - 1));
  }
  return static_cast<std::size_t>(r);
}

}  // namespace

void ConfusionMatrix::accumulate(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("accumulate: prediction " + shape_str(pred.shape()) + " vs ground truth " +
                     shape_str(gt.shape()));
  }
  std::vector<std::uint64_t> add(counts_.size(), 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    add[label_of(gt[i], n_, "ground-truth", i) * n_ + label_of(pred[i], n_, "predicted", i)]++;
  }
  for (std::size_t i = 0; i < add.size(); ++i) counts_[i] += add[i];
  ++images;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw Error("merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  images += other.images;
}

double class_iou(const ConfusionMatrix& cm, std::size_t c) {
  const std::uint64_t denom = cm.tp(c) + cm.fp(c) + cm.fn(c);
  if (denom == 0) return -1.0;
  return double(cm.tp(c)) / double(denom);
}

double miou(const ConfusionMatrix& cm) {
  double s = 0;
  std::size_t k = 0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const double iou = class_iou(cm, c);
    if (iou < 0) continue;
    s += iou;
    ++k;
  }
  if (k == 0) throw Error("miou: every class is empty");
  return s / double(k);
}

Tensor argmax_labels(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_labels: expected [K,H,W], got " + shape_str(logits.shape()));
  const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  Tensor out({logits.dim(1), logits.dim(2)});
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits[c * hw + p] > logits[best * hw + p]) best = c;
    out[p] = double(best);
  }
  return out;
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  if (a.shape() != b.shape()) {
    throw ShapeError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / (se / double(a.size())));
}

nlohmann::json metrics_report(const ConfusionMatrix& cm) {
  nlohmann::json j;
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const double iou = class_iou(cm, c);
    per_class.push_back({{"class", c},
                         {"iou", iou < 0 ? nlohmann::json(nullptr) : nlohmann::json(iou)},
                         {"tp", cm.tp(c)},
                         {"fp", cm.fp(c)},
                         {"fn", cm.fn(c)},
                         {"tn", cm.tn(c)}});
  }
  j["classes"] = per_class;
  j["miou"] = miou(cm);
  j["pixels"] = cm.total();
  j["images"] = cm.images;
  return j;
}

}  // namespace mscrack
