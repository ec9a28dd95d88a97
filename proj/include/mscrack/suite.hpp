#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mscrack/data.hpp"
#include "mscrack/gradcheck.hpp"
#include "mscrack/model.hpp"
#include "mscrack/train.hpp"

namespace mscrack {

// ---- finite-difference suite over every differentiable op ----

using ReportFn = std::function<void(const GradCheckReport&)>;
std::vector<GradCheckReport> gradient_suite(double tol = 1e-4, const ReportFn& on_report = {});

// ---- scan benchmark ----

struct BenchRow {
  std::size_t length = 0;
  double seq_seconds = 0;  // median
  double par_seconds = 0;  // median
  double seq_ratio = 0;    // vs the previous row; 0 on the first row
  double par_ratio = 0;
};

struct BenchReport {
  std::size_t channels = 0, state_dim = 0, repeats = 0;
  std::vector<BenchRow> rows;
  double median_seq_ratio = 0;
  double median_par_ratio = 0;

  std::string table() const;  // markdown
};

BenchReport bench_scan(unsigned min_log2 = 12, unsigned max_log2 = 18, std::size_t repeats = 11,
                       std::size_t channels = 4, std::size_t state_dim = 4);

// ---- variant experiments on in-memory synthetic data ----

// Batch 4, base lr 1e-3, warmup 10%, five evaluations over the run.
TrainConfig toy_train_config(std::size_t iters, std::uint64_t seed);

// Training patch for a variant: IR-resolution inputs use the patch shrunk by the
// IR factor, rounded down to the model input multiple (at least one multiple).
std::size_t variant_patch(Variant v, std::size_t patch, Rational ir_factor, std::size_t multiple);

struct VariantRun {
  Variant variant = Variant::P_RGB;
  std::size_t patch = 0;
  double miou = 0, iou_bg = 0, iou_crack = 0;  // final validation metrics
  double best_miou = 0;
  double baseline_miou = 0;  // all-background prediction on the same split
  double seconds = 0;
  std::vector<TrainRecord> losses;
};

std::vector<Example> build_examples(const std::vector<SamplePair>& samples, const std::vector<std::string>& ids,
                                    Variant v, const SrModel* sr);
double all_background_miou(const std::vector<Example>& examples);

VariantRun run_variant(const std::vector<SamplePair>& samples, const DatasetManifest& split, Variant v,
                       const SrModel* sr, const ModelConfig& model, TrainConfig train_cfg,
                       const TrainOptions& opts = {});

}  // namespace mscrack
