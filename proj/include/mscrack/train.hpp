#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mscrack/data.hpp"
#include "mscrack/metrics.hpp"
#include "mscrack/model.hpp"
#include "mscrack/optim.hpp"

namespace mscrack {

struct LossAndGrad {
  double loss = 0;
  Tensor grad;
};

// logits [B,K,H,W] (or [K,H,W]), target [B,H,W] (or [H,W]) with integer labels.
// Mean over all pixels of -log softmax(logits)[target].
LossAndGrad cross_entropy(const Tensor& logits, const Tensor& target);

struct TrainConfig {
  std::size_t total_iters = 20000;
  std::size_t batch_size = 16;
  double base_lr = 3e-5;
  double weight_decay = 0.01;
  std::size_t warmup_iters = 1500;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 100;
  std::size_t patch = 48;
  double grad_clip = 0;  // 0 disables clipping
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path log_path;        // empty: no log file

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);  // rejects unknown keys
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);  // rejects unknown keys

double poly_lr(std::size_t iter, const TrainConfig& cfg);

// Pads to the model's input multiple by edge replication, runs the model, crops the logits.
Tensor predict_logits(const SegNet& net, const Tensor& input);
ConfusionMatrix evaluate(const SegNet& net, const std::vector<Example>& examples);

struct TrainRecord {
  std::size_t iter = 0;
  double loss = 0;
  double lr = 0;
};
struct EvalRecord {
  std::size_t iter = 0;
  double miou = 0;
  double iou_bg = 0;
  double iou_crack = 0;
};

struct TrainState {
  SegNet net;
  AdamState opt;
  std::size_t iter = 0;  // iterations completed
  double best_miou = -1;
  std::vector<TrainRecord> losses;
  std::vector<EvalRecord> evals;
};

struct TrainOptions {
  std::optional<std::size_t> stop_at;  // stop (with a checkpoint) after this many iterations
  std::function<void(const std::string&)> on_log;  // receives each JSON line
};

TrainState init_train_state(const ModelConfig& model_cfg, std::uint64_t seed);

// Runs (or continues) training until cfg.total_iters or opts.stop_at.
void train(TrainState& st, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
           const TrainConfig& cfg, const TrainOptions& opts = {});

void save_checkpoint(const std::filesystem::path& dir, const TrainState& st, const TrainConfig& cfg);
// Restores weights, optimizer moments, counters and history.
TrainState load_checkpoint(const std::filesystem::path& dir, TrainConfig* cfg_out = nullptr);

}  // namespace mscrack
