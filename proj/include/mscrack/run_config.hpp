#pragma once

#include <filesystem>
#include <optional>

#include "json.hpp"
#include "mscrack/data.hpp"
#include "mscrack/model.hpp"
#include "mscrack/train.hpp"

namespace mscrack {

// {"model": {...}, "train": {...}, "data": dir, "variant": tag, "sr_checkpoint": dir}
// Missing model/train keys take their defaults; model.in_channels follows the variant.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path data;
  Variant variant = Variant::PRGB_plus_PIRprime;
  std::optional<std::filesystem::path> sr_checkpoint;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace mscrack
