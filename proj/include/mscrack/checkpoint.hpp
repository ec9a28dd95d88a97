#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "mscrack/tensor.hpp"

// Checkpoint archive: a directory holding manifest.json and tensors/<name>.mscm.
// The manifest gains a "tensors" array listing every stored name in order.

namespace mscrack {

struct Archive {
  nlohmann::json manifest;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
};

// Writes to a sibling temporary directory and renames it into place, so an
// existing archive at `dir` is only replaced by a complete one.
void save_archive(const std::filesystem::path& dir, nlohmann::json manifest,
                  const ConstParamList& tensors);
Archive load_archive(const std::filesystem::path& dir);

// Copies archive tensors into `params` by name; shapes must match.
void assign_params(const Archive& a, const ParamList& params, const std::string& prefix = "");

}  // namespace mscrack
