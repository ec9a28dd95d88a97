#include "mscrack/run_config.hpp"

#include <fstream>
#include <set>

#include "mscrack/error.hpp"

namespace mscrack {

using nlohmann::json;

json RunConfig::to_json() const {
  json j{{"model", model_config_to_json(model)},
         {"train", train.to_json()},
         {"data", data.string()},
         {"variant", variant_tag(variant)}};
  if (sr_checkpoint) j["sr_checkpoint"] = sr_checkpoint->string();
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
  static const std::set<std::string> allowed{"model", "train", "data", "variant", "sr_checkpoint"};
  std::string bad;
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) bad += (bad.empty() ? "" : ", ") + it.key();
  if (!bad.empty()) throw ConfigError("run config: unknown keys: " + bad);
  auto str = [&](const char* key) {
    if (!j.at(key).is_string()) throw ConfigError(std::string("run config: '") + key + "' must be a string");
    return j.at(key).get<std::string>();
  };
  RunConfig c;
  if (!j.contains("data")) throw ConfigError("run config: missing 'data' (dataset directory)");
  c.data = str("data");
  if (j.contains("variant")) c.variant = parse_variant(str("variant"));
  if (j.contains("sr_checkpoint")) c.sr_checkpoint = str("sr_checkpoint");
  json model = j.value("model", json::object());
  const std::size_t channels = variant_channels(c.variant);
  if (model.is_object() && model.contains("in_channels") && model["in_channels"] != channels) {
    throw ConfigError("run config: model.in_channels " + model["in_channels"].dump() + " does not match variant " +
                      variant_label(c.variant) + " (" + std::to_string(channels) + " channels)");
  }
  if (model.is_object()) model["in_channels"] = channels;
  c.model = model_config_from_json(model);
  c.train = TrainConfig::from_json(j.value("train", json::object()));
  if (variant_needs_sr(c.variant) && !c.sr_checkpoint) {
    throw ConfigError("run config: variant " + variant_label(c.variant) + " needs 'sr_checkpoint'");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("run config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("run config: " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace mscrack
