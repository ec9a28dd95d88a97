#include "mscrack/checkpoint.hpp"

#include <fstream>

#include "mscrack/error.hpp"

namespace fs = std::filesystem;

namespace mscrack {

const Tensor& Archive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("checkpoint: missing tensor '" + name + "'");
  return it->second;
}

void save_archive(const fs::path& dir, nlohmann::json manifest, const ConstParamList& tensors) {
  fs::path target = dir;
  if (target.filename().empty()) target = target.parent_path();
  const fs::path tmp = target.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "tensors");
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find('/') != std::string::npos) {
      throw Error("checkpoint: invalid tensor name '" + name + "'");
    }
    save_mscm(tmp / "tensors" / (name + ".mscm"), *t);
    names.push_back(name);
  }
  manifest["tensors"] = names;
  {
    std::ofstream out(tmp / "manifest.json", std::ios::binary);
    if (!out) throw Error("checkpoint: cannot write " + (tmp / "manifest.json").string());
    out << manifest.dump(2) << '\n';
  }
  fs::remove_all(target);
  fs::rename(tmp, target);
}

Archive load_archive(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + mpath.string());
  Archive a;
  try {
    a.manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint: " + mpath.string() + ": " + e.what());
  }
  if (!a.manifest.contains("tensors") || !a.manifest["tensors"].is_array()) {
    throw ParseError("checkpoint: " + mpath.string() + " has no tensors list");
  }
  for (const auto& n : a.manifest["tensors"]) {
    const std::string name = n.get<std::string>();
    a.tensors.emplace(name, load_mscm(dir / "tensors" / (name + ".mscm")));
  }
  return a;
}

void assign_params(const Archive& a, const ParamList& params, const std::string& prefix) {
  for (const auto& [name, t] : params) {
    const Tensor& src = a.at(prefix + name);
    if (src.shape() != t->shape()) {
      throw ShapeError("checkpoint: tensor '" + prefix + name + "' has shape " + shape_str(src.shape()) +
                       ", model expects " + shape_str(t->shape()));
    }
    *t = src;
  }
}

}  // namespace mscrack
