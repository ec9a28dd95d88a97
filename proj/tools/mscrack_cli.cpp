#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mscrack/checkpoint.hpp"
#include "mscrack/data.hpp"
#include "mscrack/error.hpp"
#include "mscrack/metrics.hpp"
#include "mscrack/resolution.hpp"
#include "mscrack/run_config.hpp"
#include "mscrack/suite.hpp"
#include "mscrack/train.hpp"

using namespace mscrack;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::pair<std::size_t, std::size_t> parse_dims(const std::string& s) {
  const auto x = s.find('x');
  std::size_t w = 0, h = 0;
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    w = std::stoul(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    h = std::stoul(s.substr(x + 1), &used);
    if (used != s.size() - x - 1) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw ConfigError("invalid dimensions '" + s + "', expected WIDTHxHEIGHT such as 120x120");
  }
  if (w == 0 || h == 0) throw ConfigError("dimensions must be positive, got '" + s + "'");
  return {w, h};
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

void prepare_out_dir(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw ConfigError("output directory " + out.string() + " is not empty (use --force to replace it)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

std::vector<SamplePair> load_samples(const fs::path& root, const std::vector<std::string>& ids) {
  std::vector<SamplePair> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_sample(root, id));
  return out;
}

std::optional<SrModel> sr_for(Variant v, const std::optional<fs::path>& ckpt) {
  if (!variant_needs_sr(v)) return std::nullopt;
  if (!ckpt) throw ConfigError("variant " + variant_label(v) + " needs an SR checkpoint");
  return load_sr_model(*ckpt);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- synth ----

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::string dims = "120x120";
  std::string factor = "10/3";
  std::string out;
  bool force = false;
  double train_fraction = 0.8;
  double ir_only = 0.35;
};

int cmd_synth(const SynthArgs& a) {
  if (a.count == 0) throw ConfigError("--count must be at least 1");
  const auto [w, h] = parse_dims(a.dims);
  const Rational f = Rational::parse(a.factor);
  if (a.ir_only < 0 || a.ir_only > 1) throw ConfigError("--ir-only-fraction must lie in [0,1]");
  prepare_out_dir(a.out, a.force);
  SynthOptions opts;
  opts.ir_only_fraction = a.ir_only;
  const auto samples = synth_dataset(a.seed, a.count, h, w, f, opts);
  DatasetManifest m;
  m.seed = a.seed;
  m.ir_factor = f;
  m.rgb_h = h;
  m.rgb_w = w;
  for (const auto& s : samples) m.ids.push_back(s.id);
  assign_split(m, a.train_fraction);
  write_dataset(a.out, samples, m);
  std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n"
            << "  rgb " << w << "x" << h << ", ir " << samples[0].ir.dim(2) << "x" << samples[0].ir.dim(1)
            << " (factor " << f.str() << ")\n"
            << "  split " << m.train_ids.size() << " train / " << m.val_ids.size() << " val, seed " << a.seed << "\n";
  return 0;
}

// ---- stage 1 ----

struct SrTrainArgs {
  std::string data, out;
  SrTrainConfig cfg;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

json psnr_rows(const SrModel& m, const std::vector<SamplePair>& s, const std::string& split) {
  double pm = 0, pb = 0;
  for (const auto& p : s) {
    const SrPsnr r = sr_selfsupervised_psnr(m, p.ir);
    pm += std::min(r.model, kPsnrLogCap);
    pb += std::min(r.bicubic, kPsnrLogCap);
  }
  const double n = double(std::max<std::size_t>(1, s.size()));
  return {{"split", split}, {"images", s.size()}, {"model_psnr", pm / n}, {"bicubic_psnr", pb / n}};
}

int cmd_sr_train(SrTrainArgs a) {
  const DatasetManifest man = load_manifest(a.data);
  prepare_out_dir(a.out, a.force);
  a.cfg.seed = a.seed.value_or(man.seed);
  const auto train = load_samples(a.data, man.train_ids);
  const auto val = load_samples(a.data, man.val_ids);
  std::vector<Tensor> irs;
  for (const auto& s : train) irs.push_back(s.ir);
  SrTrainLog log;
  const SrModel m = sr_train_selfsupervised(irs, man.ir_factor, a.cfg, &log);
  save_sr_model(m, a.out);
  json report{{"factor", man.ir_factor.str()},
              {"iterations", a.cfg.iterations},
              {"initial_loss", m.initial_loss},
              {"final_loss", m.final_loss},
              {"psnr", json::array({psnr_rows(m, train, "train"), psnr_rows(m, val, "val")})}};
  write_text(fs::path(a.out) / "report.json", report.dump(2) + "\n");
  std::cout << "sr model written to " << a.out << " (loss " << m.initial_loss << " -> " << m.final_loss << ")\n"
            << "| split | images | model PSNR (dB) | bicubic PSNR (dB) |\n|---|---|---|---|\n";
  for (const auto& r : report["psnr"]) {
    std::cout << "| " << r["split"].get<std::string>() << " | " << r["images"] << " | "
              << fmt("%.3f", r["model_psnr"]) << " | " << fmt("%.3f", r["bicubic_psnr"]) << " |\n";
  }
  return 0;
}

int cmd_sr_apply(const std::string& data, const std::string& sr, const std::string& out, bool force) {
  const DatasetManifest man = load_manifest(data);
  const SrModel m = load_sr_model(sr);
  prepare_out_dir(out, force);
  for (const auto& id : man.ids) {
    const SamplePair s = load_sample(data, id);
    const Tensor up = sr_apply(m, s.ir, s.rgb.dim(1), s.rgb.dim(2));
    save_image(fs::path(out) / (id + ".ppm"), up);
  }
  std::cout << "wrote " << man.ids.size() << " super-resolved IR images to " << out << "\n";
  return 0;
}

int cmd_fuse(const std::string& data, const std::string& sr_images, const std::string& out, bool force) {
  const DatasetManifest man = load_manifest(data);
  prepare_out_dir(out, force);
  for (const auto& id : man.ids) {
    const Tensor rgb = load_image(fs::path(data) / "rgb" / (id + ".ppm"));
    const Tensor ir = load_image(fs::path(sr_images) / (id + ".ppm"));
    save_mscm(fs::path(out) / (id + ".mscm"), fuse_channels(rgb, ir));
  }
  std::cout << "wrote " << man.ids.size() << " six-channel tensors to " << out << "\n";
  return 0;
}

// ---- stage 2 ----

struct Prepared {
  DatasetManifest man;
  std::vector<Example> train, val;
  std::size_t patch = 0;
};

Prepared prepare(const RunConfig& rc) {
  Prepared p;
  p.man = load_manifest(rc.data);
  const auto sr = sr_for(rc.variant, rc.sr_checkpoint);
  const SrModel* srp = sr ? &*sr : nullptr;
  const auto samples = load_samples(rc.data, p.man.ids);
  p.train = build_examples(samples, p.man.train_ids, rc.variant, srp);
  p.val = build_examples(samples, p.man.val_ids, rc.variant, srp);
  p.patch = variant_patch(rc.variant, rc.train.patch, p.man.ir_factor, rc.model.input_multiple());
  return p;
}

int cmd_train(const std::string& config, const std::string& out, bool resume, std::optional<std::size_t> stop_at,
              bool quiet) {
  const RunConfig rc = RunConfig::load(config);
  const Prepared p = prepare(rc);
  TrainConfig tc = rc.train;
  tc.patch = p.patch;
  if (tc.checkpoint_dir.empty()) tc.checkpoint_dir = fs::path(out) / "checkpoints";
  if (tc.log_path.empty()) tc.log_path = fs::path(out) / "metrics.jsonl";
  fs::create_directories(out);
  TrainState st;
  if (resume) {
    st = load_checkpoint(tc.checkpoint_dir / "last");
    std::cout << "resuming at iteration " << st.iter << "\n";
  } else {
    st = init_train_state(rc.model, tc.seed);
  }
  write_text(fs::path(out) / "run_config.json", rc.to_json().dump(2) + "\n");
  TrainOptions opts;
  opts.stop_at = stop_at;
  if (!quiet) {
    opts.on_log = [&](const std::string& line) {
      if (line.find("miou") != std::string::npos) std::cout << line << "\n" << std::flush;
    };
  }
  std::cout << "training " << variant_label(rc.variant) << " on " << p.train.size() << " images, patch " << tc.patch
            << ", " << tc.total_iters << " iterations\n";
  train(st, p.train, p.val, tc, opts);
  const ConfusionMatrix cm = evaluate(st.net, p.val);
  json report = metrics_report(cm);
  report["iter"] = st.iter;
  report["variant"] = variant_label(rc.variant);
  write_text(fs::path(out) / "eval.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_eval(const std::string& config, const std::optional<std::string>& checkpoint, const std::string& split) {
  const RunConfig rc = RunConfig::load(config);
  const Prepared p = prepare(rc);
  TrainState st = checkpoint ? load_checkpoint(*checkpoint) : init_train_state(rc.model, rc.train.seed);
  if (st.net.cfg.in_channels != variant_channels(rc.variant)) {
    throw ConfigError("checkpoint expects " + std::to_string(st.net.cfg.in_channels) + " input channels but variant " +
                      variant_label(rc.variant) + " has " + std::to_string(variant_channels(rc.variant)));
  }
  std::vector<Example> set;
  if (split == "val" || split == "all") set.insert(set.end(), p.val.begin(), p.val.end());
  if (split == "train" || split == "all") set.insert(set.end(), p.train.begin(), p.train.end());
  const ConfusionMatrix cm = evaluate(st.net, set);
  json report = metrics_report(cm);
  report["split"] = split;
  report["iter"] = st.iter;
  report["variant"] = variant_label(rc.variant);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const std::string& config, const std::string& out, bool force) {
  RunConfig rc = RunConfig::load(config);
  const DatasetManifest man = load_manifest(rc.data);
  prepare_out_dir(out, force);
  const auto samples = load_samples(rc.data, man.ids);
  SrModel sr;
  if (rc.sr_checkpoint) {
    sr = load_sr_model(*rc.sr_checkpoint);
  } else {
    std::vector<Tensor> irs;
    for (const auto& id : man.train_ids) irs.push_back(load_sample(rc.data, id).ir);
    SrTrainConfig sc;
    sc.seed = rc.train.seed;
    sr = sr_train_selfsupervised(irs, man.ir_factor, sc);
    save_sr_model(sr, fs::path(out) / "sr");
  }
  json rows = json::array();
  std::string table = "| variant | channels | patch | val mIoU | IoU bg | IoU crack | seconds |\n|---|---|---|---|---|---|---|\n";
  for (Variant v : kVariants) {
    TrainConfig tc = rc.train;
    tc.checkpoint_dir.clear();
    tc.log_path = fs::path(out) / (variant_tag(v) + ".jsonl");
    const VariantRun r = run_variant(samples, man, v, &sr, rc.model, tc);
    rows.push_back({{"variant", variant_label(v)}, {"tag", variant_tag(v)}, {"channels", variant_channels(v)},
                    {"patch", r.patch}, {"miou", r.miou}, {"iou_bg", r.iou_bg}, {"iou_crack", r.iou_crack},
                    {"best_miou", r.best_miou}, {"background_miou", r.baseline_miou}, {"seconds", r.seconds}});
    table += "| " + variant_label(v) + " | " + std::to_string(variant_channels(v)) + " | " + std::to_string(r.patch) +
             " | " + fmt("%.4f", r.miou) + " | " + fmt("%.4f", r.iou_bg) + " | " + fmt("%.4f", r.iou_crack) + " | " +
             fmt("%.1f", r.seconds) + " |\n";
    std::cout << variant_label(v) << ": mIoU " << fmt("%.4f", r.miou) << "\n" << std::flush;
  }
  write_text(fs::path(out) / "ablation.json", json{{"seed", rc.train.seed}, {"rows", rows}}.dump(2) + "\n");
  write_text(fs::path(out) / "ablation.md", table);
  std::cout << table;
  return 0;
}

// ---- diagnostics ----

int cmd_gradcheck(double tol) {
  std::size_t failed = 0, total = 0;
  gradient_suite(tol, [&](const GradCheckReport& r) {
    ++total;
    failed += !r.pass;
    std::cout << format_report(r) << "\n" << std::flush;
  });
  std::cout << (total - failed) << "/" << total << " gradient checks passed\n";
  return failed ? kExitRuntime : 0;
}

int cmd_bench(unsigned lo, unsigned hi, std::size_t repeats, std::size_t channels, std::size_t state,
              const std::string& out) {
  const BenchReport r = bench_scan(lo, hi, repeats, channels, state);
  const std::string table = r.table();
  std::cout << table;
  if (!out.empty()) write_text(out, "# selective scan timings\n\n" + table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage RGB+IR crack segmentation toolkit"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic RGB+IR crack dataset");
  synth->add_option("--seed", sa.seed, "Generator seed");
  synth->add_option("--count", sa.count, "Number of samples")->required();
  synth->add_option("--rgb-dims", sa.dims, "RGB size as WIDTHxHEIGHT")->capture_default_str();
  synth->add_option("--ir-factor", sa.factor, "RGB/IR resolution ratio, N or N/M")->capture_default_str();
  synth->add_option("--out", sa.out, "Output dataset directory")->required();
  synth->add_option("--train-fraction", sa.train_fraction, "Train split fraction")->capture_default_str();
  synth->add_option("--ir-only-fraction", sa.ir_only, "Probability that a crack is invisible in RGB")
      ->capture_default_str();
  synth->add_flag("--force", sa.force, "Replace a non-empty output directory");

  SrTrainArgs st;
  auto* srt = app.add_subcommand("sr-train", "Train the IR super-resolution model on the train split");
  srt->add_option("--data", st.data, "Dataset directory")->required();
  srt->add_option("--out", st.out, "SR checkpoint directory")->required();
  srt->add_option("--iterations", st.cfg.iterations)->capture_default_str();
  srt->add_option("--batch", st.cfg.batch_size)->capture_default_str();
  srt->add_option("--lr", st.cfg.lr)->capture_default_str();
  srt->add_option("--crop", st.cfg.crop, "Ground-truth crop size")->capture_default_str();
  srt->add_option("--seed", st.seed, "Defaults to the dataset seed");
  srt->add_flag("--force", st.force);

  std::string data, sr, out, sr_images, config, split = "val";
  bool force = false, resume = false, quiet = false;
  std::optional<std::size_t> stop_at;
  std::optional<std::string> checkpoint;
  auto* sra = app.add_subcommand("sr-apply", "Super-resolve every IR image to RGB resolution");
  sra->add_option("--data", data)->required();
  sra->add_option("--sr", sr, "SR checkpoint directory")->required();
  sra->add_option("--out", out)->required();
  sra->add_flag("--force", force);

  auto* fuse = app.add_subcommand("fuse", "Concatenate RGB and super-resolved IR into six-channel tensors");
  fuse->add_option("--data", data)->required();
  fuse->add_option("--sr-images", sr_images, "Output directory of sr-apply")->required();
  fuse->add_option("--out", out)->required();
  fuse->add_flag("--force", force);

  auto* tr = app.add_subcommand("train", "Train the segmentation network from a run config");
  tr->add_option("--config", config, "Run config JSON")->required();
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_flag("--resume", resume, "Continue from <out>/checkpoints/last");
  tr->add_option("--stop-at", stop_at, "Stop after this many iterations");
  tr->add_flag("--quiet", quiet, "Do not echo evaluation lines");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint (or an untrained model) and print metrics JSON");
  ev->add_option("--config", config)->required();
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory; omit for a freshly initialized model");
  ev->add_option("--split", split)->check(CLI::IsMember({"val", "train", "all"}))->capture_default_str();

  auto* ab = app.add_subcommand("ablate", "Train all four input variants and tabulate validation mIoU");
  ab->add_option("--config", config)->required();
  ab->add_option("--out", out)->required();
  ab->add_flag("--force", force);

  double tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc->add_option("--tol", tol)->capture_default_str();

  unsigned lo = 12, hi = 18;
  std::size_t repeats = 11, channels = 4, state = 4;
  std::string bench_out;
  auto* bs = app.add_subcommand("bench-scan", "Time sequential and parallel scans over doubling lengths");
  bs->add_option("--min-log2", lo)->capture_default_str();
  bs->add_option("--max-log2", hi)->capture_default_str();
  bs->add_option("--repeats", repeats)->capture_default_str();
  bs->add_option("--channels", channels)->capture_default_str();
  bs->add_option("--state", state)->capture_default_str();
  bs->add_option("--out", bench_out, "Also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa);
    if (srt->parsed()) return cmd_sr_train(st);
    if (sra->parsed()) return cmd_sr_apply(data, sr, out, force);
    if (fuse->parsed()) return cmd_fuse(data, sr_images, out, force);
    if (tr->parsed()) return cmd_train(config, out, resume, stop_at, quiet);
    if (ev->parsed()) return cmd_eval(config, checkpoint, split);
    if (ab->parsed()) return cmd_ablate(config, out, force);
    if (gc->parsed()) return cmd_gradcheck(tol);
    if (bs->parsed()) return cmd_bench(lo, hi, repeats, channels, state, bench_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
