#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mscrack/random.hpp"
#include "mscrack/resolution.hpp"
#include "mscrack/tensor.hpp"

namespace mscrack {

// ---- image files: P6 RGB (maxval 255) and P5 binary masks ----

Tensor parse_ppm(const std::string& bytes);       // -> [3,H,W] in [0,1]
Tensor parse_pgm_mask(const std::string& bytes);  // -> [H,W] of {0,1}
std::string encode_ppm(const Tensor& rgb);        // values clamped to [0,1], rounded to 8 bits
std::string encode_pgm_mask(const Tensor& mask);

Tensor load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Tensor& rgb);
Tensor load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const Tensor& mask);

// ---- samples ----

struct SamplePair {
  std::string id;
  Tensor rgb;   // [3,Hr,Wr]
  Tensor ir;    // [3,Hi,Wi]
  Tensor mask;  // [Hr,Wr], 1 = crack
};

struct SynthOptions {
  double ir_only_fraction = 0.35;  // probability that a crack is invisible in RGB
  std::size_t min_cracks = 1;
  std::size_t max_cracks = 3;
  double min_width = 2.0;
  double max_width = 4.0;
};

struct SynthSample {
  SamplePair pair;
  Tensor background;  // RGB before any crack was drawn
  Tensor ir_only;     // [Hr,Wr], crack pixels whose RGB equals the background
};

SynthSample synth_sample(std::uint64_t seed, std::size_t index, std::size_t rgb_h, std::size_t rgb_w,
                         Rational ir_factor, const SynthOptions& opts = {});
std::vector<SamplePair> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t rgb_h, std::size_t rgb_w,
                                      Rational ir_factor, const SynthOptions& opts = {});

// ---- input variants ----

enum class Variant { p_RGB, P_RGB, pRGB_plus_PIR, PRGB_plus_PIRprime };
inline constexpr Variant kVariants[] = {Variant::p_RGB, Variant::P_RGB, Variant::pRGB_plus_PIR,
                                        Variant::PRGB_plus_PIRprime};
std::string variant_tag(Variant v);    // identifier form, e.g. "PRGB_plus_PIRprime"
std::string variant_label(Variant v);  // table form, e.g. "PRGB+P'IR"
Variant parse_variant(const std::string& s);  // accepts either form
std::size_t variant_channels(Variant v);
bool variant_needs_sr(Variant v);

struct Example {
  std::string id;
  Tensor input;   // [C,H,W]
  Tensor target;  // [H,W]
};

Example make_variant(const SamplePair& s, Variant v, const SrModel* sr);

// ---- augmentation ----

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  unsigned rot90 = 0;  // counter-clockwise quarter turns
  std::size_t crop_y = 0, crop_x = 0;
  std::size_t patch_h = 0, patch_w = 0;
};

AugmentParams draw_augment(Rng& rng, std::size_t h, std::size_t w, std::size_t patch);
// Flips, then rotation, then crop; the same transform on input [C,H,W] and target [H,W].
Example apply_augment(const Example& e, const AugmentParams& p);
Example augment(const Example& e, Rng& rng, std::size_t patch);

// ---- splits and batches ----

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> ids;
  std::vector<std::string> train_ids, val_ids;
  Variant variant = Variant::PRGB_plus_PIRprime;
  std::uint64_t seed = 0;
  Rational ir_factor{10, 3};
  std::size_t rgb_h = 0, rgb_w = 0;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& root);
};

std::size_t train_count(std::size_t n, double train_fraction = 0.8);
// Random disjoint split; train gets round(fraction * n) ids.
void assign_split(DatasetManifest& m, double train_fraction = 0.8);

void write_dataset(const std::filesystem::path& root, const std::vector<SamplePair>& samples,
                   DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& root);
SamplePair load_sample(const std::filesystem::path& root, const std::string& id);

// Index groups for one epoch. Training shuffles from (seed, epoch) and drops the
// last partial batch; evaluation keeps order and the remainder.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, bool training,
                                                    std::uint64_t seed, std::uint64_t epoch);

struct Batch {
  Tensor inputs;   // [B,C,ph,pw]
  Tensor targets;  // [B,ph,pw]
  std::vector<std::string> ids;
};

// Augmented training batch; per-item augment streams are keyed by (seed, epoch, slot).
Batch assemble_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& indices,
                     std::size_t patch, std::size_t channels, std::uint64_t seed, std::uint64_t epoch,
                     std::size_t first_slot);

Tensor gaussian_blur(const Tensor& x, double sigma);

}  // namespace mscrack
