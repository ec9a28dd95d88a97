#include "mscrack/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "mscrack/ops.hpp"

namespace fs = std::filesystem;

namespace mscrack {

// ---------------------------------------------------------------- PNM

namespace {

struct PnmHeader {
  std::size_t width = 0, height = 0, maxval = 0, payload_offset = 0;
};

PnmHeader parse_pnm_header(const std::string& b, const char* magic, const char* what) {
  if (b.size() < 2 || b[0] != magic[0] || b[1] != magic[1]) {
    throw ParseError(std::string(what) + ": bad magic at byte offset 0, expected " + magic);
  }
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + std::size_t(b[pos] - '0');
      if (v > (1u << 24)) throw ParseError(std::string(what) + ": " + field + " too large at byte offset " + std::to_string(start));
      ++pos;
    }
    if (pos == start) {
      throw ParseError(std::string(what) + ": expected " + field + " at byte offset " + std::to_string(start));
    }
    return v;
  };
  PnmHeader h;
  h.width = number("width");
  h.height = number("height");
  const std::size_t maxval_at = pos;
  h.maxval = number("maxval");
  if (h.width == 0 || h.height == 0) throw ParseError(std::string(what) + ": zero image extent");
  if (h.maxval != 255) {
    throw ParseError(std::string(what) + ": unsupported maxval " + std::to_string(h.maxval) +
                     " at byte offset " + std::to_string(maxval_at) + " (only 255)");
  }
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos]))) {
    throw ParseError(std::string(what) + ": missing separator before payload at byte offset " + std::to_string(pos));
  }
  h.payload_offset = pos + 1;
  return h;
}

void check_payload(const std::string& b, const PnmHeader& h, std::size_t channels, const char* what) {
  const std::size_t need = h.width * h.height * channels;
  if (b.size() - h.payload_offset < need) {
    throw ParseError(std::string(what) + ": truncated payload at byte offset " + std::to_string(b.size()) +
                     ", expected " + std::to_string(need) + " bytes from offset " + std::to_string(h.payload_offset));
  }
}

unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw Error("write failed: " + p.string());
}

}  // namespace

Tensor parse_ppm(const std::string& b) {
  const PnmHeader h = parse_pnm_header(b, "P6", "PPM");
  check_payload(b, h, 3, "PPM");
  Tensor t({3, h.height, h.width});
  const auto* p = reinterpret_cast<const unsigned char*>(b.data() + h.payload_offset);
  const std::size_t hw = h.width * h.height;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * hw + i] = p[i * 3 + c] / 255.0;
  return t;
}

Tensor parse_pgm_mask(const std::string& b) {
  const PnmHeader h = parse_pnm_header(b, "P5", "PGM");
  check_payload(b, h, 1, "PGM");
  Tensor t({h.height, h.width});
  const auto* p = reinterpret_cast<const unsigned char*>(b.data() + h.payload_offset);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (p[i] != 0 && p[i] != 255) {
      throw ParseError("PGM mask: value " + std::to_string(p[i]) + " at byte offset " +
                       std::to_string(h.payload_offset + i) + " is neither 0 nor 255");
    }
    t[i] = p[i] ? 1.0 : 0.0;
  }
  return t;
}

std::string encode_ppm(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("encode_ppm: expected [3,H,W], got " + shape_str(rgb.shape()));
  const std::size_t h = rgb.dim(1), w = rgb.dim(2), hw = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t off = out.size();
  out.resize(off + hw * 3);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[off + i * 3 + c] = static_cast<char>(quantize(rgb[c * hw + i]));
  return out;
}

std::string encode_pgm_mask(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("encode_pgm_mask: expected [H,W], got " + shape_str(mask.shape()));
  std::string out = "P5\n" + std::to_string(mask.dim(1)) + " " + std::to_string(mask.dim(0)) + "\n255\n";
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw Error("encode_pgm_mask: mask value " + std::to_string(v) + " is not binary");
    out.push_back(v != 0.0 ? char(255) : char(0));
  }
  return out;
}

Tensor load_image(const fs::path& path) {
  try {
    return parse_ppm(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_image(const fs::path& path, const Tensor& rgb) { write_file(path, encode_ppm(rgb)); }

Tensor load_mask(const fs::path& path) {
  try {
    return parse_pgm_mask(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_mask(const fs::path& path, const Tensor& mask) { write_file(path, encode_pgm_mask(mask)); }

// ---------------------------------------------------------------- synthesis

Tensor gaussian_blur(const Tensor& x, double sigma) {
  if (x.rank() != 3) throw ShapeError("gaussian_blur: expected [C,H,W], got " + shape_str(x.shape()));
  if (sigma <= 0) return x;
  const int r = int(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  const int c = int(x.dim(0)), h = int(x.dim(1)), w = int(x.dim(2));
  Tensor tmp(x.shape()), out(x.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * x.at(ch, y, std::clamp(xx + i, 0, w - 1));
        tmp.at(ch, y, xx) = acc;
      }
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(ch, std::clamp(y + i, 0, h - 1), xx);
        out.at(ch, y, xx) = acc;
      }
  return out;
}

namespace {

// Multi-octave value noise in [-sum(amp), sum(amp)].
Tensor smooth_field(std::size_t h, std::size_t w, const std::vector<std::pair<std::size_t, double>>& octaves,
                    Rng& rng) {
  Tensor f({1, h, w});
  for (auto [grid, amp] : octaves) {
    Tensor g = uniform_tensor({1, grid, grid}, rng, -amp, amp);
    f += resize_bicubic(g, h, w);
  }
  return f;
}

struct Crack {
  std::vector<std::pair<double, double>> pts;  // (y, x)
  double width = 2;
  double depth = 0.5;    // RGB darkening
  double thermal = 0.3;  // IR contrast
  bool ir_only = false;
};

Crack random_crack(std::size_t h, std::size_t w, const SynthOptions& o, Rng& rng) {
  Crack c;
  c.width = rng.uniform(o.min_width, o.max_width);
  c.depth = rng.uniform(0.45, 0.7);
  c.thermal = rng.uniform(0.3, 0.45);
  c.ir_only = rng.bernoulli(o.ir_only_fraction);
  double y = rng.uniform(0, double(h)), x = rng.uniform(0, double(w));
  double theta = rng.uniform(0, 2 * M_PI);
  const double length = rng.uniform(0.5, 1.1) * double(std::max(h, w));
  const double step = 3.0;
  c.pts.emplace_back(y, x);
  for (double walked = 0; walked < length; walked += step) {
    theta += 0.25 * rng.normal();
    y += step * std::sin(theta);
    x += step * std::cos(theta);
    c.pts.emplace_back(y, x);
    if (y < -5 || x < -5 || y > double(h) + 5 || x > double(w) + 5) break;
  }
  return c;
}

// Distance from every pixel centre to the polyline (capped at `reach`).
std::vector<double> crack_distance(const Crack& c, std::size_t h, std::size_t w, double reach) {
  std::vector<double> d(h * w, std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s + 1 < c.pts.size(); ++s) {
    const auto [y0, x0] = c.pts[s];
    const auto [y1, x1] = c.pts[s + 1];
    const long ylo = std::max(0L, long(std::floor(std::min(y0, y1) - reach)));
    const long yhi = std::min(long(h) - 1, long(std::ceil(std::max(y0, y1) + reach)));
    const long xlo = std::max(0L, long(std::floor(std::min(x0, x1) - reach)));
    const long xhi = std::min(long(w) - 1, long(std::ceil(std::max(x0, x1) + reach)));
    const double dy = y1 - y0, dx = x1 - x0, len2 = dy * dy + dx * dx;
    for (long i = ylo; i <= yhi; ++i)
      for (long j = xlo; j <= xhi; ++j) {
        const double py = double(i) + 0.5, px = double(j) + 0.5;
        double t = len2 > 0 ? ((py - y0) * dy + (px - x0) * dx) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double ey = py - (y0 + t * dy), ex = px - (x0 + t * dx);
        double& cur = d[std::size_t(i) * w + std::size_t(j)];
        cur = std::min(cur, std::sqrt(ey * ey + ex * ex));
      }
  }
  return d;
}

}  // namespace

SynthSample synth_sample(std::uint64_t seed, std::size_t index, std::size_t h, std::size_t w, Rational ir_factor,
                         const SynthOptions& opts) {
  if (h < 16 || w < 16) throw ConfigError("synth: RGB extents must be at least 16");
  Rng rng(seed, "synth", index);
  const std::size_t hw = h * w;

  // Background texture.
  const double base = rng.uniform(0.45, 0.65);
  const double tint[3] = {rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1), rng.uniform(0.85, 1.05)};
  const Tensor lum = smooth_field(h, w, {{3, 0.08}, {6, 0.06}, {12, 0.04}, {24, 0.03}}, rng);
  Tensor bg({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      bg[c * hw + i] = std::clamp((base + lum[i]) * tint[c] + 0.02 * rng.normal(), 0.0, 1.0);

  // Cracks, redrawn until the crack fraction is in range.
  std::vector<Crack> cracks;
  std::vector<std::vector<double>> dist;
  Tensor mask({h, w});
  for (int attempt = 0;; ++attempt) {
    cracks.clear();
    dist.clear();
    const std::size_t n = opts.min_cracks + rng.below(opts.max_cracks - opts.min_cracks + 1);
    for (std::size_t k = 0; k < n; ++k) {
      cracks.push_back(random_crack(h, w, opts, rng));
      dist.push_back(crack_distance(cracks.back(), h, w, opts.max_width + 2));
    }
    mask.fill(0.0);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < hw; ++i)
        if (dist[k][i] <= cracks[k].width / 2) mask[i] = 1.0;
    const double frac = std::accumulate(mask.data().begin(), mask.data().end(), 0.0) / double(hw);
    if (frac >= 0.002 && frac <= 0.08) break;
    if (attempt > 200) throw Error("synth: could not place cracks within the 0.2%..8% coverage band");
  }

  // RGB: darken visible cracks with a one-pixel soft edge.
  std::vector<double> dark(hw, 0.0), heat(hw, 0.0);
  for (std::size_t k = 0; k < cracks.size(); ++k) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double profile = std::clamp(cracks[k].width / 2 + 0.5 - dist[k][i], 0.0, 1.0);
      if (profile <= 0) continue;
      heat[i] = std::max(heat[i], cracks[k].thermal * profile);
      if (!cracks[k].ir_only) dark[i] = std::max(dark[i], cracks[k].depth * profile);
    }
  }
  SynthSample out;
  out.background = bg;
  Tensor rgb = bg;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      if (dark[i] > 0) rgb[c * hw + i] = bg[c * hw + i] * (1.0 - dark[i]);
  out.ir_only = Tensor({h, w});
  for (std::size_t i = 0; i < hw; ++i) out.ir_only[i] = mask[i] != 0.0 && dark[i] == 0.0 ? 1.0 : 0.0;

  // IR: smooth thermal field plus crack contrast, blurred, resampled to the sensor grid.
  const Tensor field = smooth_field(h, w, {{2, 0.12}, {4, 0.07}}, rng);
  Tensor temp({1, h, w});
  const double ambient = rng.uniform(0.35, 0.5);
  for (std::size_t i = 0; i < hw; ++i) temp[i] = ambient + field[i] + heat[i];
  temp = gaussian_blur(temp, 0.8);
  const std::size_t ih = ir_factor.shrink(h), iw = ir_factor.shrink(w);
  if (ih == 0 || iw == 0) throw ConfigError("synth: IR factor " + ir_factor.str() + " leaves an empty IR image");
  const Tensor small = resize_bicubic(temp, ih, iw);
  Tensor ir({3, ih, iw});
  const std::size_t ihw = ih * iw;
  for (std::size_t i = 0; i < ihw; ++i) {
    const double t = std::clamp(small[i] + 0.01 * rng.normal(), 0.0, 1.0);
    ir[i] = t;
    ir[ihw + i] = t * t;
    ir[2 * ihw + i] = std::clamp(2.0 * std::sqrt(t) * (1.0 - t), 0.0, 1.0);
  }

  char id[32];
  std::snprintf(id, sizeof id, "s%05zu", index);
  out.pair = SamplePair{id, std::move(rgb), std::move(ir), std::move(mask)};
  return out;
}

std::vector<SamplePair> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t h, std::size_t w,
                                      Rational ir_factor, const SynthOptions& opts) {
  if (n == 0) throw ConfigError("synth: count must be at least 1");
  std::vector<SamplePair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample(seed, i, h, w, ir_factor, opts).pair);
  return out;
}

// ---------------------------------------------------------------- variants

std::string variant_tag(Variant v) {
  switch (v) {
    case Variant::p_RGB: return "p_RGB";
    case Variant::P_RGB: return "P_RGB";
    case Variant::pRGB_plus_PIR: return "pRGB_plus_PIR";
    case Variant::PRGB_plus_PIRprime: return "PRGB_plus_PIRprime";
  }
  return "?";
}

std::string variant_label(Variant v) {
  switch (v) {
    case Variant::p_RGB: return "p_RGB";
    case Variant::P_RGB: return "P_RGB";
    case Variant::pRGB_plus_PIR: return "pRGB+PIR";
    case Variant::PRGB_plus_PIRprime: return "PRGB+P'IR";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : kVariants)
    if (s == variant_tag(v) || s == variant_label(v)) return v;
  throw ConfigError("unknown input variant '" + s + "' (expected p_RGB, P_RGB, pRGB_plus_PIR or PRGB_plus_PIRprime)");
}

std::size_t variant_channels(Variant v) {
  return v == Variant::pRGB_plus_PIR || v == Variant::PRGB_plus_PIRprime ? 6 : 3;
}

bool variant_needs_sr(Variant v) { return v == Variant::PRGB_plus_PIRprime; }

Example make_variant(const SamplePair& s, Variant v, const SrModel* sr) {
  const std::size_t ih = s.ir.dim(1), iw = s.ir.dim(2), rh = s.rgb.dim(1), rw = s.rgb.dim(2);
  Example e{s.id, {}, {}};
  switch (v) {
    case Variant::p_RGB:
      e.input = clamp(resize_bicubic(s.rgb, ih, iw), 0.0, 1.0);
      e.target = resize_nearest(s.mask, ih, iw);
      break;
    case Variant::P_RGB:
      e.input = s.rgb;
      e.target = s.mask;
      break;
    case Variant::pRGB_plus_PIR: {
      const Tensor parts[] = {clamp(resize_bicubic(s.rgb, ih, iw), 0.0, 1.0), s.ir};
      e.input = concat_channels(parts);
      e.target = resize_nearest(s.mask, ih, iw);
      break;
    }
    case Variant::PRGB_plus_PIRprime:
      if (!sr) throw Error("make_variant: variant " + variant_label(v) + " needs a super-resolution model");
      e.input = fuse_channels(s.rgb, sr_apply(*sr, s.ir, rh, rw));
      e.target = s.mask;
      break;
  }
  return e;
}

// ---------------------------------------------------------------- augmentation

AugmentParams draw_augment(Rng& rng, std::size_t h, std::size_t w, std::size_t patch) {
  AugmentParams p;
  p.hflip = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.5);
  p.rot90 = unsigned(rng.below(4));
  const std::size_t rh = p.rot90 % 2 ? w : h, rw = p.rot90 % 2 ? h : w;
  if (patch > rh || patch > rw) {
    throw ShapeError("augment: patch " + std::to_string(patch) + " exceeds image " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  p.patch_h = p.patch_w = patch;
  p.crop_y = rng.below(rh - patch + 1);
  p.crop_x = rng.below(rw - patch + 1);
  return p;
}

Example apply_augment(const Example& e, const AugmentParams& p) {
  const std::size_t c = e.input.dim(0), h = e.input.dim(1), w = e.input.dim(2);
  if (e.target.rank() != 2 || e.target.dim(0) != h || e.target.dim(1) != w) {
    throw ShapeError("augment: target " + shape_str(e.target.shape()) + " does not match input " +
                     shape_str(e.input.shape()));
  }
  const bool swap = p.rot90 % 2;
  const std::size_t rh = swap ? w : h, rw = swap ? h : w;
  if (p.crop_y + p.patch_h > rh || p.crop_x + p.patch_w > rw) {
    throw ShapeError("augment: crop window exceeds the " + std::to_string(rh) + "x" + std::to_string(rw) + " image");
  }
  // Output pixel (i,j) of the rotated, flipped frame reads source (si,sj).
  auto source = [&](std::size_t i, std::size_t j) {
    std::size_t y = 0, x = 0;
    switch (p.rot90 % 4) {  // counter-clockwise
      case 0: y = i; x = j; break;
      case 1: y = j; x = w - 1 - i; break;
      case 2: y = h - 1 - i; x = w - 1 - j; break;
      case 3: y = h - 1 - j; x = i; break;
    }
    if (p.vflip) y = h - 1 - y;
    if (p.hflip) x = w - 1 - x;
    return std::pair{y, x};
  };
  Example out{e.id, Tensor({c, p.patch_h, p.patch_w}, e.input.dtype()), Tensor({p.patch_h, p.patch_w})};
  for (std::size_t i = 0; i < p.patch_h; ++i)
    for (std::size_t j = 0; j < p.patch_w; ++j) {
      const auto [y, x] = source(p.crop_y + i, p.crop_x + j);
      for (std::size_t ch = 0; ch < c; ++ch) out.input.at(ch, i, j) = e.input.at(ch, y, x);
      out.target.at(i, j) = e.target.at(y, x);
    }
  return out;
}

Example augment(const Example& e, Rng& rng, std::size_t patch) {
  return apply_augment(e, draw_augment(rng, e.input.dim(1), e.input.dim(2), patch));
}

// ---------------------------------------------------------------- splits

nlohmann::json DatasetManifest::to_json() const {
  return {{"ids", ids},
          {"split", {{"train", train_ids}, {"val", val_ids}}},
          {"seed", seed},
          {"variant", variant_tag(variant)},
          {"ir_factor", ir_factor.str()},
          {"rgb_dims", {rgb_h, rgb_w}}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, const fs::path& root) {
  DatasetManifest m;
  m.root = root;
  try {
    m.ids = j.at("ids").get<std::vector<std::string>>();
    m.train_ids = j.at("split").at("train").get<std::vector<std::string>>();
    m.val_ids = j.at("split").at("val").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.variant = parse_variant(j.at("variant").get<std::string>());
    m.ir_factor = Rational::parse(j.at("ir_factor").get<std::string>());
    m.rgb_h = j.at("rgb_dims").at(0).get<std::size_t>();
    m.rgb_w = j.at("rgb_dims").at(1).get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest: " + std::string(e.what()));
  }
  return m;
}

std::size_t train_count(std::size_t n, double train_fraction) {
  return std::size_t(std::llround(train_fraction * double(n)));
}

void assign_split(DatasetManifest& m, double train_fraction) {
  std::vector<std::size_t> order(m.ids.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(m.seed, "split");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t nt = train_count(m.ids.size(), train_fraction);
  std::sort(order.begin(), order.begin() + std::ptrdiff_t(nt));
  std::sort(order.begin() + std::ptrdiff_t(nt), order.end());
  m.train_ids.clear();
  m.val_ids.clear();
  for (std::size_t k = 0; k < order.size(); ++k) (k < nt ? m.train_ids : m.val_ids).push_back(m.ids[order[k]]);
}

void write_dataset(const fs::path& root, const std::vector<SamplePair>& samples, DatasetManifest& m) {
  for (const char* sub : {"rgb", "ir", "mask"}) fs::create_directories(root / sub);
  m.root = root;
  m.ids.clear();
  for (const auto& s : samples) {
    save_image(root / "rgb" / (s.id + ".ppm"), s.rgb);
    save_image(root / "ir" / (s.id + ".ppm"), s.ir);
    save_mask(root / "mask" / (s.id + ".pgm"), s.mask);
    m.ids.push_back(s.id);
  }
  if (m.train_ids.empty() && m.val_ids.empty()) assign_split(m);
  std::ofstream out(root / "manifest.json", std::ios::binary);
  if (!out) throw Error("cannot write " + (root / "manifest.json").string());
  out << m.to_json().dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& root) {
  const fs::path p = root / "manifest.json";
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("dataset manifest not found: " + p.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
  return DatasetManifest::from_json(j, root);
}

SamplePair load_sample(const fs::path& root, const std::string& id) {
  SamplePair s{id, load_image(root / "rgb" / (id + ".ppm")), load_image(root / "ir" / (id + ".ppm")),
               load_mask(root / "mask" / (id + ".pgm"))};
  if (s.mask.dim(0) != s.rgb.dim(1) || s.mask.dim(1) != s.rgb.dim(2)) {
    throw ShapeError("sample " + id + ": mask " + shape_str(s.mask.shape()) + " does not match RGB " +
                     shape_str(s.rgb.shape()));
  }
  return s;
}

// ---------------------------------------------------------------- batches

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, bool training,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (n == 0) throw Error("batches: the split is empty");
  if (batch_size == 0) throw ConfigError("batches: batch size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (training) {
    Rng rng(seed, "shuffle", epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size) {
    const std::size_t e = std::min(n, s + batch_size);
    if (training && e - s < batch_size) break;
    out.emplace_back(order.begin() + std::ptrdiff_t(s), order.begin() + std::ptrdiff_t(e));
  }
  if (out.empty()) throw ConfigError("batches: batch size " + std::to_string(batch_size) +
                                     " exceeds the " + std::to_string(n) + "-item training split");
  return out;
}

Batch assemble_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& indices,
                     std::size_t patch, std::size_t channels, std::uint64_t seed, std::uint64_t epoch,
                     std::size_t first_slot) {
  Batch b{Tensor({indices.size(), channels, patch, patch}), Tensor({indices.size(), patch, patch}), {}};
  const std::size_t in_sz = channels * patch * patch, tg_sz = patch * patch;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Example& e = examples.at(indices[k]);
    if (e.input.dim(0) != channels) {
      throw ShapeError("batch: example " + e.id + " has " + std::to_string(e.input.dim(0)) + " channels, expected " +
                       std::to_string(channels));
    }
    Rng rng(seed, "augment:" + std::to_string(epoch), first_slot + k);
    const Example a = augment(e, rng, patch);
    std::copy_n(a.input.ptr(), in_sz, b.inputs.ptr() + k * in_sz);
    std::copy_n(a.target.ptr(), tg_sz, b.targets.ptr() + k * tg_sz);
    b.ids.push_back(e.id);
  }
  return b;
}

}  // namespace mscrack
