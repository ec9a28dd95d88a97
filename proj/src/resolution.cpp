#include "mscrack/resolution.hpp"

#include <charconv>
#include <cmath>
#include <numeric>
#include <utility>

#include "mscrack/checkpoint.hpp"
#include "mscrack/metrics.hpp"
#include "mscrack/ops.hpp"
#include "mscrack/optim.hpp"

namespace mscrack {

std::string Rational::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

Rational Rational::parse(const std::string& s) {
  auto parse_u = [&](std::string_view v) {
    std::uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || out == 0) {
      throw ConfigError("invalid scale factor '" + s + "', expected N or N/M with positive integers");
    }
    return out;
  };
  const auto slash = s.find('/');
  Rational r;
  if (slash == std::string::npos) {
    r.num = parse_u(s);
  } else {
    r.num = parse_u(std::string_view(s).substr(0, slash));
    r.den = parse_u(std::string_view(s).substr(slash + 1));
  }
  const std::uint64_t g = std::gcd(r.num, r.den);
  r.num /= g;
  r.den /= g;
  return r;
}

Tensor degrade(const Tensor& img, Rational factor) {
  if (img.rank() != 3) throw ShapeError("degrade: expected [C,H,W], got " + shape_str(img.shape()));
  if (factor.num < factor.den) throw Error("degrade: factor " + factor.str() + " must be >= 1");
  if (factor.num == factor.den) return img;
  const std::size_t h = factor.shrink(img.dim(1)), w = factor.shrink(img.dim(2));
  if (h < 8 || w < 8) {
    throw Error("degrade: " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(2)) + " / " +
                factor.str() + " gives " + std::to_string(h) + "x" + std::to_string(w) +
                ", below the 8-pixel minimum");
  }
  return resize_bicubic(img, h, w);
}

SrModel SrModel::init(Rational factor, Rng& rng, std::size_t width) {
  SrModel m;
  m.factor = factor;
  m.conv1 = init_conv(3, width, 3, std::sqrt(2.0), rng);
  m.conv2 = init_conv(width, width, 3, std::sqrt(2.0), rng);
  m.conv3 = {Tensor({3, width, 3, 3}), Tensor({3})};
  return m;
}

ParamList SrModel::params() {
  return {{"conv1.w", &conv1.w}, {"conv1.b", &conv1.b}, {"conv2.w", &conv2.w},
          {"conv2.b", &conv2.b}, {"conv3.w", &conv3.w}, {"conv3.b", &conv3.b}};
}

ConstParamList SrModel::params() const {
  return {{"conv1.w", &conv1.w}, {"conv1.b", &conv1.b}, {"conv2.w", &conv2.w},
          {"conv2.b", &conv2.b}, {"conv3.w", &conv3.w}, {"conv3.b", &conv3.b}};
}

SrModel SrModel::zeros_like() const {
  SrModel z = *this;
  for (auto& [name, t] : z.params()) t->fill(0.0);
  return z;
}

Tensor sr_forward(const SrModel& m, const Tensor& low, std::size_t out_h, std::size_t out_w,
                  SrCache& c) {
  if (low.rank() != 3 || low.dim(0) != 3) {
    throw ShapeError("sr_forward: expected [3,h,w], got " + shape_str(low.shape()));
  }
  c.low_h = low.dim(1);
  c.low_w = low.dim(2);
  c.up = resize_bicubic(low, out_h, out_w);
  c.a1_pre = conv2d(c.up, m.conv1.w, m.conv1.b);
  c.a1 = relu(c.a1_pre);
  c.a2_pre = conv2d(c.a1, m.conv2.w, m.conv2.b);
  c.a2 = relu(c.a2_pre);
  c.out_pre = conv2d(c.a2, m.conv3.w, m.conv3.b);
  c.out_pre += c.up;
  return clamp(c.out_pre, 0.0, 1.0);
}

Tensor sr_forward(const SrModel& m, const Tensor& low, std::size_t out_h, std::size_t out_w) {
  SrCache c;
  return sr_forward(m, low, out_h, out_w, c);
}

Tensor sr_backward(const SrModel& m, const SrCache& c, const Tensor& gy, SrModel& grads) {
  require_shape(gy, c.out_pre.shape(), "sr_backward upstream");
  Tensor g(gy.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double v = c.out_pre[i];
    g[i] = v > 0.0 && v < 1.0 ? gy[i] : 0.0;
  }
  const ConvGrads g3 = conv2d_vjp(c.a2, m.conv3.w, g);
  grads.conv3.w += g3.dw;
  grads.conv3.b += g3.db;
  const ConvGrads g2 = conv2d_vjp(c.a1, m.conv2.w, relu_vjp(c.a2_pre, g3.dx));
  grads.conv2.w += g2.dw;
  grads.conv2.b += g2.db;
  const ConvGrads g1 = conv2d_vjp(c.up, m.conv1.w, relu_vjp(c.a1_pre, g2.dx));
  grads.conv1.w += g1.dw;
  grads.conv1.b += g1.db;
  Tensor dup = g1.dx;
  dup += g;
  return resize_bicubic_vjp(dup, c.low_h, c.low_w);
}

namespace {

Tensor crop(const Tensor& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  Tensor out({img.dim(0), h, w});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(c, i, j) = img.at(c, y + i, x + j);
  return out;
}

std::vector<Tensor> draw_crops(const std::vector<Tensor>& irs, std::size_t n, std::size_t size, Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < n; ++k) {
    const Tensor& img = irs[rng.below(irs.size())];
    const std::size_t y = rng.below(img.dim(1) - size + 1);
    const std::size_t x = rng.below(img.dim(2) - size + 1);
    out.push_back(crop(img, y, x, size, size));
  }
  return out;
}

// Mean squared error over the crops; optionally accumulates parameter gradients.
double crop_loss(const SrModel& m, const std::vector<Tensor>& crops, Rational factor, SrModel* grads) {
  std::size_t count = 0;
  for (const auto& c : crops) count += c.size();
  double loss = 0;
  for (const auto& gt : crops) {
    SrCache cache;
    const Tensor out = sr_forward(m, degrade(gt, factor), gt.dim(1), gt.dim(2), cache);
    Tensor g(out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double d = out[i] - gt[i];
      loss += d * d;
      g[i] = 2.0 * d / double(count);
    }
    if (grads) sr_backward(m, cache, g, *grads);
  }
  return loss / double(count);
}

}  // namespace

SrModel sr_train_selfsupervised(const std::vector<Tensor>& irs, Rational factor, const SrTrainConfig& cfg,
                                SrTrainLog* log) {
  if (irs.empty()) throw Error("sr_train: no training images");
  if (factor.num < factor.den) throw ConfigError("sr_train: factor " + factor.str() + " must be >= 1");
  if (cfg.crop == 0 || (cfg.crop * factor.den) % factor.num != 0) {
    throw ConfigError("sr_train: crop " + std::to_string(cfg.crop) + " does not divide exactly by factor " +
                      factor.str());
  }
  if (cfg.batch_size == 0 || cfg.lr <= 0) throw ConfigError("sr_train: batch size and lr must be positive");
  for (const auto& img : irs) {
    if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) < cfg.crop || img.dim(2) < cfg.crop) {
      throw ShapeError("sr_train: image " + shape_str(img.shape()) + " is smaller than the " +
                       std::to_string(cfg.crop) +
                       "-pixel crop; use larger images or a smaller crop");
    }
  }
  Rng init_rng(cfg.seed, "sr-init");
  SrModel m = SrModel::init(factor, init_rng);
  Rng probe_rng(cfg.seed, "sr-probe");
  const std::vector<Tensor> probe = draw_crops(irs, cfg.probe_crops, cfg.crop, probe_rng);
  m.initial_loss = crop_loss(m, probe, factor, nullptr);

  AdamState opt = AdamState::zeros_for(std::as_const(m).params());
  const AdamWHyper hyper{.weight_decay = 0.0};
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Rng rng(cfg.seed, "sr-batch", it);
    const auto crops = draw_crops(irs, cfg.batch_size, cfg.crop, rng);
    SrModel grads = m.zeros_like();
    const double loss = crop_loss(m, crops, factor, &grads);
    if (!std::isfinite(loss) || (m.initial_loss > 0 && loss > 10.0 * m.initial_loss)) {
      throw Error("sr_train: loss diverged at iteration " + std::to_string(it) + " (" + std::to_string(loss) +
                  " vs initial " + std::to_string(m.initial_loss) + "); try a lower learning rate");
    }
    if (log) log->losses.push_back(loss);
    adamw_step(m.params(), std::as_const(grads).params(), opt, cfg.lr, hyper);
  }
  m.final_loss = crop_loss(m, probe, factor, nullptr);
  return m;
}

Tensor sr_apply(const SrModel& m, const Tensor& ir, std::size_t rgb_h, std::size_t rgb_w) {
  if (ir.rank() != 3) throw ShapeError("sr_apply: expected [3,H,W], got " + shape_str(ir.shape()));
  if (rgb_h < ir.dim(1) || rgb_w < ir.dim(2)) {
    throw ShapeError("sr_apply: target " + std::to_string(rgb_h) + "x" + std::to_string(rgb_w) +
                     " is smaller than the IR image " + std::to_string(ir.dim(1)) + "x" +
                     std::to_string(ir.dim(2)));
  }
  return sr_forward(m, ir, rgb_h, rgb_w);
}

SrPsnr sr_selfsupervised_psnr(const SrModel& m, const Tensor& img) {
  const Tensor low = degrade(img, m.factor);
  const std::size_t h = img.dim(1), w = img.dim(2);
  return {psnr(sr_forward(m, low, h, w), img), psnr(clamp(resize_bicubic(low, h, w), 0.0, 1.0), img)};
}

Tensor fuse_channels(const Tensor& rgb, const Tensor& ir_sr) {
  if (rgb.rank() != 3 || ir_sr.rank() != 3 || rgb.dim(0) != 3 || ir_sr.dim(0) != 3 ||
      rgb.dim(1) != ir_sr.dim(1) || rgb.dim(2) != ir_sr.dim(2)) {
    throw ShapeError("fuse_channels: RGB " + shape_str(rgb.shape()) + " and IR " + shape_str(ir_sr.shape()) +
                     " do not match");
  }
  const Tensor parts[] = {rgb, ir_sr};
  return concat_channels(parts);
}

void save_sr_model(const SrModel& m, const std::filesystem::path& dir) {
  nlohmann::json j{{"kind", "sr"},
                   {"factor", m.factor.str()},
                   {"width", m.conv1.w.dim(0)},
                   {"initial_loss", m.initial_loss},
                   {"final_loss", m.final_loss}};
  save_archive(dir, j, m.params());
}

SrModel load_sr_model(const std::filesystem::path& dir) {
  const Archive a = load_archive(dir);
  if (a.manifest.value("kind", "") != "sr") throw Error("checkpoint " + dir.string() + " is not an SR model");
  Rng rng(0);
  SrModel m = SrModel::init(Rational::parse(a.manifest.at("factor").get<std::string>()), rng,
                            a.manifest.at("width").get<std::size_t>());
  assign_params(a, m.params());
  m.initial_loss = a.manifest.at("initial_loss").get<double>();
  m.final_loss = a.manifest.at("final_loss").get<double>();
  return m;
}

}  // namespace mscrack
