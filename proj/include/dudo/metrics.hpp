#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dudo/tensor.hpp"

namespace dudo {

/// Single-channel real image, row-major.
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0.0) {}
  double operator()(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  double& operator()(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
};

namespace detail {

inline void require_same(const Image& x, const Image& ref) {
  if (x.height != ref.height || x.width != ref.width || x.pixels.size() != x.height * x.width ||
      ref.pixels.size() != ref.height * ref.width) {
    throw ShapeError("metric inputs must share a shape");
  }
}

}  // namespace detail

inline double mse(const Image& x, const Image& ref) {
  detail::require_same(x, ref);
  if (x.pixels.empty()) throw ShapeError("mse of empty image");
  double s = 0;
  for (std::size_t i = 0; i < x.pixels.size(); ++i) {
    const double d = x.pixels[i] - ref.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(x.pixels.size());
}

/// Peak signal-to-noise ratio in dB; +infinity when the images are identical.
inline double psnr(const Image& x, const Image& ref, double data_range) {
  if (!(data_range > 0)) throw ParameterError("data_range must be positive");
  const double e = mse(x, ref);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / e);
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Normalized 1-D Gaussian taps.
inline std::vector<double> gaussian_taps(std::size_t n, double sigma) {
  std::vector<double> g(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

/// Mean structural similarity over all fully contained Gaussian windows.
inline double ssim(const Image& x, const Image& ref, double data_range, const SsimOptions& opt = {}) {
  detail::require_same(x, ref);
  if (!(data_range > 0)) throw ParameterError("data_range must be positive");
  const std::size_t n = opt.window, H = x.height, W = x.width;
  if (H < n || W < n) throw ShapeError("image smaller than the SSIM window");
  const std::vector<double> g = gaussian_taps(n, opt.sigma);
  const std::size_t oh = H - n + 1, ow = W - n + 1;

  // Separable valid-region filter: rows first, then columns.
  auto filter = [&](auto&& pixel) {
    std::vector<double> tmp(H * ow), out(oh * ow);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * pixel(y, xo + i);
        tmp[y * ow + xo] = s;
      }
    for (std::size_t yo = 0; yo < oh; ++yo)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * tmp[(yo + i) * ow + xo];
        out[yo * ow + xo] = s;
      }
    return out;
  };
  const auto mx = filter([&](std::size_t r, std::size_t c) { return x(r, c); });
  const auto my = filter([&](std::size_t r, std::size_t c) { return ref(r, c); });
  const auto mxx = filter([&](std::size_t r, std::size_t c) { return x(r, c) * x(r, c); });
  const auto myy = filter([&](std::size_t r, std::size_t c) { return ref(r, c) * ref(r, c); });
  const auto mxy = filter([&](std::size_t r, std::size_t c) { return x(r, c) * ref(r, c); });

  const double c1 = (opt.k1 * data_range) * (opt.k1 * data_range);
  const double c2 = (opt.k2 * data_range) * (opt.k2 * data_range);
  double total = 0;
  for (std::size_t i = 0; i < oh * ow; ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
    total += num / den;
  }
  return total / static_cast<double>(oh * ow);
}

struct ImageMetrics {
  double psnr = 0, ssim = 0, mse = 0;
};

/// Compares magnitudes of a reconstruction plane against its fully sampled reference. Both are
/// divided by the reference's peak magnitude, and metrics use data range 1.
template <class T>
ImageMetrics compare_magnitudes(std::span<const std::complex<T>> recon, std::span<const std::complex<T>> ref,
                                std::size_t h, std::size_t w) {
  if (recon.size() != h * w || ref.size() != h * w) throw ShapeError("compare_magnitudes: size mismatch");
  double peak = 0;
  for (const auto& v : ref) peak = std::max(peak, static_cast<double>(std::abs(v)));
  const double scale = peak > 0 ? 1.0 / peak : 1.0;
  Image a(h, w), b(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    a.pixels[i] = std::abs(std::complex<double>(recon[i])) * scale;
    b.pixels[i] = std::abs(std::complex<double>(ref[i])) * scale;
  }
  return {psnr(a, b, 1.0), ssim(a, b, 1.0), mse(a, b)};
}

struct Aggregate {
  double mean = 0, std = 0, min = 0, max = 0;
};

/// Population statistics (std over n, so a single value has std 0).
inline Aggregate aggregate(const std::vector<double>& v) {
  if (v.empty()) return {};
  Aggregate a{0, 0, v[0], v[0]};
  for (double x : v) {
    a.mean += x;
    a.min = std::min(a.min, x);
    a.max = std::max(a.max, x);
  }
  a.mean /= static_cast<double>(v.size());
  if (!std::isfinite(a.mean)) return a;
  for (double x : v) a.std += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(a.std / static_cast<double>(v.size()));
  return a;
}

/// MSE values are reported in units of 1e-5 in CSV and JSON output.
inline constexpr double kMseUnit = 1e-5;

struct MetricsReport {
  struct Entry {
    std::string id;
    ImageMetrics metrics;
  };
  std::vector<Entry> per_image;

  Aggregate psnr() const { return collect(&ImageMetrics::psnr); }
  Aggregate ssim() const { return collect(&ImageMetrics::ssim); }
  Aggregate mse() const { return collect(&ImageMetrics::mse); }

  std::string to_csv() const {
    std::string out = "id,psnr,ssim,mse\n";
    char buf[160];
    for (const auto& e : per_image) {
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f\n", e.metrics.psnr, e.metrics.ssim, e.metrics.mse / kMseUnit);
      out += e.id;
      out += buf;
    }
    return out;
  }

  nlohmann::json to_json() const {
    auto agg = [](const Aggregate& a, double unit) {
      return nlohmann::json{{"mean", a.mean / unit}, {"std", a.std / unit}, {"min", a.min / unit}, {"max", a.max / unit}};
    };
    return {{"version", 1},
            {"count", per_image.size()},
            {"psnr_db", agg(psnr(), 1.0)},
            {"ssim", agg(ssim(), 1.0)},
            {"mse_1e-5", agg(mse(), kMseUnit)}};
  }

 private:
  Aggregate collect(double ImageMetrics::*field) const {
    std::vector<double> v;
    v.reserve(per_image.size());
    for (const auto& e : per_image) v.push_back(e.metrics.*field);
    return aggregate(v);
  }
};

}  // namespace dudo
