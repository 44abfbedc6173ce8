#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "dudo/tensor.hpp"

namespace dudo {

/// Ellipse in normalized coordinates: the image spans [-1, 1] on both axes.
struct Ellipse {
  double cx = 0, cy = 0;
  double a = 0.5, b = 0.5;  // semi-axes
  double angle = 0;         // radians
  double intensity = 1;

  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (x - cx) * c + (y - cy) * s;
    const double v = -(x - cx) * s + (y - cy) * c;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

struct PhantomSpec {
  std::size_t size = 64;
  std::size_t min_ellipses = 4;
  std::size_t max_ellipses = 9;
  double intensity_lo = 0.1;
  double intensity_hi = 1.0;
  double phase_amplitude = 0.5;
  std::uint64_t seed = 0;
  bool paired_contrast = false;

  void validate() const {
    if (size < 16) throw ParameterError("phantom size must be >= 16");
    if (min_ellipses > max_ellipses) throw ParameterError("min_ellipses > max_ellipses");
    if (!(intensity_lo >= 0.0 && intensity_lo <= intensity_hi && intensity_hi <= 1.0)) {
      throw ParameterError("intensity range must satisfy 0 <= lo <= hi <= 1");
    }
    if (!(phase_amplitude >= 0.0) || !std::isfinite(phase_amplitude)) throw ParameterError("bad phase amplitude");
  }
};

struct Phantom {
  ComplexTensor<float> image;  // (size, size)
  std::optional<ComplexTensor<float>> paired;
  std::vector<Ellipse> ellipses;
};

/// Sum of ellipse indicators sampled at pixel centers.
inline std::vector<double> render_ellipses(const std::vector<Ellipse>& ellipses, std::size_t n) {
  std::vector<double> img(n * n, 0.0);
  for (std::size_t y = 0; y < n; ++y) {
    const double py = (2.0 * y + 1.0) / n - 1.0;
    for (std::size_t x = 0; x < n; ++x) {
      const double px = (2.0 * x + 1.0) / n - 1.0;
      for (const auto& e : ellipses)
        if (e.contains(px, py)) img[y * n + x] += e.intensity;
    }
  }
  return img;
}

namespace detail {

inline ComplexTensor<float> with_phase(std::vector<double> mag, const std::vector<double>& phase, std::size_t n) {
  // Overlapping ellipses can stack above 1; rescale so the peak magnitude stays at most 1.
  const double peak = mag.empty() ? 0.0 : *std::max_element(mag.begin(), mag.end());
  if (peak > 1.0)
    for (auto& m : mag) m /= peak;
  ComplexTensor<float> out({n, n});
  for (std::size_t i = 0; i < n * n; ++i) out.data()[i] = std::complex<float>(std::polar(mag[i], phase[i]));
  return out;
}

}  // namespace detail

/// Random ellipse phantom with a smooth low-order phase. The first ellipse is a large body
/// outline; the rest sit inside it. Deterministic per seed.
inline Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const std::size_t n = spec.size;
  std::mt19937_64 rng(spec.seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  const std::size_t count =
      std::uniform_int_distribution<std::size_t>(spec.min_ellipses, spec.max_ellipses)(rng);
  Phantom ph;
  for (std::size_t i = 0; i < count; ++i) {
    Ellipse e;
    if (i == 0) {
      e.cx = uni(-0.05, 0.05);
      e.cy = uni(-0.05, 0.05);
      e.a = uni(0.6, 0.85);
      e.b = uni(0.7, 0.9);
    } else {
      e.cx = uni(-0.45, 0.45);
      e.cy = uni(-0.45, 0.45);
      e.a = uni(0.06, 0.35);
      e.b = uni(0.06, 0.35);
    }
    e.angle = uni(0.0, std::numbers::pi);
    e.intensity = uni(spec.intensity_lo, spec.intensity_hi);
    ph.ellipses.push_back(e);
  }

  // phase(x, y) = amp * (c0 x + c1 y + c2 x y + c3 (x^2 + y^2)), coefficients in [-1, 1].
  double c[4];
  for (auto& v : c) v = uni(-1.0, 1.0);
  std::vector<double> phase(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double px = (2.0 * x + 1.0) / n - 1.0, py = (2.0 * y + 1.0) / n - 1.0;
      phase[y * n + x] = spec.phase_amplitude * (c[0] * px + c[1] * py + c[2] * px * py + c[3] * (px * px + py * py));
    }

  ph.image = detail::with_phase(render_ellipses(ph.ellipses, n), phase, n);
  if (spec.paired_contrast) {
    std::vector<Ellipse> other = ph.ellipses;
    for (auto& e : other) e.intensity = uni(spec.intensity_lo, spec.intensity_hi);
    ph.paired = detail::with_phase(render_ellipses(other, n), phase, n);
  }
  return ph;
}

}  // namespace dudo
