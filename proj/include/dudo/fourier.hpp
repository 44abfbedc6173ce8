#pragma once

#include <charconv>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <fftw3.h>

#include "dudo/tensor.hpp"

namespace dudo {

namespace detail {

// One FFTW plan per (h, w, sign), bound to its own aligned in-place buffer. ESTIMATE planning is
// deterministic, and a fixed buffer keeps the executed codelets identical from call to call.
class FftPlan {
 public:
  FftPlan(std::size_t h, std::size_t w, int sign)
      : n_(h * w), buf_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n_))) {
    if (!buf_) throw std::bad_alloc();
    plan_ = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf_, buf_, sign, FFTW_ESTIMATE);
  }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;
  ~FftPlan() {
    fftw_destroy_plan(plan_);
    fftw_free(buf_);
  }

  std::complex<double>* data() { return reinterpret_cast<std::complex<double>*>(buf_); }
  void execute() { fftw_execute(plan_); }
  // Held for the whole transform: the buffer is shared by every caller of this size.
  std::mutex& mutex() { return use_; }

  static FftPlan& get(std::size_t h, std::size_t w, int sign) {
    static std::mutex mu;
    static std::map<std::tuple<std::size_t, std::size_t, int>, std::unique_ptr<FftPlan>> cache;
    const std::lock_guard lock(mu);
    auto& slot = cache[{h, w, sign}];
    if (!slot) slot = std::make_unique<FftPlan>(h, w, sign);
    return *slot;
  }

 private:
  std::size_t n_;
  fftw_complex* buf_;
  fftw_plan plan_;
  std::mutex use_;
};

template <class T>
ComplexTensor<T> centered_fft2(const ComplexTensor<T>& x, int sign) {
  const std::size_t h = x.height(), w = x.width();
  const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
  ComplexTensor<T> out(x.shape());
  FftPlan& plan = FftPlan::get(h, w, sign);
  const std::lock_guard lock(plan.mutex());
  std::complex<double>* buf = plan.data();
  for (std::size_t p = 0; p < x.planes(); ++p) {
    auto src = x.plane(p);
    // ifftshift on the way in: buf[j] = src[(j + n/2) mod n]
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = (y + h / 2) % h;
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t sx = (xx + w / 2) % w;
        buf[y * w + xx] = std::complex<double>(src[sy * w + sx]);
      }
    }
    plan.execute();
    // fftshift on the way out: dst[(j + n/2) mod n] = buf[j]
    auto dst = out.plane(p);
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t dy = (y + h / 2) % h;
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t dx = (xx + w / 2) % w;
        const auto v = buf[y * w + xx] * scale;
        dst[dy * w + dx] = {static_cast<T>(v.real()), static_cast<T>(v.imag())};
      }
    }
  }
  return out;
}

}  // namespace detail

/// Centered, orthonormal forward 2-D DFT over the trailing two dimensions.
template <class T>
ComplexTensor<T> fft2c(const ComplexTensor<T>& x) {
  return detail::centered_fft2(x, -1);
}

/// Exact inverse of fft2c.
template <class T>
ComplexTensor<T> ifft2c(const ComplexTensor<T>& x) {
  return detail::centered_fft2(x, +1);
}

/// 1-D Cartesian phase-encode line mask.
struct SamplingMask {
  std::vector<bool> lines;
  double accel = 1.0;
  double acs_fraction = 0.0;
  std::uint64_t seed = 0;

  std::size_t height() const noexcept { return lines.size(); }
  std::size_t acquired() const noexcept { return static_cast<std::size_t>(std::count(lines.begin(), lines.end(), true)); }
  bool operator[](std::size_t y) const { return lines[y]; }

  /// `h,accel,acs_fraction,seed,<0/1 string>` on one line.
  std::string serialize() const {
    std::string out = std::to_string(lines.size()) + ',' + format_real(accel) + ',' + format_real(acs_fraction) +
                      ',' + std::to_string(seed) + ',';
    for (bool b : lines) out += b ? '1' : '0';
    return out;
  }

  static SamplingMask parse(std::string_view text) {
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.remove_suffix(1);
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= text.size(); ++i) {
      if (i == text.size() || text[i] == ',') {
        fields.push_back(text.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 5) throw FormatError("mask line must have 5 comma-separated fields");
    SamplingMask m;
    std::size_t h = 0;
    parse_field(fields[0], h);
    parse_field(fields[1], m.accel);
    parse_field(fields[2], m.acs_fraction);
    parse_field(fields[3], m.seed);
    if (fields[4].size() != h) throw FormatError("mask bit string length does not match h");
    m.lines.resize(h);
    for (std::size_t i = 0; i < h; ++i) {
      if (fields[4][i] != '0' && fields[4][i] != '1') throw FormatError("mask bits must be 0 or 1");
      m.lines[i] = fields[4][i] == '1';
    }
    return m;
  }

  friend bool operator==(const SamplingMask&, const SamplingMask&) = default;

 private:
  static std::string format_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  }
  template <class V>
  static void parse_field(std::string_view s, V& out) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw FormatError("malformed mask field '" + std::string(s) + "'");
    }
  }
};

/// Number of lines in the centered auto-calibration block.
inline std::size_t acs_line_count(std::size_t h, double acs_fraction) {
  return static_cast<std::size_t>(std::lround(acs_fraction * static_cast<double>(h)));
}

/// First line of the ACS block; centered at h/2, one line low for even-size ties.
inline std::size_t acs_start(std::size_t h, std::size_t n_acs) { return h / 2 - n_acs / 2; }

inline SamplingMask make_cartesian_mask(std::size_t h, double accel, double acs_fraction, std::uint64_t seed) {
  if (h < 4) throw ParameterError("mask height must be at least 4");
  if (!(accel >= 1.0) || !std::isfinite(accel)) throw ParameterError("acceleration must be >= 1");
  if (!(acs_fraction >= 0.0) || acs_fraction > 1.0) throw ParameterError("acs_fraction must lie in [0, 1]");
  if (acs_fraction > 1.0 / accel + 1e-12) {
    throw ParameterError("infeasible sampling budget: acs_fraction exceeds 1/accel");
  }
  const std::size_t n_acs = acs_line_count(h, acs_fraction);
  if (n_acs > h) throw ParameterError("mask height too small for the ACS block");
  const std::size_t budget = std::max<std::size_t>(
      static_cast<std::size_t>(std::lround(static_cast<double>(h) / accel)), n_acs);

  SamplingMask mask{std::vector<bool>(h, false), accel, acs_fraction, seed};
  const std::size_t first = acs_start(h, n_acs);
  std::vector<std::size_t> pool;
  for (std::size_t y = 0; y < h; ++y) {
    if (y >= first && y < first + n_acs) {
      mask.lines[y] = true;
    } else {
      pool.push_back(y);
    }
  }
  // Partial Fisher-Yates: the first `extra` pool entries are a uniform draw without replacement.
  std::mt19937_64 rng(seed);
  const std::size_t extra = std::min(budget - n_acs, pool.size());
  for (std::size_t i = 0; i < extra; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    mask.lines[pool[i]] = true;
  }
  return mask;
}

inline void check_mask_shape(const SamplingMask& mask, std::size_t height) {
  if (mask.height() != height) {
    throw ShapeError("mask length " + std::to_string(mask.height()) + " does not match k-space height " +
                     std::to_string(height));
  }
}

template <class T>
ComplexTensor<T> undersample(const ComplexTensor<T>& k_full, const SamplingMask& mask) {
  check_mask_shape(mask, k_full.height());
  ComplexTensor<T> out = k_full;
  const std::size_t h = k_full.height(), w = k_full.width();
  for (std::size_t p = 0; p < out.planes(); ++p) {
    auto pl = out.plane(p);
    for (std::size_t y = 0; y < h; ++y) {
      if (!mask[y]) std::fill(pl.begin() + y * w, pl.begin() + (y + 1) * w, std::complex<T>{});
    }
  }
  return out;
}

/// Data-consistency weighting: hard replacement or a finite lambda.
class DcMode {
 public:
  static DcMode hard() { return DcMode(true, 0.0); }
  static DcMode soft(double lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ParameterError("DC lambda must be finite and >= 0");
    return DcMode(false, lambda);
  }
  bool is_hard() const noexcept { return hard_; }
  double lambda() const noexcept { return lambda_; }
  friend bool operator==(const DcMode&, const DcMode&) = default;

 private:
  DcMode(bool hard, double lambda) : hard_(hard), lambda_(lambda) {}
  bool hard_;
  double lambda_;
};

template <class T>
ComplexTensor<T> data_consistency(const ComplexTensor<T>& k_pred, const ComplexTensor<T>& k_u,
                                  const SamplingMask& mask, DcMode mode) {
  if (k_pred.shape() != k_u.shape()) {
    throw ShapeError("DC shape mismatch: " + shape_string(k_pred.shape()) + " vs " + shape_string(k_u.shape()));
  }
  check_mask_shape(mask, k_pred.height());
  ComplexTensor<T> out = k_pred;
  const std::size_t h = k_pred.height(), w = k_pred.width();
  const T lam = static_cast<T>(mode.lambda());
  for (std::size_t p = 0; p < out.planes(); ++p) {
    auto dst = out.plane(p);
    auto meas = k_u.plane(p);
    for (std::size_t y = 0; y < h; ++y) {
      if (!mask[y]) continue;
      for (std::size_t x = y * w; x < (y + 1) * w; ++x) {
        dst[x] = mode.is_hard() ? meas[x] : (dst[x] + lam * meas[x]) / (T(1) + lam);
      }
    }
  }
  return out;
}

}  // namespace dudo
