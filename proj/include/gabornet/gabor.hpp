#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gabornet/errors.hpp"

namespace gabornet {

/// Parameters of one real Gabor kernel
///   G = a * exp(-(xh^2 + gamma*yh^2) / (2 sigma^2)) * cos(2 pi xh / lambda + psi)
///   xh =  (x - x0) cos(theta) + (y - y0) sin(theta)
///   yh = -(x - x0) sin(theta) + (y - y0) cos(theta)
/// evaluated on the integer grid x, y in 1..k. Field order here is the
/// serialization order.
struct GaborParams {
  double lambda = 1.0;
  double theta = 0.0;
  double psi = 0.0;
  double sigma = 1.0;
  double gamma = 1.0;
  double a = 0.0;
  double x0 = 1.0;
  double y0 = 1.0;

  static constexpr std::size_t kCount = 8;
  static constexpr std::array<const char*, kCount> kNames = {"lambda", "theta", "psi", "sigma",
                                                             "gamma",  "a",     "x0",  "y0"};

  std::array<double, kCount> to_array() const { return {lambda, theta, psi, sigma, gamma, a, x0, y0}; }

  static GaborParams from_array(std::span<const double> v) {
    if (v.size() != kCount) throw DimensionError("GaborParams needs 8 values");
    return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
  }

  double& operator[](std::size_t i) {
    switch (i) {
      case 0: return lambda;
      case 1: return theta;
      case 2: return psi;
      case 3: return sigma;
      case 4: return gamma;
      case 5: return a;
      case 6: return x0;
      default: return y0;
    }
  }
  double operator[](std::size_t i) const { return const_cast<GaborParams&>(*this)[i]; }

  bool finite() const {
    for (double v : to_array()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const GaborParams&, const GaborParams&) = default;
};

/// Index of each field in GaborParams::to_array().
enum class GaborField : std::size_t { lambda = 0, theta, psi, sigma, gamma, a, x0, y0 };

/// d(loss)/d(field) for each Gabor parameter, same field order as GaborParams.
struct GaborParamGrads {
  double lambda = 0.0;
  double theta = 0.0;
  double psi = 0.0;
  double sigma = 0.0;
  double gamma = 0.0;
  double a = 0.0;
  double x0 = 0.0;
  double y0 = 0.0;

  std::array<double, GaborParams::kCount> to_array() const {
    return {lambda, theta, psi, sigma, gamma, a, x0, y0};
  }
  double& operator[](std::size_t i) {
    switch (i) {
      case 0: return lambda;
      case 1: return theta;
      case 2: return psi;
      case 3: return sigma;
      case 4: return gamma;
      case 5: return a;
      case 6: return x0;
      default: return y0;
    }
  }
  double operator[](std::size_t i) const { return const_cast<GaborParamGrads&>(*this)[i]; }

  friend bool operator==(const GaborParamGrads&, const GaborParamGrads&) = default;
};

/// Square k x k kernel; value(x, y) uses the 1-based grid coordinates of the
/// Gabor definition, storage is row-major with rows indexed by y.
class Kernel2D {
 public:
  Kernel2D() = default;
  explicit Kernel2D(int k, double fill = 0.0) : k_(k), values_(checked_area(k), fill) {}
  Kernel2D(int k, std::vector<double> values) : k_(k), values_(std::move(values)) {
    if (values_.size() != checked_area(k)) throw DimensionError("Kernel2D: expected k*k values");
  }

  int k() const { return k_; }
  std::size_t size() const { return values_.size(); }

  double& at(int x, int y) { return values_[static_cast<std::size_t>((y - 1) * k_ + (x - 1))]; }
  double at(int x, int y) const { return values_[static_cast<std::size_t>((y - 1) * k_ + (x - 1))]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  friend bool operator==(const Kernel2D&, const Kernel2D&) = default;

 private:
  static std::size_t checked_area(int k) {
    if (k < 1) throw InvalidArgumentError("kernel side length must be >= 1, got " + std::to_string(k));
    return static_cast<std::size_t>(k) * static_cast<std::size_t>(k);
  }

  int k_ = 0;
  std::vector<double> values_;
};

/// |sigma| and |lambda| are floored here during synthesis; the gradient
/// through the floor is zero.
inline constexpr double kGaborScaleFloor = 1e-3;

/// |cos| below this is treated as an exact zero of the carrier.
inline constexpr double kCarrierZero = 1e-12;

namespace detail {

struct ClampedScales {
  double sigma;
  double lambda;
  bool sigma_clamped;
  bool lambda_clamped;
};

inline ClampedScales clamp_scales(const GaborParams& p) {
  ClampedScales s{p.sigma, p.lambda, false, false};
  if (std::abs(p.sigma) < kGaborScaleFloor) {
    s.sigma = kGaborScaleFloor;
    s.sigma_clamped = true;
  }
  if (std::abs(p.lambda) < kGaborScaleFloor) {
    s.lambda = std::signbit(p.lambda) ? -kGaborScaleFloor : kGaborScaleFloor;
    s.lambda_clamped = true;
  }
  return s;
}

inline void require_finite(const GaborParams& p) {
  if (!p.finite()) throw InvalidParameterError("non-finite Gabor parameter");
}

}  // namespace detail

/// exp(...) * cos(...) at grid point (x, y), i.e. G without the amplitude.
/// synth_kernel and the fitting search both go through this so that
/// a * gabor_unit_value(...) is bit-identical between them.
inline double gabor_unit_value(const GaborParams& p, double x, double y) {
  const auto s = detail::clamp_scales(p);
  const double c = std::cos(p.theta);
  const double sn = std::sin(p.theta);
  const double dx = x - p.x0;
  const double dy = y - p.y0;
  const double xh = dx * c + dy * sn;
  const double yh = -dx * sn + dy * c;
  const double env = std::exp(-(xh * xh + p.gamma * yh * yh) / (2.0 * s.sigma * s.sigma));
  double wave = std::cos(2.0 * std::numbers::pi * xh / s.lambda + p.psi);
  // Carrier zeros that fall on grid points (lambda 1 or 2 with psi = pi/2)
  // come out of cos() as ~1e-16; make them exact.
  if (std::abs(wave) < kCarrierZero) wave = 0.0;
  return env * wave;
}

inline Kernel2D synth_kernel(const GaborParams& p, int k) {
  detail::require_finite(p);
  Kernel2D out(k);
  for (int y = 1; y <= k; ++y) {
    for (int x = 1; x <= k; ++x) {
      out.at(x, y) = p.a * gabor_unit_value(p, x, y);
    }
  }
  return out;
}

/// Sum over the grid of upstream(x, y) * dG(x, y)/dp, for all eight p.
inline GaborParamGrads gabor_param_grads(const GaborParams& p, int k, const Kernel2D& upstream) {
  detail::require_finite(p);
  if (upstream.k() != k) {
    throw DimensionError("upstream side " + std::to_string(upstream.k()) + " != k " + std::to_string(k));
  }
  const auto s = detail::clamp_scales(p);
  const double c = std::cos(p.theta);
  const double sn = std::sin(p.theta);
  const double two_pi = 2.0 * std::numbers::pi;
  const double inv_s2 = 1.0 / (s.sigma * s.sigma);

  GaborParamGrads g;
  for (int y = 1; y <= k; ++y) {
    for (int x = 1; x <= k; ++x) {
      const double u = upstream.at(x, y);
      if (u == 0.0) continue;
      const double dx = x - p.x0;
      const double dy = y - p.y0;
      const double xh = dx * c + dy * sn;
      const double yh = -dx * sn + dy * c;
      const double q = xh * xh + p.gamma * yh * yh;
      const double env = std::exp(-q * 0.5 * inv_s2);
      const double phase = two_pi * xh / s.lambda + p.psi;
      const double cw = std::cos(phase);
      const double sw = std::sin(phase);
      const double ae = p.a * env;

      // partials of G with respect to the rotated coordinates
      const double dg_dxh = ae * (-xh * inv_s2 * cw - sw * two_pi / s.lambda);
      const double dg_dyh = ae * cw * (-p.gamma * yh * inv_s2);

      g.a += u * env * cw;
      g.psi += u * (-ae * sw);
      if (!s.lambda_clamped) g.lambda += u * ae * sw * two_pi * xh / (s.lambda * s.lambda);
      if (!s.sigma_clamped) g.sigma += u * ae * cw * q / (s.sigma * s.sigma * s.sigma);
      g.gamma += u * ae * cw * (-yh * yh * 0.5 * inv_s2);
      // dxh/dtheta = yh, dyh/dtheta = -xh
      g.theta += u * (dg_dxh * yh - dg_dyh * xh);
      // dxh/dx0 = -cos, dyh/dx0 = sin; dxh/dy0 = -sin, dyh/dy0 = -cos
      g.x0 += u * (-dg_dxh * c + dg_dyh * sn);
      g.y0 += u * (-dg_dxh * sn - dg_dyh * c);
    }
  }
  return g;
}

/// <upstream, synth_kernel(p, k)>
inline double gabor_inner(const GaborParams& p, int k, const Kernel2D& upstream) {
  const Kernel2D g = synth_kernel(p, k);
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) acc += upstream[i] * g[i];
  return acc;
}

/// Central-difference estimate of gabor_param_grads. Verification oracle.
inline GaborParamGrads finite_diff_grads(const GaborParams& p, int k, const Kernel2D& upstream, double h) {
  if (!(h > 0.0)) throw InvalidArgumentError("finite difference step must be positive");
  detail::require_finite(p);
  if (upstream.k() != k) throw DimensionError("upstream side does not match k");
  GaborParamGrads g;
  for (std::size_t i = 0; i < GaborParams::kCount; ++i) {
    GaborParams plus = p;
    GaborParams minus = p;
    plus[i] += h;
    minus[i] -= h;
    g[i] = (gabor_inner(plus, k, upstream) - gabor_inner(minus, k, upstream)) / (2.0 * h);
  }
  return g;
}

}  // namespace gabornet
