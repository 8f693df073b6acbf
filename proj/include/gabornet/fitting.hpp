#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <thread>
#include <utility>
#include <vector>

#include "gabornet/errors.hpp"
#include "gabornet/gabor.hpp"
#include "gabornet/tensor.hpp"

namespace gabornet {

enum class AmplitudeScale { Unit, PerKernelMaxAbs };

/// Candidate grid for the nearest-Gabor search. Candidates are enumerated
/// with amplitudes outermost, then centers, theta, psi, sigma, lambda and
/// gamma innermost. In PerKernelMaxAbs mode every amplitude is multiplied by
/// max|target| of the kernel being fitted. Shapes that vanish on the whole
/// grid are searched at a = 0 only.
struct FitGrid {
  std::vector<double> amplitudes;
  std::vector<std::pair<double, double>> centers;
  std::vector<double> thetas;
  std::vector<double> psis;
  std::vector<double> sigmas;
  std::vector<double> lambdas;
  std::vector<double> gammas;
  AmplitudeScale amplitude_scale = AmplitudeScale::Unit;

  std::size_t shape_count() const {
    return centers.size() * thetas.size() * psis.size() * sigmas.size() * lambdas.size() * gammas.size();
  }
  std::size_t size() const { return amplitudes.size() * shape_count(); }
  bool empty() const { return size() == 0; }

  /// Parameters of the candidate at `index` with amplitude multiplied by `amp_scale`.
  GaborParams candidate(std::size_t index, double amp_scale = 1.0) const {
    std::size_t r = index;
    const std::size_t g = r % gammas.size();
    r /= gammas.size();
    const std::size_t l = r % lambdas.size();
    r /= lambdas.size();
    const std::size_t s = r % sigmas.size();
    r /= sigmas.size();
    const std::size_t ps = r % psis.size();
    r /= psis.size();
    const std::size_t t = r % thetas.size();
    r /= thetas.size();
    const std::size_t c = r % centers.size();
    r /= centers.size();
    GaborParams p;
    p.a = amplitudes.at(r) * amp_scale;
    p.x0 = centers[c].first;
    p.y0 = centers[c].second;
    p.theta = thetas[t];
    p.psi = psis[ps];
    p.sigma = sigmas[s];
    p.lambda = lambdas[l];
    p.gamma = gammas[g];
    return p;
  }
};

inline FitGrid default_grid(int k, AmplitudeScale scale = AmplitudeScale::Unit) {
  if (k < 1) throw InvalidArgumentError("default_grid: k must be >= 1");
  constexpr double pi = std::numbers::pi;
  FitGrid grid;
  grid.amplitudes = {-1.0, -0.5, 0.0, 0.5, 1.0};
  for (int x = 1; x <= k; ++x) {
    for (int y = 1; y <= k; ++y) grid.centers.emplace_back(x, y);
  }
  grid.thetas = {0.0, pi / 4, pi / 2, 3 * pi / 4};
  grid.psis = grid.thetas;
  grid.sigmas = {1, 2, 3, 4, 5};
  grid.lambdas = {1, 2, 3, 4, 5};
  grid.gammas = {0.2, 0.4, 0.6, 0.8, 1.0};
  grid.amplitude_scale = scale;
  return grid;
}

struct FitResult {
  GaborParams params;
  double l2_distance = 0.0;
  std::size_t candidate_index = 0;
};

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double l2_distance(const Kernel2D& a, const Kernel2D& b) {
  if (a.k() != b.k()) throw DimensionError("l2_distance: side mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

/// Exhaustive nearest-candidate search with the unit-amplitude kernels of
/// every grid shape tabulated once up front. Reusable across targets of
/// the same side length.
class GaborFitter {
 public:
  GaborFitter(FitGrid grid, int k) : grid_(std::move(grid)), k_(k) {
    if (grid_.empty()) throw InvalidArgumentError("fit grid is empty");
    if (k < 1) throw InvalidArgumentError("fit: k must be >= 1");
    const std::size_t area = static_cast<std::size_t>(k) * static_cast<std::size_t>(k);
    const std::size_t shapes = grid_.shape_count();
    units_.resize(shapes * area);
    vanishes_.assign(shapes, true);
    for (std::size_t s = 0; s < shapes; ++s) {
      const GaborParams p = grid_.candidate(s);  // amplitude index 0; amplitude unused
      double* dst = units_.data() + s * area;
      for (int y = 1; y <= k; ++y) {
        for (int x = 1; x <= k; ++x) {
          const double v = gabor_unit_value(p, x, y);
          dst[(y - 1) * k + (x - 1)] = v;
          if (v != 0.0) vanishes_[s] = false;
        }
      }
    }
  }

  const FitGrid& grid() const { return grid_; }
  int k() const { return k_; }

  FitResult fit(const Kernel2D& target) const {
    if (target.k() != k_) {
      throw DimensionError("fit: target side " + std::to_string(target.k()) + " != " + std::to_string(k_));
    }
    const std::size_t area = target.size();
    const std::size_t shapes = grid_.shape_count();
    const double scale =
        grid_.amplitude_scale == AmplitudeScale::PerKernelMaxAbs ? max_abs(target.values()) : 1.0;
    const double* t = target.values().data();

    double best = std::numeric_limits<double>::infinity();
    std::size_t best_index = 0;
    for (std::size_t ai = 0; ai < grid_.amplitudes.size(); ++ai) {
      const double amp = grid_.amplitudes[ai] * scale;
      for (std::size_t s = 0; s < shapes; ++s) {
        // A shape that is zero on the whole grid gives the zero kernel at any
        // amplitude; only the a = 0 entries represent that kernel.
        if (vanishes_[s] && amp != 0.0) continue;
        const double* u = units_.data() + s * area;
        double acc = 0.0;
        for (std::size_t i = 0; i < area; ++i) {
          const double d = t[i] - amp * u[i];
          acc += d * d;
        }
        if (acc < best) {
          best = acc;
          best_index = ai * shapes + s;
        }
      }
    }
    FitResult r;
    r.candidate_index = best_index;
    r.params = grid_.candidate(best_index, scale);
    r.l2_distance = l2_distance(target, synth_kernel(r.params, k_));
    return r;
  }

 private:
  FitGrid grid_;
  int k_;
  std::vector<double> units_;
  std::vector<bool> vanishes_;
};

inline FitResult fit_kernel(const Kernel2D& target, const FitGrid& grid) {
  return GaborFitter(grid, target.k()).fit(target);
}

/// Fitted parameters for every (out, in) kernel of a conv weight tensor.
struct LayerFit {
  std::size_t n_out = 0;
  std::size_t n_in = 0;
  int k = 0;
  std::vector<FitResult> results;  // index o * n_in + i

  const FitResult& at(std::size_t o, std::size_t i) const { return results.at(o * n_in + i); }
};

template <class T>
Kernel2D kernel_slice(const Tensor4<T>& weights, std::size_t o, std::size_t i) {
  const int k = static_cast<int>(weights.h());
  Kernel2D out(k);
  const T* src = weights.plane(o, i);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<double>(src[j]);
  return out;
}

/// Fits each k x k slice independently. `workers` > 1 fans kernels out
/// across threads; the result does not depend on the worker count.
template <class T>
LayerFit fit_layer(const Tensor4<T>& weights, const FitGrid& grid, unsigned workers = 1) {
  if (weights.h() != weights.w()) {
    throw DimensionError("fit_layer: non-square kernels " + dims_string(weights.dims()));
  }
  if (weights.h() == 0) throw DimensionError("fit_layer: empty kernels");
  LayerFit fit;
  fit.n_out = weights.n();
  fit.n_in = weights.c();
  fit.k = static_cast<int>(weights.h());
  fit.results.resize(fit.n_out * fit.n_in);
  if (fit.results.empty()) return fit;

  const GaborFitter fitter(grid, fit.k);
  const std::size_t total = fit.results.size();
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      fit.results[idx] = fitter.fit(kernel_slice(weights, idx / fit.n_in, idx % fit.n_in));
    }
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(total)));
  if (workers == 1) {
    run(0, total);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (total + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t b = w * chunk;
      const std::size_t e = std::min(total, b + chunk);
      if (b < e) pool.emplace_back(run, b, e);
    }
  }
  return fit;
}

}  // namespace gabornet
