#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "gabornet/fitting.hpp"
#include "gabornet/rng.hpp"

using namespace gabornet;

namespace {

struct OracleHit {
  std::size_t index = 0;
  double sq = std::numeric_limits<double>::infinity();
};

// Naive search: nested loops in the documented order (a, center, theta, psi,
// sigma, lambda, gamma), each candidate evaluated from the formula.
OracleHit brute_force(const Kernel2D& target, const FitGrid& g, double scale) {
  const int k = target.k();
  OracleHit best;
  std::size_t idx = 0;
  for (double a0 : g.amplitudes) {
    for (auto [cx, cy] : g.centers) {
      for (double th : g.thetas) {
        for (double ps : g.psis) {
          for (double sg : g.sigmas) {
            for (double lm : g.lambdas) {
              for (double gm : g.gammas) {
                const double a = a0 * scale;
                double sq = 0.0;
                bool all_zero = true;
                for (int y = 1; y <= k; ++y) {
                  for (int x = 1; x <= k; ++x) {
                    const double X = x - cx, Y = y - cy;
                    const double xr = X * std::cos(th) + Y * std::sin(th);
                    const double yr = -X * std::sin(th) + Y * std::cos(th);
                    double wave = std::cos(2 * std::numbers::pi * xr / lm + ps);
                    if (std::abs(wave) < 1e-12) wave = 0.0;
                    const double env = std::exp(-(xr * xr + gm * yr * yr) / (2 * sg * sg));
                    all_zero = all_zero && env * wave == 0.0;
                    const double d = target.at(x, y) - a * env * wave;
                    sq += d * d;
                  }
                }
                // a vanishing shape stands for the zero kernel only at a = 0
                if (sq < best.sq && !(all_zero && a != 0.0)) best = {idx, sq};
                ++idx;
              }
            }
          }
        }
      }
    }
  }
  return best;
}

Kernel2D random_kernel(int k, Rng& rng, double scale = 0.5) {
  Kernel2D t(k);
  for (auto& v : t.values()) v = scale * normal(rng);
  return t;
}

}  // namespace

TEST(Grid, CandidateCounts) {
  EXPECT_EQ(default_grid(7).size(), 490000u);
  EXPECT_EQ(default_grid(1).size(), 10000u);
  EXPECT_EQ(default_grid(3).size(), 5u * 9 * 4 * 4 * 5 * 5 * 5);
}

TEST(Grid, ContainsZeroAmplitude) {
  const FitGrid g = default_grid(7);
  bool found = false;
  for (double a : g.amplitudes) found |= a == 0.0;
  EXPECT_TRUE(found);
}

TEST(Grid, EnumerationOrderGammaInnermost) {
  const FitGrid g = default_grid(3);
  EXPECT_EQ(g.candidate(0).gamma, 0.2);
  EXPECT_EQ(g.candidate(1).gamma, 0.4);
  EXPECT_EQ(g.candidate(5).lambda, 2.0);
  EXPECT_EQ(g.candidate(0).a, -1.0);
  EXPECT_EQ(g.candidate(g.shape_count()).a, -0.5);
  EXPECT_EQ(g.candidate(g.size() - 1).a, 1.0);
  EXPECT_EQ(g.candidate(g.size() - 1).x0, 3.0);
}

TEST(Fit, ZeroTargetPicksFirstZeroAmplitudeCandidate) {
  const FitGrid g = default_grid(5);
  const FitResult r = fit_kernel(Kernel2D(5), g);
  EXPECT_EQ(r.params.a, 0.0);
  EXPECT_EQ(r.l2_distance, 0.0);
  EXPECT_EQ(r.candidate_index, 2 * g.shape_count());
}

TEST(Fit, VanishingShapeIsExactlyZero) {
  GaborParams p;
  p.a = 1.0;
  p.lambda = 2.0;
  p.psi = std::numbers::pi / 2;
  p.theta = std::numbers::pi / 2;
  p.x0 = 2.0;
  p.y0 = 3.0;
  EXPECT_EQ(synth_kernel(p, 5), Kernel2D(5));
}

TEST(Fit, SmallTargetsFitZeroAmplitudeNotVanishingShape) {
  // Vanishing shapes used to beat a = 0 by rounding noise on tiny targets.
  const FitGrid g = default_grid(7);
  const GaborFitter fitter(g, 7);
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    const Kernel2D target = random_kernel(7, rng, 0.01);
    const FitResult r = fitter.fit(target);
    EXPECT_EQ(r.params.a, 0.0);
    EXPECT_EQ(r.candidate_index, 2 * g.shape_count());
    EXPECT_EQ(r.l2_distance, l2_distance(target, Kernel2D(7)));
  }
}

TEST(Fit, ExactGridMembersRecovered) {
  const FitGrid g = default_grid(5);
  const GaborFitter fitter(g, 5);
  Rng rng(21);
  for (int t = 0; t < 30; ++t) {
    const std::size_t idx = uniform_index(rng, g.size());
    const Kernel2D target = synth_kernel(g.candidate(idx), 5);
    const FitResult r = fitter.fit(target);
    EXPECT_EQ(r.l2_distance, 0.0);
    EXPECT_EQ(synth_kernel(r.params, 5), target);
  }
}

TEST(Fit, PerturbedTargetMatchesBruteForce) {
  const FitGrid g = default_grid(3);
  const GaborFitter fitter(g, 3);
  Rng rng(8);
  for (int t = 0; t < 10; ++t) {
    Kernel2D target = synth_kernel(g.candidate(uniform_index(rng, g.size())), 3);
    Kernel2D eps = random_kernel(3, rng, 1.0);
    double n = 0.0;
    for (double v : eps.values()) n += v * v;
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += 0.01 * eps[i] / std::sqrt(n);
    const FitResult r = fitter.fit(target);
    const OracleHit o = brute_force(target, g, 1.0);
    EXPECT_EQ(r.candidate_index, o.index);
    EXPECT_NEAR(r.l2_distance, std::sqrt(o.sq), 1e-12);
  }
}

TEST(Fit, RandomTargetsMatchBruteForceBothModes) {
  const FitGrid unit = default_grid(3);
  const FitGrid scaled = default_grid(3, AmplitudeScale::PerKernelMaxAbs);
  Rng rng(9);
  for (int t = 0; t < 5; ++t) {
    const Kernel2D target = random_kernel(3, rng, 0.3);
    const OracleHit o1 = brute_force(target, unit, 1.0);
    EXPECT_EQ(fit_kernel(target, unit).candidate_index, o1.index);
    const OracleHit o2 = brute_force(target, scaled, max_abs(target.values()));
    const FitResult r2 = fit_kernel(target, scaled);
    EXPECT_EQ(r2.candidate_index, o2.index);
    EXPECT_NEAR(std::abs(r2.params.a), max_abs(target.values()) * std::abs(unit.candidate(o2.index).a), 1e-15);
  }
}

TEST(Fit, StoredDistanceMatchesRecomputation) {
  const FitGrid g = default_grid(5);
  const GaborFitter fitter(g, 5);
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    const Kernel2D target = random_kernel(5, rng);
    const FitResult r = fitter.fit(target);
    EXPECT_NEAR(r.l2_distance, l2_distance(target, synth_kernel(r.params, 5)), 1e-12);
  }
}

TEST(Fit, SevenByOneNoSampledCandidateIsBetter) {
  const FitGrid g = default_grid(7);
  const GaborFitter fitter(g, 7);
  Rng rng(12);
  const Kernel2D target = random_kernel(7, rng, 0.4);
  const FitResult r = fitter.fit(target);
  for (int s = 0; s < 1000; ++s) {
    const GaborParams c = g.candidate(uniform_index(rng, g.size()));
    EXPECT_GE(l2_distance(target, synth_kernel(c, 7)), r.l2_distance);
  }
}

TEST(Fit, Idempotent) {
  const FitGrid g = default_grid(5);
  const GaborFitter fitter(g, 5);
  Rng rng(13);
  const FitResult r = fitter.fit(random_kernel(5, rng));
  const FitResult again = fitter.fit(synth_kernel(r.params, 5));
  EXPECT_EQ(again.l2_distance, 0.0);
}

TEST(Fit, EmptyGridRejected) {
  FitGrid g = default_grid(3);
  g.gammas.clear();
  EXPECT_THROW(fit_kernel(Kernel2D(3), g), InvalidArgumentError);
}

TEST(Fit, SideMismatchRejected) {
  const GaborFitter fitter(default_grid(3), 3);
  EXPECT_THROW(fitter.fit(Kernel2D(5)), DimensionError);
}

TEST(FitLayer, MatchesPlainLoopAndAnyWorkerCount) {
  Rng rng(17);
  Tensor4<float> w(4, 3, 5, 5);
  for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<float>(0.4 * normal(rng));
  const FitGrid g = default_grid(5);
  const LayerFit serial = fit_layer(w, g, 1);
  const LayerFit par = fit_layer(w, g, 3);
  ASSERT_EQ(serial.results.size(), 12u);
  for (std::size_t o = 0; o < 4; ++o) {
    for (std::size_t i = 0; i < 3; ++i) {
      const FitResult ref = fit_kernel(kernel_slice(w, o, i), g);
      EXPECT_EQ(serial.at(o, i).candidate_index, ref.candidate_index);
      EXPECT_EQ(serial.at(o, i).params, ref.params);
      EXPECT_EQ(par.at(o, i).candidate_index, ref.candidate_index);
      EXPECT_EQ(par.at(o, i).l2_distance, ref.l2_distance);
    }
  }
}

TEST(FitLayer, AllZeroWeights) {
  const LayerFit f = fit_layer(Tensor4<double>(2, 3, 3, 3), default_grid(3));
  for (const auto& r : f.results) {
    EXPECT_EQ(r.params.a, 0.0);
    EXPECT_EQ(r.l2_distance, 0.0);
  }
}

TEST(FitLayer, SynthesizedMembersFitExactly) {
  const FitGrid g = default_grid(7);
  Tensor4<double> w(2, 3, 7, 7);
  Rng rng(19);
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t i = 0; i < 3; ++i) {
      const Kernel2D s = synth_kernel(g.candidate(uniform_index(rng, g.size())), 7);
      std::copy(s.values().begin(), s.values().end(), w.plane(o, i));
    }
  }
  for (const auto& r : fit_layer(w, g).results) EXPECT_EQ(r.l2_distance, 0.0);
}

TEST(FitLayer, NonSquareRejected) {
  EXPECT_THROW(fit_layer(Tensor4<float>(1, 1, 3, 5), default_grid(3)), DimensionError);
}
