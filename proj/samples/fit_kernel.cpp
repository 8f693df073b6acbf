// Fits a noisy Gabor kernel back onto the default 5x5 candidate grid.
#include <cstdio>

#include "gabornet/fitting.hpp"
#include "gabornet/rng.hpp"

int main() {
  using namespace gabornet;
  constexpr int k = 5;
  const FitGrid grid = default_grid(k);
  const GaborParams truth = grid.candidate(grid.size() - 1234);
  Kernel2D target = synth_kernel(truth, k);
  Rng rng(7);
  for (auto& v : target.values()) v += 0.02 * normal(rng);

  const FitResult r = fit_kernel(target, grid);
  std::printf("grid size %zu, best candidate %zu (truth %zu), L2 %.4f\n", grid.size(), r.candidate_index,
              grid.size() - 1234, r.l2_distance);
  for (std::size_t i = 0; i < GaborParams::kCount; ++i) {
    std::printf("  %-6s fitted %8.4f  truth %8.4f\n", GaborParams::kNames[i], r.params[i], truth[i]);
  }
}
