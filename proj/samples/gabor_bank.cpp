// Prints a small bank of 7x7 Gabor kernels at four orientations.
#include <cstdio>
#include <numbers>

#include "gabornet/gabor.hpp"

int main() {
  using namespace gabornet;
  constexpr int k = 7;
  for (int t = 0; t < 4; ++t) {
    GaborParams p;
    p.a = 1.0;
    p.theta = t * std::numbers::pi / 4;
    p.psi = 0.0;
    p.sigma = 2.0;
    p.lambda = 4.0;
    p.gamma = 0.5;
    p.x0 = p.y0 = 4.0;
    const Kernel2D g = synth_kernel(p, k);
    std::printf("theta = %d*pi/4\n", t);
    for (int y = 1; y <= k; ++y) {
      for (int x = 1; x <= k; ++x) std::printf("%7.3f", g.at(x, y));
      std::printf("\n");
    }
    std::printf("\n");
  }
}
