#include "qkdsim/rng.hpp"

#include <cmath>

namespace qkdsim {

double RandomStream::exponential(double mean) {
  if (mean <= 0.0) return 0.0;
  // uniform() is in [0,1) so the argument of log1p stays in (-1, 0].
  return -mean * std::log1p(-uniform());
}

namespace {

std::uint64_t poisson_knuth(RandomStream& rng, double mean) {
  const double limit = std::exp(-mean);
  std::uint64_t k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= rng.uniform();
  } while (p > limit);
  return k - 1;
}

}  // namespace

std::uint64_t RandomStream::poisson(double mean) {
  if (!(mean > 0.0)) return 0;
  std::uint64_t total = 0;
  // Poisson(a + b) = Poisson(a) + Poisson(b): draw in chunks that keep
  // exp(-chunk) comfortably inside double range.
  while (mean > 30.0) {
    total += poisson_knuth(*this, 30.0);
    mean -= 30.0;
  }
  total += poisson_knuth(*this, mean);
  return total;
}

}  // namespace qkdsim
