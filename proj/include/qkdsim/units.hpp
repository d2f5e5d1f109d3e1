#pragma once

#include <cmath>
#include <stdexcept>

namespace qkdsim {

/// Power transmittance of a loss expressed in dB: 10^(-loss/10).
inline double db_to_transmittance(double loss_db) {
  if (!std::isfinite(loss_db)) {
    throw std::invalid_argument("db_to_transmittance: loss must be finite");
  }
  return std::pow(10.0, -loss_db / 10.0);
}

/// Inverse of db_to_transmittance, for t in (0, inf).
inline double transmittance_to_db(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw std::invalid_argument("transmittance_to_db: t must be positive");
  }
  return -10.0 * std::log10(t);
}

/// Binary entropy in bits, h(0) = h(1) = 0.
inline double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::domain_error("binary_entropy: p must lie in [0, 1]");
  }
  if (p == 0.0 || p == 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

}  // namespace qkdsim
