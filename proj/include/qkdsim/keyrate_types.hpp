#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace qkdsim {

/// Sifted detection and error counts for one finite-key block, per intensity
/// class (index order: signal, decoy, vacuum). Counts are integral when they
/// come from the pulse-level Monte Carlo and real-valued in expected-value
/// mode.
struct BlockCounts {
  std::array<double, 3> sifted{};        // majority basis
  std::array<double, 3> errors{};        // majority basis
  std::array<double, 3> sifted_minor{};  // minority basis
  std::array<double, 3> errors_minor{};  // minority basis
  double duration_s = 0.0;

  [[nodiscard]] double sifted_total() const {
    return sifted[0] + sifted[1] + sifted[2];
  }
  [[nodiscard]] double errors_total() const {
    return errors[0] + errors[1] + errors[2];
  }
  [[nodiscard]] double qber_majority() const {
    const double n = sifted_total();
    return n > 0.0 ? errors_total() / n : 0.0;
  }
  BlockCounts& operator+=(const BlockCounts& o) {
    for (int k = 0; k < 3; ++k) {
      sifted[k] += o.sifted[k];
      errors[k] += o.errors[k];
      sifted_minor[k] += o.sifted_minor[k];
      errors_minor[k] += o.errors_minor[k];
    }
    duration_s += o.duration_s;
    return *this;
  }
};

/// Secure-key result with every bound intermediate named.
struct KeyRateReport {
  double secure_bits = 0.0;
  double secure_rate_hz = 0.0;
  double qber_majority = 0.0;

  // Bound intermediates.
  double s0 = 0.0;      // vacuum-event lower bound (signal class, majority basis)
  double s1 = 0.0;      // single-photon lower bound (signal class, majority basis)
  double phi1 = 0.0;    // single-photon phase-error upper bound
  double lambda_ec = 0.0;   // error-correction leakage f_ec * n_sig * h(E_sig)
  double delta_fk = 0.0;    // composable finite-key penalty
  double s0_all = 0.0;  // vacuum bound over all classes, majority basis
  double s1_all = 0.0;  // single-photon bound over all classes, majority basis
  double s1_minor = 0.0;    // single-photon bound, minority basis
  double v1_minor = 0.0;    // single-photon error upper bound, minority basis
  double gamma_penalty = 0.0;  // sampling correction added to the phase error
  double n_signal = 0.0;
  double block_duration_s = 0.0;

  bool zero_key = false;
  std::string diagnostic;

  [[nodiscard]] std::string to_json(int indent = 2) const;
};

}  // namespace qkdsim
