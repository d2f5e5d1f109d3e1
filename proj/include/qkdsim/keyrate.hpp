#pragma once

#include "qkdsim/config.hpp"
#include "qkdsim/keyrate_types.hpp"
#include "qkdsim/link_model.hpp"

namespace qkdsim {

struct DecoyBounds {
  double s0 = 0.0;        // vacuum events, signal class, majority basis (lower bound)
  double s1 = 0.0;        // single-photon events, signal class, majority basis (lower bound)
  double phi1 = 0.0;      // single-photon phase-error rate (upper bound)
  double s0_all = 0.0;    // vacuum events over all classes, majority basis
  double s1_all = 0.0;    // single-photon events over all classes, majority basis
  double s1_minor = 0.0;  // single-photon events, minority basis (lower bound)
  double v1_minor = 0.0;  // single-photon errors, minority basis (upper bound)
  double gamma_penalty = 0.0;
  bool crossover = false;  // a bound collapsed to zero
  std::string diagnostic;
};

/// Vacuum + weak-decoy closed-form bounds with Hoeffding concentration at
/// confidence derived from eps_sec. Bound crossovers (negative intermediate
/// estimates) clamp to zero and set the `crossover` flag instead of throwing.
DecoyBounds decoy_bounds(const BlockCounts& counts, const ProtocolConfig& protocol,
                         const FiniteKeyConfig& fk);

/// Secure key length for one block:
///   l = s0 + s1 * (1 - h(phi1)) - f_ec * n_sig * h(E_sig) - Delta(eps_sec),
/// clamped at zero, with Delta = 6*log2(19/eps_sec) + log2(2/eps_cor) and
/// eps_cor = eps_sec.
KeyRateReport secure_key_length(const BlockCounts& counts,
                                const ProtocolConfig& protocol,
                                const FiniteKeyConfig& fk);

/// Same formula with every finite-size penalty removed and expected values in
/// place of counts: the infinite-key reference rate in bit/s.
double asymptotic_key_rate(const OperatingPoint& op);

/// Convenience: analytic secure rate at an operating point, evaluated on one
/// expected-value block of fk.block_bits majority-basis sifted bits.
KeyRateReport analytic_key_report(const OperatingPoint& op, const FiniteKeyConfig& fk);

}  // namespace qkdsim
