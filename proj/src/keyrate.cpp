#include "qkdsim/keyrate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "qkdsim/units.hpp"

namespace qkdsim {

namespace {

constexpr double kEpsBudget = 19.0;  // matches the 6*log2(19/eps) penalty term

/// Hoeffding deviation for a sum of n indicator variables at confidence eps.
double hoeffding(double n, double eps) {
  if (n <= 0.0) return 0.0;
  return std::sqrt(0.5 * n * std::log(1.0 / eps));
}

/// Poisson mixture weight: probability that an emitted pulse carries n
/// photons, summed over intensity classes.
double tau_n(const ProtocolConfig& p, int n) {
  double t = 0.0;
  for (const auto k : kIntensityClasses) {
    const double mu = p.mu(k);
    double term = std::exp(-mu);
    for (int i = 1; i <= n; ++i) term *= mu / i;
    t += p.prob(k) * term;
  }
  return t;
}

/// Random-sampling correction transferring an error rate observed on a
/// sample of size c to a disjoint sample of size d.
double gamma_correction(double eps, double ratio, double c, double d) {
  if (c <= 0.0 || d <= 0.0) return 0.5;
  const double b = std::clamp(ratio, 1e-12, 0.5);
  const double arg = (c + d) / (c * d * (1.0 - b) * b) * (kEpsBudget / eps) *
                     (kEpsBudget / eps);
  const double log_term = std::log2(std::max(arg, 2.0));
  return std::sqrt((c + d) * (1.0 - b) * b / (c * d * std::numbers::ln2) * log_term);
}

struct ScaledCounts {
  std::array<double, 3> plus;   // e^{mu_k}/p_k * (n_k + delta_k)
  std::array<double, 3> minus;  // e^{mu_k}/p_k * (n_k - delta_k)
};

ScaledCounts scale(const std::array<double, 3>& n, const ProtocolConfig& p,
                   double eps) {
  ScaledCounts s;
  for (int k = 0; k < 3; ++k) {
    const auto cls = static_cast<IntensityClass>(k);
    const double scale_k = std::exp(p.mu(cls)) / p.prob(cls);
    const double delta = hoeffding(n[k], eps);
    s.plus[k] = scale_k * (n[k] + delta);
    s.minus[k] = scale_k * (n[k] - delta);
  }
  return s;
}

/// Vacuum + weak-decoy closed forms on one basis' scaled counts.
struct BasisBounds {
  double s0 = 0.0;
  double s1 = 0.0;
};

BasisBounds basis_bounds(const ScaledCounts& sc, const ProtocolConfig& p) {
  const double mu_s = p.mu_signal, mu_d = p.mu_decoy, mu_v = p.mu_vacuum;
  const double t0 = tau_n(p, 0), t1 = tau_n(p, 1);
  BasisBounds b;
  b.s0 = std::max(0.0, t0 * (mu_d * sc.minus[2] - mu_v * sc.plus[1]) / (mu_d - mu_v));
  const double denom = mu_s * (mu_d - mu_v) - mu_d * mu_d + mu_v * mu_v;
  const double inner = sc.minus[1] - sc.plus[2] -
                       (mu_d * mu_d - mu_v * mu_v) / (mu_s * mu_s) *
                           (sc.plus[0] - b.s0 / t0);
  b.s1 = std::max(0.0, t1 * mu_s * inner / denom);
  return b;
}

}  // namespace

namespace detail {

DecoyBounds decoy_bounds_impl(const BlockCounts& counts,
                              const ProtocolConfig& protocol,
                              const FiniteKeyConfig& fk, bool asymptotic);

}  // namespace detail

DecoyBounds decoy_bounds(const BlockCounts& counts, const ProtocolConfig& protocol,
                         const FiniteKeyConfig& fk) {
  return detail::decoy_bounds_impl(counts, protocol, fk, false);
}

DecoyBounds detail::decoy_bounds_impl(const BlockCounts& counts,
                                      const ProtocolConfig& protocol,
                                      const FiniteKeyConfig& fk, bool asymptotic) {
  DecoyBounds out;
  const double eps = asymptotic ? 1.0 : fk.eps_sec / kEpsBudget;
  const double mu_s = protocol.mu_signal;
  if (!(mu_s > protocol.mu_decoy && protocol.mu_decoy > protocol.mu_vacuum)) {
    throw ConfigError("decoy_bounds: needs three distinct intensities");
  }

  // Vacuum and single-photon events in the majority-basis sample, all
  // classes, from the vacuum + weak-decoy closed forms.
  const BasisBounds z = basis_bounds(scale(counts.sifted, protocol, eps), protocol);
  out.s0_all = z.s0;
  out.s1_all = z.s1;

  // Allocate the all-class bounds to the signal class: n-photon pulses
  // distribute over intensity classes with fixed Poisson weights,
  // independently of the channel.
  const double w0 = protocol.p_signal * std::exp(-mu_s) / tau_n(protocol, 0);
  const double w1 = protocol.p_signal * std::exp(-mu_s) * mu_s / tau_n(protocol, 1);
  auto lower = [&](double m) { return std::max(0.0, m - hoeffding(m, eps)); };
  out.s0 = lower(w0 * z.s0);
  out.s1 = lower(w1 * z.s1);

  // Basis choices are independent of photon number, so the detected
  // single-photon (and vacuum) events split binomially between the bases
  // with the known sifting weights; this transfers the majority-basis decoy
  // bounds onto the scarce minority sample.
  const double b = protocol.basis_bias;
  const double w_major = b * b / (b * b + (1.0 - b) * (1.0 - b));
  const double rho = (1.0 - w_major) / w_major;
  const double s1_x_all = lower(rho * z.s1);
  out.s1_minor = lower(w1 * s1_x_all);
  const double s0_x_sig = lower(w0 * lower(rho * z.s0));

  // Errors among minority-basis signal-class singles: every observed error
  // could be one, minus at least half of the vacuum events (their outcomes
  // are uniformly random).
  const double m_x_sig = counts.errors_minor[0];
  const double vacuum_errors = lower(0.5 * s0_x_sig);
  out.v1_minor =
      std::clamp(m_x_sig - vacuum_errors, 0.0, std::max(0.0, out.s1_minor));

  if (out.s1 <= 0.0 || out.s1_minor <= 0.0) {
    out.crossover = true;
    out.phi1 = 0.5;
    out.diagnostic = out.s1 <= 0.0 ? "single-photon bound collapsed to zero"
                                   : "no minority-basis single-photon statistics";
    return out;
  }

  const double ratio = out.v1_minor / out.s1_minor;
  out.gamma_penalty =
      asymptotic ? 0.0 : gamma_correction(eps, ratio, out.s1_minor, out.s1);
  out.phi1 = std::clamp(ratio + out.gamma_penalty, 0.0, 0.5);
  return out;
}

KeyRateReport secure_key_length(const BlockCounts& counts,
                                const ProtocolConfig& protocol,
                                const FiniteKeyConfig& fk) {
  const DecoyBounds b = decoy_bounds(counts, protocol, fk);

  KeyRateReport r;
  r.qber_majority = counts.qber_majority();
  r.s0 = b.s0;
  r.s1 = b.s1;
  r.phi1 = b.phi1;
  r.s0_all = b.s0_all;
  r.s1_all = b.s1_all;
  r.s1_minor = b.s1_minor;
  r.v1_minor = b.v1_minor;
  r.gamma_penalty = b.gamma_penalty;
  r.n_signal = counts.sifted[0];
  r.block_duration_s = counts.duration_s;

  const double e_sig =
      counts.sifted[0] > 0.0 ? counts.errors[0] / counts.sifted[0] : 0.0;
  r.lambda_ec = fk.f_ec * counts.sifted[0] * binary_entropy(std::min(e_sig, 0.5));
  r.delta_fk = 6.0 * std::log2(kEpsBudget / fk.eps_sec) + std::log2(2.0 / fk.eps_sec);

  const double l = r.s0 + r.s1 * (1.0 - binary_entropy(r.phi1)) - r.lambda_ec -
                   r.delta_fk;
  r.secure_bits = std::max(0.0, l);
  r.secure_rate_hz =
      counts.duration_s > 0.0 ? r.secure_bits / counts.duration_s : 0.0;
  r.zero_key = r.secure_bits <= 0.0;
  if (b.crossover) {
    r.diagnostic = b.diagnostic;
  } else if (r.zero_key) {
    r.diagnostic = "key length non-positive after penalties";
  }
  return r;
}

double asymptotic_key_rate(const OperatingPoint& op) {
  const FiniteKeyConfig fk{};  // f_ec only; no finite-size penalty enters
  // Expected counts over one second; every term below is linear in the
  // duration once the concentration penalties are off.
  const BlockCounts counts = expected_block_counts(op, 1.0);
  const DecoyBounds b = detail::decoy_bounds_impl(counts, op.protocol, fk, true);
  const double e_sig =
      counts.sifted[0] > 0.0 ? counts.errors[0] / counts.sifted[0] : 0.0;
  const double lambda_ec =
      fk.f_ec * counts.sifted[0] * binary_entropy(std::min(e_sig, 0.5));
  const double rate = b.s0 + b.s1 * (1.0 - binary_entropy(b.phi1)) - lambda_ec;
  return std::max(0.0, rate);
}

KeyRateReport analytic_key_report(const OperatingPoint& op, const FiniteKeyConfig& fk) {
  const RateBreakdown rb = qber(op);
  const double maj_rate = rb.cls[0].sifted_rate_hz + rb.cls[1].sifted_rate_hz +
                          rb.cls[2].sifted_rate_hz;
  if (!(maj_rate > 0.0)) {
    KeyRateReport r;
    r.zero_key = true;
    r.diagnostic = "no sifted detections at this operating point";
    return r;
  }
  const double duration = fk.block_bits / maj_rate;
  return secure_key_length(expected_block_counts(op, duration), op.protocol, fk);
}

// ---------------------------------------------------------------------------

std::string KeyRateReport::to_json(int indent) const {
  nlohmann::json j{{"secure_bits", secure_bits},
                   {"secure_rate_hz", secure_rate_hz},
                   {"qber_majority", qber_majority},
                   {"s0", s0},
                   {"s1", s1},
                   {"phi1", phi1},
                   {"lambda_ec", lambda_ec},
                   {"delta_fk", delta_fk},
                   {"s0_all_classes", s0_all},
                   {"s1_all_classes", s1_all},
                   {"s1_minority", s1_minor},
                   {"v1_minority", v1_minor},
                   {"gamma_penalty", gamma_penalty},
                   {"n_signal_sifted", n_signal},
                   {"block_duration_s", block_duration_s},
                   {"zero_key", zero_key}};
  if (!diagnostic.empty()) j["diagnostic"] = diagnostic;
  return j.dump(indent) + "\n";
}

}  // namespace qkdsim
