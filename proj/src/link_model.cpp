#include "qkdsim/link_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "qkdsim/units.hpp"

namespace qkdsim {

namespace {

struct LinkParams {
  double eta_sys;    // SPDE x losses (full flux)
  double eta_eff;    // eta_sys x interfering-bin acceptance
  double visibility;
  double dark_det;   // dark click probability per gate, per detector
  double ap_total;
  double p_ct_sync;  // synchronous crosstalk probability per avalanche
  double p_ct_async; // asynchronous counterpart (victim liveness applied later)
  std::uint32_t deadtime_gates;
  double trap_tau_gates;
  double rep_hz;
  double bias;       // majority-basis probability
  std::array<double, 3> mu;
  std::array<double, 3> prob;
};

LinkParams make_params(const OperatingPoint& op) {
  if (op.detectors.n_pixels != 2) {
    throw ConfigError("link model: the operating point needs exactly two detector pixels");
  }
  LinkParams lp{};
  const auto& d0 = op.detectors.pixel(0);
  const auto& d1 = op.detectors.pixel(1);
  const double spde = 0.5 * (d0.spde + d1.spde);
  lp.eta_sys = spde * db_to_transmittance(op.channel.total_db() +
                                          op.receiver.insertion_loss_db);
  lp.eta_eff = lp.eta_sys * op.receiver.timebin_acceptance;
  lp.visibility = op.receiver.visibility;
  lp.dark_det = 0.5 * (d0.dark_prob_per_gate() + d1.dark_prob_per_gate());
  lp.ap_total = 0.5 * (d0.afterpulse_total + d1.afterpulse_total);
  lp.p_ct_sync = sync_crosstalk_probability(op.detectors);
  // With a universal dead time the trailing stimuli always find the victim
  // blanked; otherwise they count as extra noise clicks.
  lp.p_ct_async = op.detectors.universal_deadtime
                      ? 0.0
                      : async_crosstalk_probability(op.detectors);
  lp.deadtime_gates = std::max(d0.deadtime_gates(), d1.deadtime_gates());
  lp.trap_tau_gates = 0.5 * (d0.trap_tau_ns + d1.trap_tau_ns) / d0.gate_period_ns();
  lp.rep_hz = op.protocol.rep_rate_hz();
  lp.bias = op.protocol.basis_bias;
  lp.mu = {op.protocol.mu_signal, op.protocol.mu_decoy, op.protocol.mu_vacuum};
  lp.prob = {op.protocol.p_signal, op.protocol.p_decoy, op.protocol.p_vacuum};
  return lp;
}

/// Cause probability per live gate for one detector: photon flux m on top of
/// the combined noise probability nu. Written additively so tiny m and nu
/// keep full precision.
inline double cause_prob(double m, double nu) {
  return nu + (1.0 - nu) * -std::expm1(-m);
}

/// Self-consistent dead-time / afterpulse / crosstalk state.
struct Stationary {
  double q_bar = 0.0;   // cause probability per live gate, per detector
  double r = 0.0;       // detected avalanches per gate, per detector
  double theta = 1.0;   // live probability
  double alpha = 0.0;   // realized afterpulses per avalanche
  double nu = 0.0;      // noise cause probability per live gate
  double c_dark = 0.0, c_ap = 0.0, c_ct = 0.0;  // nu components
};

Stationary solve_stationary(const LinkParams& lp) {
  Stationary st;
  st.c_dark = lp.dark_det;
  const double match = lp.bias * lp.bias + (1.0 - lp.bias) * (1.0 - lp.bias);
  const double mismatch = 1.0 - match;
  for (int iter = 0; iter < 200; ++iter) {
    st.nu = st.c_dark + st.c_ap + st.c_ct - st.c_dark * st.c_ap -
             st.c_dark * st.c_ct - st.c_ap * st.c_ct +
             st.c_dark * st.c_ap * st.c_ct;
    double q = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double flux = lp.mu[k] * lp.eta_eff;
      const double m_hi = flux * (1.0 + lp.visibility) / 2.0;
      const double m_lo = flux * (1.0 - lp.visibility) / 2.0;
      const double q_matched =
          0.5 * (cause_prob(m_hi, st.nu) + cause_prob(m_lo, st.nu));
      const double q_mixed = cause_prob(flux / 2.0, st.nu);
      q += lp.prob[k] * (match * q_matched + mismatch * q_mixed);
    }
    const double dead_span = static_cast<double>(lp.deadtime_gates) - 1.0;
    const double r = q / (1.0 + q * dead_span);
    const double theta = 1.0 / (1.0 + q * dead_span);
    const double alpha = afterpulse_realized_fraction(q, lp.deadtime_gates,
                                                      lp.trap_tau_gates, lp.ap_total);
    const double c_ap = theta > 0.0 ? alpha * r / theta : 0.0;
    const double c_ct = (lp.p_ct_sync + lp.p_ct_async) * r;
    const double delta = std::abs(c_ap - st.c_ap) + std::abs(c_ct - st.c_ct) +
                         std::abs(q - st.q_bar);
    st.q_bar = q;
    st.r = r;
    st.theta = theta;
    st.alpha = alpha;
    st.c_ap = c_ap;
    st.c_ct = c_ct;
    if (delta < 1e-16) break;
  }
  st.nu = st.c_dark + st.c_ap + st.c_ct - st.c_dark * st.c_ap -
             st.c_dark * st.c_ct - st.c_ap * st.c_ct +
             st.c_dark * st.c_ap * st.c_ct;
  return st;
}

}  // namespace

namespace {

double mean_intrinsic_crosstalk(const ArrayConfig& array) {
  if (array.n_pixels < 2 || array.crosstalk_intrinsic.size() == 0) return 0.0;
  double sum = 0.0;
  int count = 0;
  for (int i = 0; i < array.n_pixels; ++i) {
    for (int j = 0; j < array.n_pixels; ++j) {
      if (i == j) continue;
      sum += array.crosstalk_intrinsic(i, j);
      ++count;
    }
  }
  return count > 0 ? sum / count : 0.0;
}

}  // namespace

double sync_crosstalk_probability(const ArrayConfig& array) {
  const double intrinsic = mean_intrinsic_crosstalk(array);
  if (intrinsic <= 0.0) return 0.0;
  // Emission at the aggressor's window midpoint: the stimulus lands in the
  // same window only if the formation delay is shorter than half the width.
  const double half_width = 0.5 * array.pixel(0).gate_width_ns();
  return intrinsic * -std::expm1(-half_width / array.formation_tau_ns);
}

double async_crosstalk_probability(const ArrayConfig& array) {
  const double intrinsic = mean_intrinsic_crosstalk(array);
  if (intrinsic <= 0.0) return 0.0;
  const double period = array.pixel(0).gate_period_ns();
  const double width = array.pixel(0).gate_width_ns();
  const double tau = array.formation_tau_ns;
  // Probability the delay from the window midpoint lands inside the window
  // of some later gate: sum_k [exp(-(kT - w/2)/tau) - exp(-(kT + w/2)/tau)].
  const double per_gate = std::exp(-period / tau);
  if (per_gate <= 0.0) return 0.0;
  const double window_term = 2.0 * std::sinh(0.5 * width / tau);
  return intrinsic * window_term * per_gate / (1.0 - per_gate);
}

double afterpulse_realized_fraction(double cause_prob, std::uint32_t deadtime_gates,
                                    double trap_tau_gates, double ap_total) {
  if (ap_total <= 0.0) return 0.0;
  const double beta = std::exp(-1.0 / trap_tau_gates);
  const double q = std::clamp(cause_prob, 0.0, 1.0);
  // Hazard mass after the dead time is geometric with ratio beta; a competing
  // click at probability q per live gate preempts it.
  const double fired_first = (1.0 - beta) / (1.0 - beta * (1.0 - q));
  // Preempted mass survives the fresh dead window attenuated by exp(-D/tau)
  // and competes again.
  const double revive = std::exp(-static_cast<double>(deadtime_gates) / trap_tau_gates);
  return ap_total * fired_first / (1.0 - (1.0 - fired_first) * revive);
}

double eta_system(const OperatingPoint& op) {
  if (op.detectors.n_pixels != 2) {
    throw ConfigError("eta_system: the operating point needs exactly two detector pixels");
  }
  const double spde =
      0.5 * (op.detectors.pixel(0).spde + op.detectors.pixel(1).spde);
  return spde *
         db_to_transmittance(op.channel.total_db() + op.receiver.insertion_loss_db);
}

double gain(double mu, const OperatingPoint& op) {
  if (!(mu >= 0.0)) throw std::invalid_argument("gain: mu must be >= 0");
  const LinkParams lp = make_params(op);
  const Stationary st = solve_stationary(lp);
  const double p_noise = 2.0 * (lp.dark_det + st.alpha * st.r);
  return 1.0 - (1.0 - p_noise) * std::exp(-mu * lp.eta_sys);
}

double saturate(double rate_in_hz, double deadtime_ns, int n_detectors) {
  if (!(rate_in_hz >= 0.0)) throw std::invalid_argument("saturate: rate must be >= 0");
  if (n_detectors < 1) throw std::invalid_argument("saturate: n_detectors must be >= 1");
  const double r = rate_in_hz / n_detectors;
  const double tau_s = deadtime_ns * 1e-9;
  return n_detectors * r / (1.0 + r * tau_s);
}

RateBreakdown qber(const OperatingPoint& op) {
  const LinkParams lp = make_params(op);
  const Stationary st = solve_stationary(lp);

  RateBreakdown out;
  out.eta_system = lp.eta_sys;
  out.duty_live = st.theta;
  out.detected_per_gate = st.r;
  out.afterpulse_per_avalanche = st.alpha;
  out.crosstalk_sync_prob = lp.p_ct_sync;

  const double b = lp.bias;
  const double w_major = b * b;
  const double w_minor = (1.0 - b) * (1.0 - b);
  const double w_mixed = 2.0 * b * (1.0 - b);
  const double noise_sum = st.c_dark + st.c_ap + st.c_ct;

  double sift_num_err = 0.0;
  double sift_den = 0.0;
  double raw = 0.0;
  double sifted_both = 0.0;
  double num_dark = 0.0, num_ap = 0.0, num_ct = 0.0;

  for (int k = 0; k < 3; ++k) {
    const double flux = lp.mu[k] * lp.eta_eff;
    const double m_hi = flux * (1.0 + lp.visibility) / 2.0;
    const double m_lo = flux * (1.0 - lp.visibility) / 2.0;
    const double qa = cause_prob(m_hi, st.nu);
    const double qb = cause_prob(m_lo, st.nu);
    const double pa = st.theta * qa;
    const double pb = st.theta * qb;
    const double q_match = pa + pb - pa * pb;
    const double err_match = pb * (1.0 - pa) + 0.5 * pa * pb;

    const double q_mix = cause_prob(flux / 2.0, st.nu);
    const double p_mix = st.theta * q_mix;
    const double q_mixed_pulse = p_mix + p_mix - p_mix * p_mix;

    out.cls[k].gain = (w_major + w_minor) * q_match + w_mixed * q_mixed_pulse;
    out.cls[k].qber = q_match > 0.0 ? err_match / q_match : 0.0;
    out.cls[k].sifted_rate_hz = lp.rep_hz * lp.prob[k] * w_major * q_match;

    raw += lp.prob[k] * out.cls[k].gain;
    sifted_both += lp.prob[k] * (w_major + w_minor) * q_match;
    sift_num_err += lp.prob[k] * err_match;
    sift_den += lp.prob[k] * q_match;

    // Noise landing on the wrong-side detector as a lone click is a full
    // error; averaged over sides that is the "half the noise clicks" rule.
    if (noise_sum > 0.0) {
      const double noise_err = st.theta * st.nu * std::exp(-m_lo) * (1.0 - pa);
      num_dark += lp.prob[k] * noise_err * (st.c_dark / noise_sum);
      num_ap += lp.prob[k] * noise_err * (st.c_ap / noise_sum);
      num_ct += lp.prob[k] * noise_err * (st.c_ct / noise_sum);
    }
  }

  out.raw_rate_hz = lp.rep_hz * raw;
  out.sifted_rate_hz = lp.rep_hz * sifted_both;
  out.qber = sift_den > 0.0 ? sift_num_err / sift_den : 0.0;
  if (sift_den > 0.0) {
    out.share_dark = num_dark / sift_den;
    out.share_afterpulse = num_ap / sift_den;
    out.share_crosstalk = num_ct / sift_den;
    out.share_optical =
        out.qber - out.share_dark - out.share_afterpulse - out.share_crosstalk;
  }
  return out;
}

LinkState link_state(const OperatingPoint& op) {
  const LinkParams lp = make_params(op);
  const Stationary st = solve_stationary(lp);
  LinkState ls;
  ls.eta_eff = lp.eta_eff;
  ls.visibility = lp.visibility;
  ls.theta = st.theta;
  ls.nu = st.nu;
  ls.rep_hz = lp.rep_hz;
  ls.bias = lp.bias;
  return ls;
}

BlockCounts expected_block_counts(const OperatingPoint& op, double duration_s) {
  if (!(duration_s >= 0.0)) {
    throw std::invalid_argument("expected_block_counts: duration must be >= 0");
  }
  const RateBreakdown rb = qber(op);
  const LinkParams lp = make_params(op);
  const double w_major = lp.bias * lp.bias;
  const double w_minor = (1.0 - lp.bias) * (1.0 - lp.bias);

  BlockCounts bc;
  bc.duration_s = duration_s;
  for (int k = 0; k < 3; ++k) {
    // sifted_rate_hz already carries the majority-basis weight b^2; both
    // bases share the same matched-case gain and error rate.
    const double matched_rate = rb.cls[k].sifted_rate_hz / w_major;
    bc.sifted[k] = duration_s * rb.cls[k].sifted_rate_hz;
    bc.errors[k] = bc.sifted[k] * rb.cls[k].qber;
    bc.sifted_minor[k] = duration_s * matched_rate * w_minor;
    bc.errors_minor[k] = bc.sifted_minor[k] * rb.cls[k].qber;
  }
  return bc;
}

}  // namespace qkdsim
