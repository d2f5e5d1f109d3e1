#pragma once

#include <array>
#include <cstdint>

#include "qkdsim/config.hpp"
#include "qkdsim/keyrate_types.hpp"

namespace qkdsim {

/// One channel operating point of the two-detector BB84 receiver.
struct OperatingPoint {
  ChannelConfig channel;
  ReceiverConfig receiver;
  ArrayConfig detectors;  // two pixels, one per AMZI output
  ProtocolConfig protocol;

  static OperatingPoint from(const SystemConfig& cfg) {
    return OperatingPoint{cfg.channel, cfg.receiver, cfg.array, cfg.protocol};
  }
};

/// Closed-form per-pulse detection model at one operating point:
/// gains, QBER decomposition, and the dead-time/afterpulse feedback state.
struct RateBreakdown {
  struct PerClass {
    double gain = 0.0;         // detected click probability per emitted pulse
    double qber = 0.0;         // error fraction among basis-matched clicks
    double sifted_rate_hz = 0.0;  // majority-basis sifted detections
  };
  std::array<PerClass, 3> cls;  // signal, decoy, vacuum

  double raw_rate_hz = 0.0;     // detected click events per second
  double sifted_rate_hz = 0.0;  // both bases
  double qber = 0.0;            // sifted-average QBER, majority basis

  // Additive QBER decomposition (shares sum to `qber` exactly).
  double share_optical = 0.0;
  double share_dark = 0.0;
  double share_afterpulse = 0.0;
  double share_crosstalk = 0.0;

  // Feedback-state intermediates.
  double eta_system = 0.0;       // SPDE x channel x receiver transmittance
  double duty_live = 0.0;        // stationary probability a detector is live
  double detected_per_gate = 0.0;  // per-detector detected avalanches per gate
  double afterpulse_per_avalanche = 0.0;  // realized afterpulse expectation
  double crosstalk_sync_prob = 0.0;       // per avalanche, from the array model
};

/// System detection efficiency: mean detector SPDE scaled by channel and
/// receiver transmittance.
double eta_system(const OperatingPoint& op);

/// Decoy-state gain for a pulse of mean photon number mu:
///   Q = 1 - (1 - p_noise) * exp(-mu * eta_system),
/// with p_noise the per-pulse dark+afterpulse click probability summed over
/// both detectors at the operating point's stationary state.
double gain(double mu, const OperatingPoint& op);

/// Non-paralyzable dead-time saturation: each of n_detectors carries
/// rate_in/n and delivers r/(1 + r*tau).
double saturate(double rate_in_hz, double deadtime_ns, int n_detectors);

/// Full per-pulse analytic model (gains, QBER decomposition, rates).
RateBreakdown qber(const OperatingPoint& op);

/// Expected (real-valued) sifted and error counts per intensity class and
/// basis for a block of the given duration.
BlockCounts expected_block_counts(const OperatingPoint& op, double duration_s);

/// Expected afterpulse avalanches per detected avalanche, accounting for the
/// hazard lost when another click restarts the dead time first. `cause_prob`
/// is the competing per-live-gate click probability. Approaches ap_total as
/// cause_prob -> 0.
double afterpulse_realized_fraction(double cause_prob, std::uint32_t deadtime_gates,
                                    double trap_tau_gates, double ap_total);

/// Synchronous crosstalk probability per avalanche implied by the array
/// model: mean intrinsic strength times the probability the formation delay
/// lands inside the remainder of the same gate window.
double sync_crosstalk_probability(const ArrayConfig& array);

/// Asynchronous counterpart: the formation delay lands inside one of the
/// victim's later gate windows (victim liveness not included).
double async_crosstalk_probability(const ArrayConfig& array);

/// Stationary detector state at an operating point, for photon-number-level
/// computations built on top of the per-class model.
struct LinkState {
  double eta_eff = 0.0;   // per-photon detection probability (both outputs)
  double visibility = 1.0;
  double theta = 1.0;     // live probability
  double nu = 0.0;        // per-live-gate noise cause probability, per detector
  double rep_hz = 0.0;
  double bias = 0.5;
};
LinkState link_state(const OperatingPoint& op);

}  // namespace qkdsim
