#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "qkdsim/config.hpp"
#include "qkdsim/rng.hpp"

namespace qkdsim {

enum class AvalancheCause : std::uint8_t { photon = 0, dark = 1, afterpulse = 2, crosstalk = 3 };

const char* to_string(AvalancheCause cause);

struct Avalanche {
  std::uint64_t gate;
  AvalancheCause cause;
  std::int32_t aggressor;  // source pixel for crosstalk, -1 otherwise
};

/// A crosstalk stimulus in flight from an aggressor avalanche to a victim
/// pixel. Triggers only if it arrives inside one of the victim's active gate
/// windows while the victim is live.
struct CrosstalkStimulus {
  double arrival_time_ns;
  std::uint64_t arrival_gate;
  std::int32_t source_pixel;
  std::uint64_t source_gate;
  double strength;
  std::uint64_t seq;  // emission order, breaks arrival ties deterministically
};

/// Dynamic per-pixel state of the gate engine.
struct PixelState {
  double trap_charge = 0.0;       // sum of exp(-dt/tau) over past avalanches
  std::uint64_t trap_gate = 0;    // gate at which trap_charge was last decayed
  std::uint64_t dead_until_gate = 0;  // live iff gate >= dead_until_gate
  double spde_effective = 0.0;
  std::vector<CrosstalkStimulus> pending_stimuli;  // min-heap by (gate, seq)
};

/// Per-gate afterpulse hazard for the pixel's current trap population. The
/// hazard is normalized so that the sum over all gates after the dead time of
/// one avalanche equals DetectorConfig::afterpulse_total.
double afterpulse_gate_probability(const PixelState& state, const DetectorConfig& det);

/// Regular pulsed illumination: every `period_gates`-th gate carries a laser
/// pulse of `mean_photons` aimed at `target_pixel` (-1 = all pixels).
struct IlluminationSchedule {
  std::uint64_t period_gates = 64;
  double mean_photons = 0.2;
  int target_pixel = -1;

  [[nodiscard]] bool illuminated(std::uint64_t gate) const {
    return mean_photons > 0.0 && gate % period_gates == 0;
  }
  [[nodiscard]] bool targets(int pixel) const {
    return target_pixel < 0 || target_pixel == pixel;
  }
};

/// Counters and (optionally) raw avalanche records from one or more runs.
///
/// Counter fields merge across independent trials by summation; the event
/// lists are only meaningful for a single trial.
struct GateEventLog {
  int n_pixels = 0;
  std::uint64_t n_gates_simulated = 0;
  IlluminationSchedule schedule;
  double gate_period_ns = 1.0;
  std::vector<double> gate_width_ns;             // per pixel
  std::vector<std::uint32_t> deadtime_gates;     // per pixel

  std::vector<std::uint64_t> counts_illuminated;  // clicks in illuminated gates
  std::vector<std::uint64_t> counts_dark_gates;   // clicks in non-illuminated gates
  std::vector<std::uint64_t> live_illuminated_gates;
  std::vector<std::uint64_t> live_dark_gates;

  /// Cause tally per pixel, indexed by AvalancheCause.
  std::vector<std::array<std::uint64_t, 4>> cause_counts;

  /// same_gate_pairs(a, v): gates in which both a and v avalanched.
  Eigen::Matrix<std::uint64_t, Eigen::Dynamic, Eigen::Dynamic> same_gate_pairs;
  /// post_gate_pairs(a, v): pairs where v avalanched 1..deadtime_gates[a]
  /// gates after an avalanche of a.
  Eigen::Matrix<std::uint64_t, Eigen::Dynamic, Eigen::Dynamic> post_gate_pairs;

  bool events_retained = true;
  std::vector<std::vector<Avalanche>> events;  // per pixel, gate-ordered

  [[nodiscard]] std::uint64_t counts_total(int pixel) const {
    return counts_illuminated.at(pixel) + counts_dark_gates.at(pixel);
  }
  [[nodiscard]] std::uint64_t live_gates_total(int pixel) const {
    return live_illuminated_gates.at(pixel) + live_dark_gates.at(pixel);
  }
  [[nodiscard]] double live_time_s(int pixel) const {
    return static_cast<double>(live_gates_total(pixel)) * gate_period_ns * 1e-9;
  }

  /// Sums the counters of another trial into this log; event lists are
  /// dropped because gate indices of different trials are not comparable.
  void merge_counters_from(const GateEventLog& other);

  /// One CSV record per avalanche: gate_index,pixel,cause,aggressor_pixel.
  void dump_events_csv(std::ostream& os) const;
};

struct RunOptions {
  bool record_events = true;
};

/// Drives an array of gated pixels one gate at a time. Photon causes are
/// supplied per gate by the caller as per-pixel click probabilities
/// (1 - exp(-mu * eta), precomputed), which lets the BB84 pulse simulator
/// reuse the same avalanche dynamics.
class GateEngine {
 public:
  GateEngine(const ArrayConfig& array, RngSpec rng);

  /// Advances one gate. photon_prob[i] is pixel i's photon-cause click
  /// probability in this gate (0 when not illuminated). Returns a bitmask of
  /// the pixels that avalanched. `fired_out` (optional, size n_pixels)
  /// receives the avalanche record per fired pixel; `live_mask_out` the
  /// pixels that were live at the start of the gate.
  std::uint32_t step(std::span<const double> photon_prob,
                     Avalanche* fired_out = nullptr,
                     std::uint32_t* live_mask_out = nullptr);

  [[nodiscard]] std::uint64_t gate() const { return gate_; }
  [[nodiscard]] int n_pixels() const { return n_; }
  [[nodiscard]] bool live(int pixel) const {
    return gate_ >= pixels_[pixel].dead_until_gate;
  }
  [[nodiscard]] const PixelState& pixel_state(int pixel) const { return pixels_[pixel]; }
  [[nodiscard]] const ArrayConfig& array() const { return array_; }

 private:
  void fire(int pixel, AvalancheCause cause, std::int32_t aggressor);
  void emit_stimuli(int aggressor);
  double pop_stimulus_strength(int pixel);  // combined stimuli arriving this gate

  ArrayConfig array_;
  RandomStream rng_;
  int n_;
  std::uint64_t gate_ = 0;
  std::uint64_t stim_seq_ = 0;
  std::vector<PixelState> pixels_;

  // Per-pixel precomputed constants.
  std::vector<double> p_dark_;
  std::vector<double> hazard_scale_;   // afterpulse hazard per unit trap charge
  std::vector<double> trap_decay_;     // exp(-gate_period / trap_tau)
  std::vector<double> trap_cut_;       // trap charge below which hazard is dropped
  std::vector<double> inv_trap_tau_gates_;
  std::vector<std::uint32_t> deadtime_gates_;
  std::vector<double> gate_width_ns_;
  double period_ns_;
  bool universal_deadtime_;
  bool any_crosstalk_;

  // Scratch for the per-gate cascade.
  std::vector<int> fired_this_gate_;
  std::vector<Avalanche> last_fired_;  // per-pixel record of this gate's avalanche
};

/// Runs the detector-characterization experiment: `n_gates` gates under the
/// given illumination schedule.
GateEventLog run_gates(const ArrayConfig& array, const IlluminationSchedule& schedule,
                       std::uint64_t n_gates, RngSpec rng, RunOptions options = {});

/// Same experiment split over `n_trials` independent trials (streams
/// rng.stream_id + t) executed on up to `max_threads` workers; counters are
/// merged in trial order so the result is independent of scheduling.
GateEventLog run_gates_parallel(const ArrayConfig& array,
                                const IlluminationSchedule& schedule,
                                std::uint64_t gates_per_trial, int n_trials,
                                RngSpec rng, int max_threads = 0);

enum class DeadtimePolicy { per_pixel, universal };

/// Applies a counting dead-time policy to a single-trial log with retained
/// events and recounts every counter. The per-pixel policy drops avalanches
/// within the dead time of the same pixel's previous kept avalanche; the
/// universal policy also drops avalanches of *other* pixels inside the
/// window (same-gate events are kept: a universal dead time cannot filter
/// synchronous crosstalk). Live-gate denominators exclude both the original
/// physical dead windows and, for the universal policy, the shared windows.
GateEventLog deadtime_blanking(const GateEventLog& log, DeadtimePolicy policy);

}  // namespace qkdsim
