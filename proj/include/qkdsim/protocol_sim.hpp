#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "qkdsim/config.hpp"
#include "qkdsim/keyrate.hpp"
#include "qkdsim/link_model.hpp"
#include "qkdsim/rng.hpp"
#include "qkdsim/spad_mc.hpp"

namespace qkdsim {

/// One prepared pulse: basis (0 = majority, 1 = minority), key bit, intensity
/// class, and the encoding phase it implies.
struct PulseSetting {
  std::uint8_t basis;
  std::uint8_t bit;
  std::uint8_t intensity;  // IntensityClass index
  float phase;             // 0, pi/2, pi, 3pi/2
};

struct PulsePattern {
  std::vector<PulseSetting> pulses;
  RngSpec generated_from;

  [[nodiscard]] std::size_t size() const { return pulses.size(); }
};

/// Deterministic pseudo-random pattern of protocol.pattern_length pulses with
/// i.i.d. basis / bit / intensity draws from the configured distributions.
PulsePattern generate_pattern(const ProtocolConfig& protocol, RngSpec rng);

struct SiftedBlock {
  BlockCounts counts;
  std::uint64_t pulses_emitted = 0;
  std::uint64_t detections = 0;     // pulses with at least one surviving click
  std::uint64_t double_clicks = 0;  // both detectors in one gate
};

/// Pulse-level Monte Carlo of the BB84 receiver: AMZI interference sets the
/// per-detector photon flux, detection runs through the spad-mc gate engine
/// (dark counts, afterpulsing, dead time, crosstalk), double clicks squash to
/// a fair random bit, matched-basis detections accumulate per class.
/// `trace` (optional) receives one CSV row per pulse.
SiftedBlock simulate_block(const PulsePattern& pattern, const OperatingPoint& op,
                           std::uint64_t n_repeats, RngSpec rng,
                           std::ostream* trace = nullptr);

struct BlockRunOptions {
  double max_block_seconds = 600.0;  // projected wall-model duration cap
  int max_threads = 0;
  std::uint64_t chunk_pulses = 1 << 22;
};

struct BlockRunResult {
  SiftedBlock block;
  KeyRateReport report;
};

/// Repeats simulate_block until the majority-basis sifted count reaches
/// fk.block_bits, then runs the finite-key analysis. Chunks execute on a
/// worker pool with per-chunk substreams and merge in chunk order, so the
/// result is independent of scheduling. Throws ModelError with the projected
/// duration when the block cannot complete under options.max_block_seconds.
BlockRunResult run_to_block_size(const OperatingPoint& op, const FiniteKeyConfig& fk,
                                 RngSpec rng, BlockRunOptions options = {});

}  // namespace qkdsim
