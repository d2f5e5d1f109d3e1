#pragma once

#include <Eigen/Core>
#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qkdsim/rng.hpp"

namespace qkdsim {

/// Raised for structurally invalid configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a model cannot satisfy a request (CLI exit code 4),
/// e.g. an unreachable bias-balancing target.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters of one gated SPAD pixel.
struct DetectorConfig {
  double spde = 0.15;             // single-photon detection efficiency at gate peak
  double dcr_hz = 1930.0;         // free-running-equivalent dark count rate
  double afterpulse_total = 0.0223;  // integrated post-deadtime afterpulse prob per avalanche
  double deadtime_ns = 100.0;
  double gate_rate_ghz = 1.0;     // gates per nanosecond
  double gate_width_ps = 400.0;   // active window per gate
  double trap_tau_ns = 50.0;      // afterpulse detrapping time constant

  [[nodiscard]] double gate_period_ns() const { return 1.0 / gate_rate_ghz; }
  [[nodiscard]] double gate_width_ns() const { return gate_width_ps / 1000.0; }
  /// Gates spanned by the dead time (>= 1; an avalanche always occupies its
  /// own gate).
  [[nodiscard]] std::uint32_t deadtime_gates() const;
  /// Dark-count probability per gate, scaled so the free-running-equivalent
  /// rate matches dcr_hz.
  [[nodiscard]] double dark_prob_per_gate() const {
    return dcr_hz * gate_period_ns() * 1e-9;
  }
};

/// A linear array of collectively gated pixels with inter-pixel crosstalk.
struct ArrayConfig {
  int n_pixels = 2;
  std::vector<DetectorConfig> pixel_configs;  // one per pixel
  /// Aggressor (row) -> victim (col) intrinsic crosstalk probability per
  /// avalanche. Zero diagonal.
  Eigen::MatrixXd crosstalk_intrinsic;
  double formation_tau_ns = 2.5;  // mean crosstalk formation delay
  bool universal_deadtime = false;

  [[nodiscard]] const DetectorConfig& pixel(int i) const { return pixel_configs.at(i); }
  /// Uniform array with every off-diagonal crosstalk entry set to `xt`.
  static ArrayConfig uniform(int n_pixels, const DetectorConfig& det, double xt);
};

/// Channel loss, either directly in dB or as fibre length times a loss
/// coefficient. Exactly one of the two modes must be set.
struct ChannelConfig {
  std::optional<double> attenuation_db;
  std::optional<double> fibre_km;
  double db_per_km = 0.18;
  /// Measured loss overriding the fibre_km * db_per_km product (for spools
  /// with excess connector loss).
  std::optional<double> loss_override_db;

  [[nodiscard]] double total_db() const;
  [[nodiscard]] double equivalent_km() const { return total_db() / db_per_km; }
  static ChannelConfig from_db(double db) {
    ChannelConfig c;
    c.attenuation_db = db;
    return c;
  }
  static ChannelConfig from_km(double km, double db_per_km = 0.18) {
    ChannelConfig c;
    c.fibre_km = km;
    c.db_per_km = db_per_km;
    return c;
  }
};

/// Receiver optics in front of the detector array.
struct ReceiverConfig {
  double insertion_loss_db = 4.2;    // waveguide chip + basis modulator
  double visibility = 0.965;         // AMZI interference visibility
  double efficiency_mismatch_max = 0.01;
  /// Fraction of the photon flux falling in the interfering AMZI time bin
  /// (the two non-interfering side bins land outside the detector gates).
  double timebin_acceptance = 0.5;

  [[nodiscard]] double optical_error_floor() const { return (1.0 - visibility) / 2.0; }
};

enum class IntensityClass : int { signal = 0, decoy = 1, vacuum = 2 };
inline constexpr std::array<IntensityClass, 3> kIntensityClasses = {
    IntensityClass::signal, IntensityClass::decoy, IntensityClass::vacuum};

/// Decoy-state BB84 source parameters.
struct ProtocolConfig {
  double rep_rate_ghz = 1.0;
  double mu_signal = 0.4;
  double mu_decoy = 0.1;
  double mu_vacuum = 0.004;
  double p_signal = 14.0 / 16.0;
  double p_decoy = 1.0 / 16.0;
  double p_vacuum = 1.0 / 16.0;
  double basis_bias = 0.9375;  // probability of the majority basis
  int pattern_length = 4096;

  [[nodiscard]] double mu(IntensityClass k) const {
    switch (k) {
      case IntensityClass::signal: return mu_signal;
      case IntensityClass::decoy: return mu_decoy;
      default: return mu_vacuum;
    }
  }
  [[nodiscard]] double prob(IntensityClass k) const {
    switch (k) {
      case IntensityClass::signal: return p_signal;
      case IntensityClass::decoy: return p_decoy;
      default: return p_vacuum;
    }
  }
  [[nodiscard]] double rep_rate_hz() const { return rep_rate_ghz * 1e9; }
};

/// Finite-key analysis parameters.
struct FiniteKeyConfig {
  double block_bits = 5e6;
  double eps_sec = 1e-10;
  double f_ec = 1.15;
};

/// Full declarative description of one simulated system.
struct SystemConfig {
  std::string preset_name = "custom";
  ArrayConfig array;
  ChannelConfig channel;
  ReceiverConfig receiver;
  ProtocolConfig protocol;
  FiniteKeyConfig finite_key;
  RngSpec rng;
};

struct ValidationReport {
  std::vector<std::string> errors;  // "field.path: message"
  [[nodiscard]] bool ok() const { return errors.empty(); }
  [[nodiscard]] std::string joined() const;
};

/// Checks every invariant; returns the full list of violations (never a
/// partial acceptance).
ValidationReport validate_config(const SystemConfig& cfg);

/// Validates and throws ConfigError with the aggregated report on failure.
SystemConfig validated(SystemConfig cfg);

/// -30 C operating point: SPDE 15.0%, APR 2.23%, 3.86 kHz combined DCR over
/// two pixels, 100 ns dead time.
SystemConfig cold_preset(int n_pixels = 2);
/// Room-temperature operating point: SPDE 19.0%, APR 1.47%, 130 kHz combined
/// DCR over two pixels.
SystemConfig room_preset(int n_pixels = 2);
/// Lookup by name ("cold" / "room"); throws ConfigError for unknown names.
SystemConfig preset_by_name(const std::string& name, int n_pixels = 2);

/// JSON round trip. from-JSON starts from `base` and applies only the keys
/// present, so partial override files work against a preset.
std::string config_to_json(const SystemConfig& cfg, int indent = 2);
SystemConfig config_from_json(const std::string& json_text,
                              const SystemConfig& base = SystemConfig{});
SystemConfig load_config_file(const std::string& path, const SystemConfig& base);

}  // namespace qkdsim
