#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "qkdsim/config.hpp"
#include "qkdsim/spad_mc.hpp"

namespace qkdsim {

/// A point estimate with its standard error. `suspect` marks non-physical or
/// low-confidence results (e.g. illuminated click fraction below the dark
/// one, or too few aggressor counts).
struct Estimate {
  double value = 0.0;
  double se = 0.0;
  bool suspect = false;
  std::string note;
};

/// Blind SPDE estimator: solves
///   P_ill = 1 - (1 - P_dark) * exp(-mu * eta)
/// for eta, with P_ill / P_dark the click fractions of illuminated and
/// non-illuminated gates (dead-time-corrected denominators).
std::vector<Estimate> estimate_spde(const GateEventLog& log,
                                    const IlluminationSchedule& schedule);

/// Dark count rate from a run without illumination, in Hz per pixel.
std::vector<Estimate> estimate_dcr(const GateEventLog& dark_log);

/// Afterpulse probability per avalanche: excess non-illuminated-gate clicks
/// over the dark expectation, divided by the avalanche count. The dark
/// expectation comes from `dcr` (a separate dark run). Negative excess is
/// clamped to zero with a warning flag.
std::vector<Estimate> estimate_apr(const GateEventLog& log,
                                   const IlluminationSchedule& schedule,
                                   const std::vector<Estimate>& dcr);

struct CrosstalkMatrices {
  Eigen::MatrixXd sync;        // probability per aggressor avalanche
  Eigen::MatrixXd sync_err;
  Eigen::MatrixXd async_prob;  // over the trailing dead-time window
  Eigen::MatrixXd async_err;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> low_confidence;
};

/// Blind crosstalk estimator (no cause tags): accidental-subtracted same-gate
/// coincidences for the synchronous matrix and trailing-window pairs for the
/// asynchronous one. Entries with fewer than `min_aggressors` avalanches are
/// flagged low-confidence. Negative estimates clamp to 0, uncertainty kept.
CrosstalkMatrices measure_crosstalk(const GateEventLog& log,
                                    std::uint64_t min_aggressors = 1000);

struct SpecificityResult {
  Eigen::MatrixXd rate_hz;      // (i, j): dark-subtracted rate on j, i illuminated
  Eigen::MatrixXd specificity;  // (i, j): rate(i,i) / rate(i,j), diagonal = 1
  double min_specificity = 0.0;
};

/// One run per illuminated pixel plus one dark run. The counting dead-time
/// policy is universal by default, which filters asynchronous crosstalk the
/// same way the array electronics would.
SpecificityResult specificity_matrix(const ArrayConfig& array,
                                     const IlluminationSchedule& per_pixel_schedule,
                                     std::uint64_t n_gates, RngSpec rng,
                                     DeadtimePolicy policy = DeadtimePolicy::universal);

/// Optical coupling loss between waveguide output and detector aperture:
///   10*log10(spad_spde / system_spde) - channel_loss_db.
/// May return a (flagged-by-caller) negative value when the system SPDE
/// exceeds what the channel loss allows.
double coupling_loss(double system_spde, double channel_loss_db, double spad_spde);

/// Tabulated monotone bias -> SPDE curve for one pixel.
struct BiasCurve {
  Eigen::ArrayXd bias_v;
  Eigen::ArrayXd spde;

  /// Linear interpolation, clamped to the table ends.
  [[nodiscard]] double spde_at(double v) const;
  [[nodiscard]] double min_spde() const { return spde(0); }
  [[nodiscard]] double max_spde() const { return spde(spde.size() - 1); }
  void validate() const;  // throws ConfigError if not monotone or out of range
};

struct BiasSolution {
  std::vector<double> bias_v;
  std::vector<double> achieved_system_spde;
  double mismatch = 0.0;  // (max - min) / mean of achieved system SPDEs
};

/// Per pixel, solves eta_i(V) * 10^(-loss_i/10) = target by bisection on the
/// monotone curve. Throws ModelError naming the pixel and its achievable
/// range when the target cannot be reached.
BiasSolution balance_biases(const std::vector<BiasCurve>& curves,
                            const std::vector<double>& channel_losses_db,
                            double target_system_spde);

struct CharacterizationReport {
  std::vector<Estimate> spde;
  std::vector<Estimate> dcr_hz;
  std::vector<Estimate> apr;
  CrosstalkMatrices crosstalk;
  SpecificityResult specificity;
  std::uint64_t n_gates = 0;

  [[nodiscard]] std::string to_json(int indent = 2) const;
};

/// Full blind characterization pipeline: per-pixel illuminated runs, a dark
/// run, and the estimators above. Streams rng.stream_id .. +n_pixels are
/// consumed.
CharacterizationReport characterize_array(const ArrayConfig& array,
                                          const IlluminationSchedule& schedule,
                                          std::uint64_t n_gates, RngSpec rng,
                                          int max_threads = 0);

}  // namespace qkdsim
