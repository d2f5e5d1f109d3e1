#include "qkdsim/characterize.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qkdsim/parallel.hpp"
#include "qkdsim/units.hpp"

namespace qkdsim {

using nlohmann::json;

std::vector<Estimate> estimate_spde(const GateEventLog& log,
                                    const IlluminationSchedule& schedule) {
  if (!(schedule.mean_photons > 0.0)) {
    throw ConfigError("estimate_spde: schedule must have mean_photons > 0");
  }
  const double mu = schedule.mean_photons;
  std::vector<Estimate> out(log.n_pixels);
  for (int p = 0; p < log.n_pixels; ++p) {
    const double n_ill = static_cast<double>(log.live_illuminated_gates[p]);
    const double n_dark = static_cast<double>(log.live_dark_gates[p]);
    Estimate& e = out[p];
    if (n_ill <= 0.0 || n_dark <= 0.0) {
      e.suspect = true;
      e.note = "no live gates in one of the illumination classes";
      continue;
    }
    const double p_ill = static_cast<double>(log.counts_illuminated[p]) / n_ill;
    const double p_dark = static_cast<double>(log.counts_dark_gates[p]) / n_dark;
    if (p_ill >= 1.0) {
      e.suspect = true;
      e.note = "illuminated gates saturated";
      continue;
    }
    e.value = std::log((1.0 - p_dark) / (1.0 - p_ill)) / mu;
    const double var_ill = p_ill * (1.0 - p_ill) / n_ill;
    const double var_dark = p_dark * (1.0 - p_dark) / n_dark;
    const double d_ill = 1.0 / (mu * (1.0 - p_ill));
    const double d_dark = 1.0 / (mu * (1.0 - p_dark));
    e.se = std::sqrt(d_ill * d_ill * var_ill + d_dark * d_dark * var_dark);
    if (p_ill <= p_dark) {
      e.suspect = true;
      e.note = "non-physical: illuminated click fraction not above dark fraction";
    }
  }
  return out;
}

std::vector<Estimate> estimate_dcr(const GateEventLog& dark_log) {
  std::vector<Estimate> out(dark_log.n_pixels);
  for (int p = 0; p < dark_log.n_pixels; ++p) {
    const double t = dark_log.live_time_s(p);
    Estimate& e = out[p];
    if (t <= 0.0) {
      e.suspect = true;
      e.note = "no live time";
      continue;
    }
    const double counts = static_cast<double>(dark_log.counts_total(p));
    e.value = counts / t;
    e.se = std::sqrt(std::max(counts, 1.0)) / t;
  }
  return out;
}

std::vector<Estimate> estimate_apr(const GateEventLog& log,
                                   const IlluminationSchedule& schedule,
                                   const std::vector<Estimate>& dcr) {
  if (schedule.period_gates < 2) {
    throw ConfigError("estimate_apr: needs non-illuminated gates (period >= 2)");
  }
  std::vector<Estimate> out(log.n_pixels);
  // Afterpulses are spread over all gates; only the non-illuminated fraction
  // of them is observable as excess, so scale back up by period/(period-1).
  const double observable =
      1.0 - 1.0 / static_cast<double>(schedule.period_gates);
  for (int p = 0; p < log.n_pixels; ++p) {
    Estimate& e = out[p];
    const double n_av = static_cast<double>(log.counts_total(p));
    if (n_av <= 0.0) {
      e.suspect = true;
      e.note = "no avalanches";
      continue;
    }
    const double dark_time =
        static_cast<double>(log.live_dark_gates[p]) * log.gate_period_ns * 1e-9;
    const double expected_dark = dcr.at(p).value * dark_time;
    const double dark_counts = static_cast<double>(log.counts_dark_gates[p]);
    const double excess = dark_counts - expected_dark;
    const double denom = n_av * observable;
    e.value = excess / denom;
    const double var = std::max(dark_counts, 1.0) +
                       (dcr.at(p).se * dark_time) * (dcr.at(p).se * dark_time);
    e.se = std::sqrt(var) / denom;
    if (e.value < 0.0) {
      e.value = 0.0;
      e.suspect = true;
      e.note = "negative excess clamped to zero";
    }
  }
  return out;
}

CrosstalkMatrices measure_crosstalk(const GateEventLog& log,
                                    std::uint64_t min_aggressors) {
  const int n = log.n_pixels;
  CrosstalkMatrices m;
  m.sync = Eigen::MatrixXd::Zero(n, n);
  m.sync_err = Eigen::MatrixXd::Zero(n, n);
  m.async_prob = Eigen::MatrixXd::Zero(n, n);
  m.async_err = Eigen::MatrixXd::Zero(n, n);
  m.low_confidence.setConstant(n, n, false);

  const double n_gates = static_cast<double>(log.n_gates_simulated);
  for (int a = 0; a < n; ++a) {
    const double n_a = static_cast<double>(log.counts_total(a));
    for (int v = 0; v < n; ++v) {
      if (v == a) continue;
      if (n_a < static_cast<double>(min_aggressors)) {
        m.low_confidence(a, v) = true;
      }
      if (n_a <= 0.0) continue;
      // Unconditional per-gate click rate of the victim, for the accidental
      // expectation.
      const double rate_v = static_cast<double>(log.counts_total(v)) / n_gates;

      const double coinc = static_cast<double>(log.same_gate_pairs(a, v));
      const double acc_sync = n_a * rate_v;
      m.sync(a, v) = std::max(0.0, (coinc - acc_sync) / n_a);
      m.sync_err(a, v) = std::sqrt(coinc + acc_sync + 1.0) / n_a;

      const double window = static_cast<double>(log.deadtime_gates[a]);
      const double post = static_cast<double>(log.post_gate_pairs(a, v));
      const double acc_async = n_a * rate_v * window;
      m.async_prob(a, v) = std::max(0.0, (post - acc_async) / n_a);
      m.async_err(a, v) = std::sqrt(post + acc_async + 1.0) / n_a;
    }
  }
  return m;
}

namespace {

SpecificityResult specificity_from_logs(const std::vector<GateEventLog>& runs,
                                        const GateEventLog& dark,
                                        DeadtimePolicy policy) {
  const int n = static_cast<int>(runs.size());
  SpecificityResult res;
  res.rate_hz = Eigen::MatrixXd::Zero(n, n);
  res.specificity = Eigen::MatrixXd::Ones(n, n);

  const GateEventLog dark_blanked = deadtime_blanking(dark, policy);
  Eigen::ArrayXd dark_rate(n);
  for (int p = 0; p < n; ++p) {
    dark_rate(p) = dark_blanked.live_time_s(p) > 0.0
                       ? static_cast<double>(dark_blanked.counts_total(p)) /
                             dark_blanked.live_time_s(p)
                       : 0.0;
  }
  for (int i = 0; i < n; ++i) {
    const GateEventLog blanked = deadtime_blanking(runs[i], policy);
    for (int j = 0; j < n; ++j) {
      const double t = blanked.live_time_s(j);
      const double rate =
          t > 0.0 ? static_cast<double>(blanked.counts_total(j)) / t : 0.0;
      res.rate_hz(i, j) = rate - dark_rate(j);
    }
  }
  res.min_specificity = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const double onto = std::max(res.rate_hz(i, j), 0.0);
      const double diag = res.rate_hz(i, i);
      res.specificity(i, j) =
          onto > 0.0 ? diag / onto : std::numeric_limits<double>::infinity();
      res.min_specificity = std::min(res.min_specificity, res.specificity(i, j));
    }
  }
  if (n == 1) res.min_specificity = std::numeric_limits<double>::infinity();
  return res;
}

std::vector<GateEventLog> run_per_pixel_and_dark(const ArrayConfig& array,
                                                 const IlluminationSchedule& schedule,
                                                 std::uint64_t n_gates, RngSpec rng,
                                                 int max_threads) {
  const int n = array.n_pixels;
  std::vector<GateEventLog> logs(n + 1);
  const int workers = worker_count(max_threads == 0 ? n + 1 : max_threads);
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next.fetch_add(1); i <= n; i = next.fetch_add(1)) {
      IlluminationSchedule s = schedule;
      if (i == n) {
        s.mean_photons = 0.0;  // dark run
        s.target_pixel = -1;
      } else {
        s.target_pixel = i;
      }
      logs[i] = run_gates(array, s, n_gates, rng.substream(i));
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, n + 1); ++w) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  return logs;
}

}  // namespace

SpecificityResult specificity_matrix(const ArrayConfig& array,
                                     const IlluminationSchedule& per_pixel_schedule,
                                     std::uint64_t n_gates, RngSpec rng,
                                     DeadtimePolicy policy) {
  auto logs = run_per_pixel_and_dark(array, per_pixel_schedule, n_gates, rng, 0);
  GateEventLog dark = std::move(logs.back());
  logs.pop_back();
  return specificity_from_logs(logs, dark, policy);
}

double coupling_loss(double system_spde, double channel_loss_db, double spad_spde) {
  if (!(system_spde > 0.0) || !(spad_spde > 0.0) || spad_spde > 1.0 ||
      !std::isfinite(channel_loss_db)) {
    throw std::invalid_argument("coupling_loss: SPDEs must be in (0, 1], loss finite");
  }
  return 10.0 * std::log10(spad_spde / system_spde) - channel_loss_db;
}

double BiasCurve::spde_at(double v) const {
  const auto n = bias_v.size();
  if (v <= bias_v(0)) return spde(0);
  if (v >= bias_v(n - 1)) return spde(n - 1);
  // Table sizes are small; a linear scan keeps this simple.
  for (Eigen::Index i = 1; i < n; ++i) {
    if (v <= bias_v(i)) {
      const double t = (v - bias_v(i - 1)) / (bias_v(i) - bias_v(i - 1));
      return spde(i - 1) + t * (spde(i) - spde(i - 1));
    }
  }
  return spde(n - 1);
}

void BiasCurve::validate() const {
  if (bias_v.size() != spde.size() || bias_v.size() < 2) {
    throw ConfigError("BiasCurve: need matching bias/spde tables with >= 2 points");
  }
  for (Eigen::Index i = 1; i < bias_v.size(); ++i) {
    if (!(bias_v(i) > bias_v(i - 1))) {
      throw ConfigError("BiasCurve: bias values must be strictly increasing");
    }
    if (spde(i) < spde(i - 1)) {
      throw ConfigError("BiasCurve: SPDE must be monotone nondecreasing");
    }
  }
  if (spde(0) < 0.0 || spde(spde.size() - 1) > 1.0) {
    throw ConfigError("BiasCurve: SPDE values must lie in [0, 1]");
  }
}

BiasSolution balance_biases(const std::vector<BiasCurve>& curves,
                            const std::vector<double>& channel_losses_db,
                            double target_system_spde) {
  if (curves.size() != channel_losses_db.size() || curves.empty()) {
    throw ConfigError("balance_biases: need one curve and one loss per pixel");
  }
  if (!(target_system_spde > 0.0)) {
    throw ConfigError("balance_biases: target must be > 0");
  }
  BiasSolution sol;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const BiasCurve& curve = curves[i];
    curve.validate();
    const double trans = db_to_transmittance(channel_losses_db[i]);
    const double eta_needed = target_system_spde / trans;
    if (eta_needed > curve.max_spde() + 1e-15 || eta_needed < curve.min_spde() - 1e-15) {
      std::ostringstream os;
      os << "balance_biases: pixel " << i << " cannot reach system SPDE "
         << target_system_spde << " (needs SPDE " << eta_needed
         << ", curve covers [" << curve.min_spde() << ", " << curve.max_spde()
         << "], i.e. system SPDE [" << curve.min_spde() * trans << ", "
         << curve.max_spde() * trans << "])";
      throw ModelError(os.str());
    }
    double lo = curve.bias_v(0);
    double hi = curve.bias_v(curve.bias_v.size() - 1);
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (curve.spde_at(mid) < eta_needed) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    const double v = 0.5 * (lo + hi);
    sol.bias_v.push_back(v);
    sol.achieved_system_spde.push_back(curve.spde_at(v) * trans);
  }
  const auto [mn, mx] = std::minmax_element(sol.achieved_system_spde.begin(),
                                            sol.achieved_system_spde.end());
  double mean = 0.0;
  for (const double s : sol.achieved_system_spde) mean += s;
  mean /= static_cast<double>(sol.achieved_system_spde.size());
  sol.mismatch = mean > 0.0 ? (*mx - *mn) / mean : 0.0;
  return sol;
}

namespace {

json estimate_to_json(const Estimate& e) {
  json j{{"value", e.value}, {"stderr", e.se}, {"suspect", e.suspect}};
  if (!e.note.empty()) j["note"] = e.note;
  return j;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      row.push_back(std::isfinite(v) ? json(v) : json("inf"));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::string CharacterizationReport::to_json(int indent) const {
  json j;
  j["n_gates"] = n_gates;
  auto estimates = [](const std::vector<Estimate>& v) {
    json arr = json::array();
    for (const auto& e : v) arr.push_back(estimate_to_json(e));
    return arr;
  };
  j["spde"] = estimates(spde);
  j["dcr_hz"] = estimates(dcr_hz);
  json per_gate = json::array();
  for (const auto& e : dcr_hz) {
    // Plain division by the gate rate; see the report fields for the Hz value.
    per_gate.push_back(e.value * 1e-9);
  }
  j["dcr_per_gate"] = per_gate;
  j["apr"] = estimates(apr);
  j["crosstalk"] = json{{"sync", matrix_to_json(crosstalk.sync)},
                        {"sync_stderr", matrix_to_json(crosstalk.sync_err)},
                        {"async", matrix_to_json(crosstalk.async_prob)},
                        {"async_stderr", matrix_to_json(crosstalk.async_err)}};
  j["specificity"] = json{{"rate_hz", matrix_to_json(specificity.rate_hz)},
                          {"ratio", matrix_to_json(specificity.specificity)},
                          {"min", std::isfinite(specificity.min_specificity)
                                      ? json(specificity.min_specificity)
                                      : json("inf")}};
  return j.dump(indent) + "\n";
}

CharacterizationReport characterize_array(const ArrayConfig& array,
                                          const IlluminationSchedule& schedule,
                                          std::uint64_t n_gates, RngSpec rng,
                                          int max_threads) {
  const int n = array.n_pixels;
  auto logs = run_per_pixel_and_dark(array, schedule, n_gates, rng, max_threads);
  GateEventLog dark = std::move(logs.back());
  logs.pop_back();

  CharacterizationReport report;
  report.n_gates = n_gates;
  report.dcr_hz = estimate_dcr(dark);
  report.spde.resize(n);
  report.apr.resize(n);
  report.crosstalk.sync = Eigen::MatrixXd::Zero(n, n);
  report.crosstalk.sync_err = Eigen::MatrixXd::Zero(n, n);
  report.crosstalk.async_prob = Eigen::MatrixXd::Zero(n, n);
  report.crosstalk.async_err = Eigen::MatrixXd::Zero(n, n);
  report.crosstalk.low_confidence.setConstant(n, n, false);

  for (int i = 0; i < n; ++i) {
    IlluminationSchedule s = schedule;
    s.target_pixel = i;
    report.spde[i] = estimate_spde(logs[i], s).at(i);
    report.apr[i] = estimate_apr(logs[i], s, report.dcr_hz).at(i);
    // Pixel i is the only strongly driven aggressor in its own run.
    const CrosstalkMatrices xt = measure_crosstalk(logs[i]);
    report.crosstalk.sync.row(i) = xt.sync.row(i);
    report.crosstalk.sync_err.row(i) = xt.sync_err.row(i);
    report.crosstalk.async_prob.row(i) = xt.async_prob.row(i);
    report.crosstalk.async_err.row(i) = xt.async_err.row(i);
    report.crosstalk.low_confidence.row(i) = xt.low_confidence.row(i);
  }
  report.specificity = specificity_from_logs(logs, dark, DeadtimePolicy::universal);
  return report;
}

}  // namespace qkdsim
