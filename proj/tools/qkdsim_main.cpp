#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "qkdsim/characterize.hpp"
#include "qkdsim/config.hpp"
#include "qkdsim/keyrate.hpp"
#include "qkdsim/link_model.hpp"
#include "qkdsim/parallel.hpp"
#include "qkdsim/protocol_sim.hpp"
#include "qkdsim/spad_mc.hpp"
#include "qkdsim/units.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qkdsim;

namespace {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitModel = 4;

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

void write_matrix_csv(const fs::path& path, const Eigen::MatrixXd& m,
                      const std::string& prefix) {
  auto out = open_out(path);
  out << prefix;
  for (Eigen::Index j = 0; j < m.cols(); ++j) out << ",pixel_" << j;
  out << "\r\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out << "pixel_" << i;
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      out << ',' << format_double(m(i, j));
    }
    out << "\r\n";
  }
}

struct CommonOpts {
  std::string config_path;
  std::string preset = "cold";
  std::uint64_t seed = 1;
  int pixels = 0;  // 0 = preset default
};

SystemConfig resolve_config(const CommonOpts& c) {
  SystemConfig cfg = preset_by_name(c.preset, c.pixels > 0 ? c.pixels : 2);
  if (!c.config_path.empty()) cfg = load_config_file(c.config_path, cfg);
  cfg.rng.seed = c.seed;
  const auto report = validate_config(cfg);
  if (!report.ok()) throw ConfigError("invalid configuration:\n" + report.joined());
  return cfg;
}

void apply_channel_flags(SystemConfig& cfg, const std::optional<double>& att_db,
                         const std::optional<double>& fibre_km,
                         const std::optional<double>& loss_override,
                         const std::optional<double>& db_per_km) {
  if (db_per_km) cfg.channel.db_per_km = *db_per_km;
  if (att_db) {
    cfg.channel = ChannelConfig::from_db(*att_db);
    if (db_per_km) cfg.channel.db_per_km = *db_per_km;
  }
  if (fibre_km) {
    cfg.channel = ChannelConfig::from_km(*fibre_km, cfg.channel.db_per_km);
  }
  if (loss_override) {
    if (!cfg.channel.fibre_km) {
      throw ConfigError("--loss-override-db requires --fibre-km");
    }
    cfg.channel.loss_override_db = *loss_override;
  }
}

// ---------------------------------------------------------------------------

int cmd_characterize(const CommonOpts& common, std::uint64_t n_gates,
                     const std::string& out_dir, const std::string& events_path) {
  if (n_gates == 0) throw ConfigError("characterize: --gates must be >= 1");
  SystemConfig cfg = resolve_config(common);
  if (common.pixels > 0 && cfg.array.n_pixels != common.pixels) {
    throw ConfigError("characterize: --pixels conflicts with the config file");
  }

  IlluminationSchedule schedule;  // 1-in-64 gates, 0.2 photons per pulse
  const CharacterizationReport report =
      characterize_array(cfg.array, schedule, n_gates, cfg.rng);

  const fs::path dir(out_dir);
  open_out(dir / "report.json") << report.to_json();
  write_matrix_csv(dir / "crosstalk_sync.csv", report.crosstalk.sync, "aggressor");
  write_matrix_csv(dir / "crosstalk_async.csv", report.crosstalk.async_prob,
                   "aggressor");
  write_matrix_csv(dir / "specificity_rate_hz.csv", report.specificity.rate_hz,
                   "illuminated");

  if (!events_path.empty()) {
    // One extra (deterministic) run with retained events for the dump.
    IlluminationSchedule s = schedule;
    s.target_pixel = 0;
    const GateEventLog log =
        run_gates(cfg.array, s, std::min<std::uint64_t>(n_gates, 10'000'000), cfg.rng);
    auto out = open_out(events_path);
    log.dump_events_csv(out);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct SweepRow {
  double attenuation_db;
  std::string mode;
  double raw_rate_hz;
  double qber;
  double secure_rate_hz;
  KeyRateReport report;
};

SweepRow eval_point(const SystemConfig& cfg, double att_db, bool montecarlo,
                    double block_bits_override) {
  SystemConfig point_cfg = cfg;
  point_cfg.channel = ChannelConfig::from_db(att_db);
  point_cfg.channel.db_per_km = cfg.channel.db_per_km;
  if (block_bits_override > 0.0) point_cfg.finite_key.block_bits = block_bits_override;
  const OperatingPoint op = OperatingPoint::from(point_cfg);

  SweepRow row;
  row.attenuation_db = att_db;
  if (!montecarlo) {
    row.mode = "analytic";
    const RateBreakdown rb = qber(op);
    row.raw_rate_hz = rb.raw_rate_hz;
    row.qber = rb.qber;
    row.report = analytic_key_report(op, point_cfg.finite_key);
    row.secure_rate_hz = row.report.secure_rate_hz;
  } else {
    row.mode = "montecarlo";
    const BlockRunResult res =
        run_to_block_size(op, point_cfg.finite_key, point_cfg.rng);
    row.report = res.report;
    row.secure_rate_hz = res.report.secure_rate_hz;
    row.qber = res.report.qber_majority;
    row.raw_rate_hz = static_cast<double>(res.block.detections) /
                      res.block.counts.duration_s;
  }
  return row;
}

int cmd_sweep(const CommonOpts& common, double start_db, double stop_db,
              double step_db, bool points_given, const std::string& explicit_points,
              const std::string& mode, const std::string& out_dir,
              const std::optional<double>& db_per_km, double block_bits_override) {
  SystemConfig cfg = resolve_config(common);
  if (db_per_km) cfg.channel.db_per_km = *db_per_km;

  std::vector<double> grid;
  if (points_given) {
    std::stringstream ss(explicit_points);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (!tok.empty()) grid.push_back(std::stod(tok));
    }
  } else {
    if (step_db <= 0.0) throw ConfigError("sweep: --step must be > 0");
    for (double a = start_db; a <= stop_db + 1e-9; a += step_db) grid.push_back(a);
  }
  if (grid.empty()) throw ConfigError("sweep: empty attenuation grid");
  if (!std::is_sorted(grid.begin(), grid.end()) ||
      std::adjacent_find(grid.begin(), grid.end()) != grid.end()) {
    throw ConfigError("sweep: grid must be strictly increasing");
  }

  std::vector<std::string> modes;
  if (mode == "analytic" || mode == "both") modes.push_back("analytic");
  if (mode == "montecarlo" || mode == "both") modes.push_back("montecarlo");
  if (modes.empty()) throw ConfigError("sweep: mode must be analytic|montecarlo|both");

  struct Job {
    double att;
    bool mc;
  };
  std::vector<Job> jobs;
  for (const auto& m : modes) {
    for (const double a : grid) jobs.push_back({a, m == "montecarlo"});
  }

  std::vector<SweepRow> rows(jobs.size());
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr first_error;
  std::mutex err_mutex;
  auto work = [&] {
    for (std::size_t i = cursor.fetch_add(1); i < jobs.size();
         i = cursor.fetch_add(1)) {
      try {
        rows[i] = eval_point(cfg, jobs[i].att, jobs[i].mc, block_bits_override);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  // Monte Carlo points parallelize internally; only analytic grids fan out here.
  const int workers =
      mode == "analytic" ? worker_count(static_cast<int>(jobs.size())) : 1;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);

  const fs::path dir(out_dir);
  auto csv = open_out(dir / "sweep.csv");
  csv << "attenuation_db,equivalent_km,raw_rate_hz,qber,secure_rate_hz,mode\r\n";
  json sidecar = json::array();
  for (const auto& row : rows) {
    csv << format_double(row.attenuation_db) << ','
        << format_double(row.attenuation_db / cfg.channel.db_per_km) << ','
        << format_double(row.raw_rate_hz) << ',' << format_double(row.qber) << ','
        << format_double(row.secure_rate_hz) << ',' << row.mode << "\r\n";
    sidecar.push_back(json{{"attenuation_db", row.attenuation_db},
                           {"mode", row.mode},
                           {"report", json::parse(row.report.to_json())}});
  }
  open_out(dir / "sweep.json") << sidecar.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_point(const CommonOpts& common, const std::optional<double>& att_db,
              const std::optional<double>& fibre_km,
              const std::optional<double>& loss_override,
              const std::optional<double>& db_per_km, const std::string& mode,
              double block_bits_override) {
  SystemConfig cfg = resolve_config(common);
  apply_channel_flags(cfg, att_db, fibre_km, loss_override, db_per_km);
  if (block_bits_override > 0.0) cfg.finite_key.block_bits = block_bits_override;
  const OperatingPoint op = OperatingPoint::from(cfg);

  KeyRateReport report;
  if (mode == "analytic") {
    report = analytic_key_report(op, cfg.finite_key);
  } else if (mode == "montecarlo") {
    report = run_to_block_size(op, cfg.finite_key, cfg.rng).report;
  } else {
    throw ConfigError("point: mode must be analytic or montecarlo");
  }
  std::cout << report.to_json();
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_coupling(const std::string& in_path, const std::string& out_path) {
  std::ifstream in(in_path);
  if (!in) throw IoError("cannot read " + in_path);

  std::string line;
  if (!std::getline(in, line)) throw ConfigError("coupling: empty CSV");
  auto split = [](std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
  };
  const auto header = split(line);
  auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw ConfigError("coupling: missing CSV column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_sys = col("system_spde_pct");
  const std::size_t c_loss = col("channel_loss_db");
  const std::size_t c_spad = col("spad_spde_pct");

  std::ostringstream body;
  for (const auto& h : header) body << h << ',';
  body << "coupling_loss_db\r\n";
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    if (f.size() < header.size()) {
      throw ConfigError("coupling: malformed CSV row at line " +
                        std::to_string(line_no));
    }
    double sys, loss, spad;
    try {
      sys = std::stod(f[c_sys]) / 100.0;
      loss = std::stod(f[c_loss]);
      spad = std::stod(f[c_spad]) / 100.0;
    } catch (const std::exception&) {
      throw ConfigError("coupling: malformed CSV row at line " +
                        std::to_string(line_no));
    }
    const double coupling = coupling_loss(sys, loss, spad);
    if (coupling < 0.0) {
      std::cerr << "warning: negative coupling loss at line " << line_no << "\n";
    }
    for (const auto& field : f) body << field << ',';
    char rounded[32];
    std::snprintf(rounded, sizeof(rounded), "%.2f", coupling);
    body << rounded << "\r\n";
  }

  if (out_path.empty() || out_path == "-") {
    std::cout << body.str();
  } else {
    open_out(out_path) << body.str();
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated SPAD array and decoy-state BB84 link simulator"};
  app.require_subcommand(1);

  CommonOpts common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file (overrides preset)");
    sub->add_option("--preset", common.preset, "Parameter preset: cold or room")
        ->check(CLI::IsMember({"cold", "room"}));
    sub->add_option("--seed", common.seed, "RNG seed");
  };

  // characterize
  auto* c_char = app.add_subcommand("characterize",
                                    "Simulate the array characterization runs and "
                                    "write the estimator report");
  std::uint64_t gates = 100'000'000;
  std::string out_dir = "out";
  std::string events_path;
  add_common(c_char);
  c_char->add_option("--gates", gates, "Gates per run");
  c_char->add_option("--pixels", common.pixels, "Array size");
  c_char->add_option("--out", out_dir, "Output directory");
  c_char->add_option("--events", events_path, "Optional avalanche event dump CSV");

  // sweep
  auto* c_sweep = app.add_subcommand("sweep", "Key rate vs channel attenuation");
  double start_db = 0.0, stop_db = 26.0, step_db = 2.0;
  std::string points, mode = "analytic";
  std::optional<double> db_per_km;
  double block_bits_override = 0.0;
  add_common(c_sweep);
  c_sweep->add_option("--start", start_db, "Grid start, dB");
  c_sweep->add_option("--stop", stop_db, "Grid stop, dB");
  c_sweep->add_option("--step", step_db, "Grid step, dB");
  c_sweep->add_option("--points", points, "Explicit comma-separated dB list");
  c_sweep->add_option("--mode", mode, "analytic|montecarlo|both");
  c_sweep->add_option("--out", out_dir, "Output directory");
  c_sweep->add_option("--db-per-km", db_per_km, "Loss coefficient for the km column");
  c_sweep->add_option("--block-bits", block_bits_override, "Override finite-key block size");

  // point
  auto* c_point = app.add_subcommand("point", "Single operating point report");
  std::optional<double> att_db, fibre_km, loss_override;
  add_common(c_point);
  c_point->add_option("--attenuation-db", att_db, "Channel attenuation, dB");
  c_point->add_option("--fibre-km", fibre_km, "Fibre length, km");
  c_point->add_option("--loss-override-db", loss_override,
                      "Measured spool loss overriding km x dB/km");
  c_point->add_option("--db-per-km", db_per_km, "Loss coefficient");
  c_point->add_option("--mode", mode, "analytic|montecarlo");
  c_point->add_option("--block-bits", block_bits_override, "Override finite-key block size");

  // coupling
  auto* c_coupling = app.add_subcommand("coupling",
                                        "Append coupling_loss_db to a coupling table");
  std::string in_path, coupling_out;
  c_coupling->add_option("--in", in_path, "Input CSV")->required();
  c_coupling->add_option("--out", coupling_out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (c_char->parsed()) {
      return cmd_characterize(common, gates, out_dir, events_path);
    }
    if (c_sweep->parsed()) {
      return cmd_sweep(common, start_db, stop_db, step_db,
                       c_sweep->count("--points") > 0, points, mode, out_dir,
                       db_per_km, block_bits_override);
    }
    if (c_point->parsed()) {
      return cmd_point(common, att_db, fibre_km, loss_override, db_per_km, mode,
                       block_bits_override);
    }
    if (c_coupling->parsed()) {
      return cmd_coupling(in_path, coupling_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ModelError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitModel;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitModel;
  }
  return kExitOk;
}
