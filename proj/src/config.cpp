#include "qkdsim/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace qkdsim {

using nlohmann::json;

std::uint32_t DetectorConfig::deadtime_gates() const {
  if (deadtime_ns <= 0.0) return 1;
  const double gates = deadtime_ns / gate_period_ns();
  // First gate at or after the end of the dead window is live again.
  const double up = std::ceil(gates - 1e-9);
  return static_cast<std::uint32_t>(std::max(1.0, up));
}

ArrayConfig ArrayConfig::uniform(int n_pixels, const DetectorConfig& det, double xt) {
  ArrayConfig a;
  a.n_pixels = n_pixels;
  a.pixel_configs.assign(n_pixels, det);
  a.crosstalk_intrinsic = Eigen::MatrixXd::Constant(n_pixels, n_pixels, xt);
  a.crosstalk_intrinsic.diagonal().setZero();
  return a;
}

double ChannelConfig::total_db() const {
  if (loss_override_db) return *loss_override_db;
  if (attenuation_db) return *attenuation_db;
  if (fibre_km) return *fibre_km * db_per_km;
  return 0.0;
}

std::string ValidationReport::joined() const {
  std::ostringstream os;
  for (const auto& e : errors) os << e << "\n";
  return os.str();
}

namespace {

class Checker {
 public:
  explicit Checker(ValidationReport& report) : report_(report) {}
  void require(bool ok, const std::string& path, const std::string& message) {
    if (!ok) report_.errors.push_back(path + ": " + message);
  }

 private:
  ValidationReport& report_;
};

void validate_detector(Checker& c, const DetectorConfig& d, const std::string& path) {
  c.require(d.spde >= 0.0 && d.spde <= 1.0, path + ".spde", "must lie in [0, 1]");
  c.require(d.dcr_hz >= 0.0 && std::isfinite(d.dcr_hz), path + ".dcr_hz", "must be >= 0");
  c.require(d.afterpulse_total >= 0.0 && d.afterpulse_total < 1.0,
            path + ".afterpulse_total", "must lie in [0, 1)");
  c.require(d.deadtime_ns >= 0.0, path + ".deadtime_ns", "must be >= 0");
  c.require(d.gate_rate_ghz > 0.0, path + ".gate_rate_ghz", "must be > 0");
  c.require(d.gate_width_ps > 0.0 &&
                d.gate_width_ps <= d.gate_period_ns() * 1000.0 + 1e-9,
            path + ".gate_width_ps", "must lie in (0, gate period]");
  c.require(d.trap_tau_ns > 0.0, path + ".trap_tau_ns", "must be > 0");
  if (d.afterpulse_total > 0.0 && d.trap_tau_ns > 0.0) {
    // The per-gate hazard scale is ap * (1-b) * exp(deadtime/tau); keep the
    // exponent inside double range.
    c.require(d.deadtime_ns / d.trap_tau_ns < 600.0, path + ".trap_tau_ns",
              "deadtime_ns / trap_tau_ns too large for the trap model");
  }
}

}  // namespace

ValidationReport validate_config(const SystemConfig& cfg) {
  ValidationReport report;
  Checker c(report);

  const auto& a = cfg.array;
  c.require(a.n_pixels >= 1, "array.n_pixels", "must be >= 1");
  c.require(static_cast<int>(a.pixel_configs.size()) == a.n_pixels,
            "array.pixel_configs", "must have n_pixels entries");
  for (std::size_t i = 0; i < a.pixel_configs.size(); ++i) {
    validate_detector(c, a.pixel_configs[i], "array.pixel_configs[" + std::to_string(i) + "]");
  }
  c.require(a.crosstalk_intrinsic.rows() == a.n_pixels &&
                a.crosstalk_intrinsic.cols() == a.n_pixels,
            "array.crosstalk_intrinsic", "must be n_pixels x n_pixels");
  if (a.crosstalk_intrinsic.rows() == a.n_pixels &&
      a.crosstalk_intrinsic.cols() == a.n_pixels) {
    bool in_range = true;
    bool zero_diag = true;
    for (int i = 0; i < a.n_pixels; ++i) {
      for (int j = 0; j < a.n_pixels; ++j) {
        const double v = a.crosstalk_intrinsic(i, j);
        if (!(v >= 0.0 && v < 1.0)) in_range = false;
        if (i == j && v != 0.0) zero_diag = false;
      }
    }
    c.require(in_range, "array.crosstalk_intrinsic", "entries must lie in [0, 1)");
    c.require(zero_diag, "array.crosstalk_intrinsic", "diagonal must be zero");
  }
  c.require(a.formation_tau_ns > 0.0, "array.formation_tau_ns", "must be > 0");

  const auto& ch = cfg.channel;
  c.require(ch.attenuation_db.has_value() != ch.fibre_km.has_value(),
            "channel", "exactly one of attenuation_db or fibre_km must be set");
  if (ch.attenuation_db) {
    c.require(*ch.attenuation_db >= 0.0 && std::isfinite(*ch.attenuation_db),
              "channel.attenuation_db", "must be >= 0 and finite");
  }
  if (ch.fibre_km) {
    c.require(*ch.fibre_km >= 0.0, "channel.fibre_km", "must be >= 0");
  }
  c.require(ch.db_per_km > 0.0, "channel.db_per_km", "must be > 0");
  c.require(!ch.loss_override_db || ch.fibre_km,
            "channel.loss_override_db", "only valid together with fibre_km");

  const auto& r = cfg.receiver;
  c.require(r.insertion_loss_db >= 0.0 && std::isfinite(r.insertion_loss_db),
            "receiver.insertion_loss_db", "must be >= 0 and finite");
  c.require(r.visibility > 0.5 && r.visibility <= 1.0, "receiver.visibility",
            "must lie in (0.5, 1]");
  c.require(r.efficiency_mismatch_max >= 0.0, "receiver.efficiency_mismatch_max",
            "must be >= 0");
  c.require(r.timebin_acceptance > 0.0 && r.timebin_acceptance <= 1.0,
            "receiver.timebin_acceptance", "must lie in (0, 1]");

  const auto& p = cfg.protocol;
  c.require(p.rep_rate_ghz > 0.0, "protocol.rep_rate_ghz", "must be > 0");
  c.require(p.mu_signal > p.mu_decoy,
            "protocol.mu_signal/mu_decoy", "must satisfy mu_signal > mu_decoy");
  c.require(p.mu_decoy > p.mu_vacuum,
            "protocol.mu_decoy/mu_vacuum", "must satisfy mu_decoy > mu_vacuum");
  c.require(p.mu_vacuum >= 0.0, "protocol.mu_vacuum", "must be >= 0");
  c.require(p.p_signal > 0.0 && p.p_decoy > 0.0 && p.p_vacuum > 0.0,
            "protocol.p_*", "emission probabilities must be positive");
  c.require(std::abs(p.p_signal + p.p_decoy + p.p_vacuum - 1.0) <= 1e-9,
            "protocol.p_*", "emission probabilities must sum to 1");
  c.require(p.basis_bias >= 0.5 && p.basis_bias <= 1.0, "protocol.basis_bias",
            "must lie in [0.5, 1]");
  c.require(p.pattern_length >= 1, "protocol.pattern_length", "must be >= 1");

  const auto& fk = cfg.finite_key;
  c.require(fk.block_bits > 0.0, "finite_key.block_bits", "must be > 0");
  c.require(fk.eps_sec > 0.0 && fk.eps_sec < 1.0, "finite_key.eps_sec",
            "must lie in (0, 1)");
  c.require(fk.f_ec >= 1.0, "finite_key.f_ec", "must be >= 1");

  return report;
}

SystemConfig validated(SystemConfig cfg) {
  const auto report = validate_config(cfg);
  if (!report.ok()) {
    throw ConfigError("invalid configuration:\n" + report.joined());
  }
  return cfg;
}

namespace {

SystemConfig make_preset(const std::string& name, int n_pixels,
                         double spde, double apr, double combined_dcr_hz) {
  SystemConfig cfg;
  cfg.preset_name = name;
  DetectorConfig det;
  det.spde = spde;
  det.afterpulse_total = apr;
  det.dcr_hz = combined_dcr_hz / 2.0;  // combined figure is quoted over two pixels
  det.deadtime_ns = 100.0;
  det.gate_rate_ghz = 1.0;
  det.gate_width_ps = 400.0;
  det.trap_tau_ns = 50.0;
  cfg.array = ArrayConfig::uniform(n_pixels, det, 0.01);
  cfg.array.formation_tau_ns = 2.5;
  cfg.channel = ChannelConfig::from_db(0.0);
  cfg.receiver = ReceiverConfig{};
  cfg.protocol = ProtocolConfig{};
  cfg.finite_key = FiniteKeyConfig{};
  return cfg;
}

}  // namespace

SystemConfig cold_preset(int n_pixels) {
  return make_preset("cold", n_pixels, 0.150, 0.0223, 3860.0);
}

SystemConfig room_preset(int n_pixels) {
  return make_preset("room", n_pixels, 0.190, 0.0147, 130000.0);
}

SystemConfig preset_by_name(const std::string& name, int n_pixels) {
  if (name == "cold") return cold_preset(n_pixels);
  if (name == "room") return room_preset(n_pixels);
  throw ConfigError("unknown preset '" + name + "' (expected cold or room)");
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace {

json detector_to_json(const DetectorConfig& d) {
  return json{{"spde", d.spde},
              {"dcr_hz", d.dcr_hz},
              {"afterpulse_total", d.afterpulse_total},
              {"deadtime_ns", d.deadtime_ns},
              {"gate_rate_ghz", d.gate_rate_ghz},
              {"gate_width_ps", d.gate_width_ps},
              {"trap_tau_ns", d.trap_tau_ns}};
}

void detector_from_json(const json& j, DetectorConfig& d) {
  d.spde = j.value("spde", d.spde);
  d.dcr_hz = j.value("dcr_hz", d.dcr_hz);
  d.afterpulse_total = j.value("afterpulse_total", d.afterpulse_total);
  d.deadtime_ns = j.value("deadtime_ns", d.deadtime_ns);
  d.gate_rate_ghz = j.value("gate_rate_ghz", d.gate_rate_ghz);
  d.gate_width_ps = j.value("gate_width_ps", d.gate_width_ps);
  d.trap_tau_ns = j.value("trap_tau_ns", d.trap_tau_ns);
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j.at(i).at(c).get<double>();
  }
  return m;
}

}  // namespace

std::string config_to_json(const SystemConfig& cfg, int indent) {
  json j;
  j["preset"] = cfg.preset_name;

  json arr;
  arr["n_pixels"] = cfg.array.n_pixels;
  json pixels = json::array();
  for (const auto& d : cfg.array.pixel_configs) pixels.push_back(detector_to_json(d));
  arr["pixel_configs"] = std::move(pixels);
  arr["crosstalk_intrinsic"] = matrix_to_json(cfg.array.crosstalk_intrinsic);
  arr["formation_tau_ns"] = cfg.array.formation_tau_ns;
  arr["universal_deadtime"] = cfg.array.universal_deadtime;
  j["array"] = std::move(arr);

  json ch;
  if (cfg.channel.attenuation_db) ch["attenuation_db"] = *cfg.channel.attenuation_db;
  if (cfg.channel.fibre_km) ch["fibre_km"] = *cfg.channel.fibre_km;
  ch["db_per_km"] = cfg.channel.db_per_km;
  if (cfg.channel.loss_override_db) ch["loss_override_db"] = *cfg.channel.loss_override_db;
  j["channel"] = std::move(ch);

  j["receiver"] = json{{"insertion_loss_db", cfg.receiver.insertion_loss_db},
                       {"visibility", cfg.receiver.visibility},
                       {"efficiency_mismatch_max", cfg.receiver.efficiency_mismatch_max},
                       {"timebin_acceptance", cfg.receiver.timebin_acceptance}};

  j["protocol"] = json{{"rep_rate_ghz", cfg.protocol.rep_rate_ghz},
                       {"mu_signal", cfg.protocol.mu_signal},
                       {"mu_decoy", cfg.protocol.mu_decoy},
                       {"mu_vacuum", cfg.protocol.mu_vacuum},
                       {"p_signal", cfg.protocol.p_signal},
                       {"p_decoy", cfg.protocol.p_decoy},
                       {"p_vacuum", cfg.protocol.p_vacuum},
                       {"basis_bias", cfg.protocol.basis_bias},
                       {"pattern_length", cfg.protocol.pattern_length}};

  j["finite_key"] = json{{"block_bits", cfg.finite_key.block_bits},
                         {"eps_sec", cfg.finite_key.eps_sec},
                         {"f_ec", cfg.finite_key.f_ec}};

  j["rng"] = json{{"seed", cfg.rng.seed}, {"stream_id", cfg.rng.stream_id}};
  return j.dump(indent) + "\n";
}

SystemConfig config_from_json(const std::string& json_text, const SystemConfig& base) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config JSON parse error: ") + e.what());
  }

  SystemConfig cfg = base;
  if (j.contains("preset") && j.at("preset").is_string() &&
      j.at("preset").get<std::string>() != base.preset_name) {
    const auto name = j.at("preset").get<std::string>();
    if (name != "custom") cfg = preset_by_name(name, base.array.n_pixels);
  }

  try {
    if (j.contains("array")) {
      const auto& ja = j.at("array");
      if (ja.contains("n_pixels")) {
        const int n = ja.at("n_pixels").get<int>();
        if (n != cfg.array.n_pixels && n >= 1) {
          const DetectorConfig det = cfg.array.pixel_configs.empty()
                                         ? DetectorConfig{}
                                         : cfg.array.pixel_configs.front();
          const double xt = cfg.array.crosstalk_intrinsic.size() > 0 &&
                                    cfg.array.n_pixels > 1
                                ? cfg.array.crosstalk_intrinsic(0, 1)
                                : 0.0;
          const double tau = cfg.array.formation_tau_ns;
          const bool universal = cfg.array.universal_deadtime;
          cfg.array = ArrayConfig::uniform(n, det, xt);
          cfg.array.formation_tau_ns = tau;
          cfg.array.universal_deadtime = universal;
        }
      }
      if (ja.contains("pixel_configs")) {
        const auto& jp = ja.at("pixel_configs");
        if (jp.size() == 1) {
          // A single entry applies to every pixel.
          for (auto& d : cfg.array.pixel_configs) detector_from_json(jp.at(0), d);
        } else {
          cfg.array.pixel_configs.resize(jp.size());
          cfg.array.n_pixels = static_cast<int>(jp.size());
          for (std::size_t i = 0; i < jp.size(); ++i) {
            detector_from_json(jp.at(i), cfg.array.pixel_configs[i]);
          }
          if (cfg.array.crosstalk_intrinsic.rows() != cfg.array.n_pixels) {
            const double xt = cfg.array.crosstalk_intrinsic.size() > 1
                                  ? cfg.array.crosstalk_intrinsic(0, 1)
                                  : 0.0;
            cfg.array.crosstalk_intrinsic = Eigen::MatrixXd::Constant(
                cfg.array.n_pixels, cfg.array.n_pixels, xt);
            cfg.array.crosstalk_intrinsic.diagonal().setZero();
          }
        }
      }
      if (ja.contains("crosstalk_intrinsic")) {
        cfg.array.crosstalk_intrinsic = matrix_from_json(ja.at("crosstalk_intrinsic"));
      }
      cfg.array.formation_tau_ns = ja.value("formation_tau_ns", cfg.array.formation_tau_ns);
      cfg.array.universal_deadtime = ja.value("universal_deadtime", cfg.array.universal_deadtime);
    }

    if (j.contains("channel")) {
      const auto& jc = j.at("channel");
      if (jc.contains("attenuation_db")) {
        cfg.channel.attenuation_db = jc.at("attenuation_db").get<double>();
        cfg.channel.fibre_km.reset();
        cfg.channel.loss_override_db.reset();
      }
      if (jc.contains("fibre_km")) {
        cfg.channel.fibre_km = jc.at("fibre_km").get<double>();
        cfg.channel.attenuation_db.reset();
      }
      cfg.channel.db_per_km = jc.value("db_per_km", cfg.channel.db_per_km);
      if (jc.contains("loss_override_db")) {
        cfg.channel.loss_override_db = jc.at("loss_override_db").get<double>();
      }
    }

    if (j.contains("receiver")) {
      const auto& jr = j.at("receiver");
      cfg.receiver.insertion_loss_db = jr.value("insertion_loss_db", cfg.receiver.insertion_loss_db);
      cfg.receiver.visibility = jr.value("visibility", cfg.receiver.visibility);
      cfg.receiver.efficiency_mismatch_max =
          jr.value("efficiency_mismatch_max", cfg.receiver.efficiency_mismatch_max);
      cfg.receiver.timebin_acceptance =
          jr.value("timebin_acceptance", cfg.receiver.timebin_acceptance);
    }

    if (j.contains("protocol")) {
      const auto& jp = j.at("protocol");
      auto& p = cfg.protocol;
      p.rep_rate_ghz = jp.value("rep_rate_ghz", p.rep_rate_ghz);
      p.mu_signal = jp.value("mu_signal", p.mu_signal);
      p.mu_decoy = jp.value("mu_decoy", p.mu_decoy);
      p.mu_vacuum = jp.value("mu_vacuum", p.mu_vacuum);
      p.p_signal = jp.value("p_signal", p.p_signal);
      p.p_decoy = jp.value("p_decoy", p.p_decoy);
      p.p_vacuum = jp.value("p_vacuum", p.p_vacuum);
      p.basis_bias = jp.value("basis_bias", p.basis_bias);
      p.pattern_length = jp.value("pattern_length", p.pattern_length);
    }

    if (j.contains("finite_key")) {
      const auto& jf = j.at("finite_key");
      cfg.finite_key.block_bits = jf.value("block_bits", cfg.finite_key.block_bits);
      cfg.finite_key.eps_sec = jf.value("eps_sec", cfg.finite_key.eps_sec);
      cfg.finite_key.f_ec = jf.value("f_ec", cfg.finite_key.f_ec);
    }

    if (j.contains("rng")) {
      const auto& jr = j.at("rng");
      cfg.rng.seed = jr.value("seed", cfg.rng.seed);
      cfg.rng.stream_id = jr.value("stream_id", cfg.rng.stream_id);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config JSON field error: ") + e.what());
  }

  return cfg;
}

SystemConfig load_config_file(const std::string& path, const SystemConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str(), base);
}

}  // namespace qkdsim
