#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd =
      (env.empty() ? "" : env + " ") + std::string(QKDSIM_CLI_PATH) + " " + args +
      " 2>/dev/null";
  RunResult res;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) {
    res.out.append(buf.data(), n);
  }
  const int status = pclose(pipe);
  res.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("qkdsim_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("coupling: four-device table gains a rounded loss column") {
  const fs::path dir = temp_dir("coupling");
  {
    std::ofstream in(dir / "table.csv", std::ios::binary);
    in << "system_spde_pct,channel_loss_db,spad_spde_pct\r\n"
       << "10.25,1.97,17.0\r\n"
       << "10.36,0.72,14.3\r\n"
       << "10.27,0.89,13.8\r\n"
       << "10.42,1.15,14.3\r\n";
  }
  const RunResult res =
      run_cli("coupling --in " + (dir / "table.csv").string());
  CHECK(res.code == 0);
  CHECK(res.out.find("coupling_loss_db") != std::string::npos);
  CHECK(res.out.find("0.23") != std::string::npos);
  CHECK(res.out.find("0.68") != std::string::npos);
  CHECK(res.out.find("0.39") != std::string::npos);
  CHECK(res.out.find("0.22") != std::string::npos);

  // Identity row rounds to exactly zero.
  {
    std::ofstream in(dir / "id.csv", std::ios::binary);
    in << "system_spde_pct,channel_loss_db,spad_spde_pct\r\n"
       << "12.0,0.0,12.0\r\n";
  }
  const RunResult id = run_cli("coupling --in " + (dir / "id.csv").string());
  CHECK(id.code == 0);
  CHECK(id.out.find("0.00") != std::string::npos);
}

TEST_CASE("coupling: malformed input is a validation error naming the line") {
  const fs::path dir = temp_dir("coupling_bad");
  {
    std::ofstream in(dir / "missing.csv", std::ios::binary);
    in << "system_spde_pct,channel_loss_db\r\n10.25,1.97\r\n";
  }
  CHECK(run_cli("coupling --in " + (dir / "missing.csv").string()).code == 2);
  {
    std::ofstream in(dir / "badrow.csv", std::ios::binary);
    in << "system_spde_pct,channel_loss_db,spad_spde_pct\r\n"
       << "10.25,1.97,17.0\r\n"
       << "oops,1.0,12.0\r\n";
  }
  CHECK(run_cli("coupling --in " + (dir / "badrow.csv").string()).code == 2);
}

TEST_CASE("point: analytic reports land in the published bands") {
  const RunResult cold0 = run_cli("point --preset cold --attenuation-db 0 --mode analytic");
  REQUIRE(cold0.code == 0);
  const json j0 = json::parse(cold0.out);
  CHECK(j0.at("secure_rate_hz").get<double>() >= 0.5e6);
  CHECK(j0.at("secure_rate_hz").get<double>() <= 2.0e6);

  const RunResult spool = run_cli(
      "point --preset cold --fibre-km 100 --loss-override-db 19.2 --mode analytic");
  REQUIRE(spool.code == 0);
  const json js = json::parse(spool.out);
  CHECK(js.at("secure_rate_hz").get<double>() >= 7.5e3);
  CHECK(js.at("secure_rate_hz").get<double>() <= 3.0e4);

  const RunResult room0 = run_cli("point --preset room --attenuation-db 0 --mode analytic");
  REQUIRE(room0.code == 0);
  const json jr = json::parse(room0.out);
  CHECK(jr.at("secure_rate_hz").get<double>() >= 1.0e6);
  CHECK(jr.at("secure_rate_hz").get<double>() <= 4.2e6);
}

TEST_CASE("point: config file overrides and validation failures") {
  const fs::path dir = temp_dir("point_cfg");
  {
    std::ofstream cfg(dir / "override.json");
    cfg << R"({"receiver": {"visibility": 0.99}})";
  }
  const RunResult ok = run_cli("point --preset cold --attenuation-db 5 --config " +
                               (dir / "override.json").string());
  CHECK(ok.code == 0);
  // Better visibility means lower QBER than the preset default.
  const RunResult base = run_cli("point --preset cold --attenuation-db 5");
  CHECK(json::parse(ok.out).at("qber_majority").get<double>() <
        json::parse(base.out).at("qber_majority").get<double>());

  {
    std::ofstream cfg(dir / "broken.json");
    cfg << R"({"protocol": {"mu_decoy": 0.9}})";  // above mu_signal
  }
  CHECK(run_cli("point --preset cold --attenuation-db 5 --config " +
                (dir / "broken.json").string())
            .code == 2);
  CHECK(run_cli("point --preset nosuch --attenuation-db 5").code == 2);
}

TEST_CASE("sweep: exact CSV header, km column, and a sidecar per row") {
  const fs::path dir = temp_dir("sweep");
  const RunResult res = run_cli("sweep --preset cold --points 0,9,18 --mode analytic --out " +
                                dir.string());
  REQUIRE(res.code == 0);
  const std::string csv = slurp(dir / "sweep.csv");
  CHECK(csv.starts_with(
      "attenuation_db,equivalent_km,raw_rate_hz,qber,secure_rate_hz,mode\r\n"));
  int rows = 0;
  for (std::size_t pos = 0; (pos = csv.find("\r\n", pos)) != std::string::npos;
       pos += 2) {
    ++rows;
  }
  CHECK(rows == 4);  // header + one per grid point
  CHECK(csv.find(",50,") != std::string::npos);  // 9 dB at 0.18 dB/km

  const json sidecar = json::parse(slurp(dir / "sweep.json"));
  REQUIRE(sidecar.size() == 3);
  CHECK(sidecar.at(0).at("report").contains("s1"));

  CHECK(run_cli("sweep --preset cold --points '' --out " + dir.string()).code == 2);
  CHECK(run_cli("sweep --preset cold --start 5 --stop 0 --step 1 --out " +
                dir.string())
            .code == 2);
}

TEST_CASE("characterize: rejects zero gates, writes report and matrices") {
  const fs::path dir = temp_dir("charact");
  CHECK(run_cli("characterize --preset cold --gates 0 --out " + dir.string()).code == 2);

  const RunResult res = run_cli(
      "characterize --preset cold --pixels 2 --gates 3000000 --seed 5 --out " +
      dir.string() + " --events " + (dir / "events.csv").string());
  REQUIRE(res.code == 0);
  const json report = json::parse(slurp(dir / "report.json"));
  CHECK(report.at("spde").size() == 2);
  CHECK(report.at("dcr_per_gate").size() == 2);
  CHECK(report.contains("crosstalk"));
  const std::string sync_csv = slurp(dir / "crosstalk_sync.csv");
  CHECK(sync_csv.starts_with("aggressor,pixel_0,pixel_1\r\n"));
  const std::string events = slurp(dir / "events.csv");
  CHECK(events.starts_with("gate_index,pixel,cause,aggressor_pixel\r\n"));
  CHECK(events.find("photon") != std::string::npos);
}

TEST_CASE("unwritable output path is an I/O error") {
  CHECK(run_cli("sweep --preset cold --points 0 --mode analytic --out "
                "/proc/qkdsim_nowrite")
            .code == 3);
}

TEST_CASE("characterize: four-pixel array recovers the device figures") {
  const fs::path dir = temp_dir("charact4");
  const RunResult res = run_cli(
      "characterize --preset cold --pixels 4 --gates 20000000 --seed 7 --out " +
      dir.string());
  REQUIRE(res.code == 0);
  const json report = json::parse(slurp(dir / "report.json"));
  REQUIRE(report.at("spde").size() == 4);
  for (int p = 0; p < 4; ++p) {
    CHECK(std::abs(report.at("spde").at(p).at("value").get<double>() - 0.15) < 0.01);
    CHECK(report.at("apr").at(p).at("value").get<double>() < 0.04);
    CHECK(report.at("dcr_hz").at(p).at("value").get<double>() < 8000.0);
  }
}

TEST_CASE("sweep: secure rate positive through 22 dB, zero by 26 dB") {
  const fs::path dir = temp_dir("sweep_range");
  const RunResult res = run_cli(
      "sweep --preset cold --start 0 --stop 26 --step 2 --mode analytic --out " +
      dir.string());
  REQUIRE(res.code == 0);
  std::istringstream csv(slurp(dir / "sweep.csv"));
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    std::array<std::string, 6> field;
    std::stringstream ss(line);
    for (auto& f : field) std::getline(ss, f, ',');
    const double att = std::stod(field[0]);
    const double secure = std::stod(field[4]);
    if (att <= 22.0) {
      CHECK(secure > 0.0);
    }
    if (att >= 26.0) {
      CHECK(secure == 0.0);
    }
  }
}

TEST_CASE("repeated runs with the same seed are byte-identical") {
  const fs::path a = temp_dir("det_a");
  const fs::path b = temp_dir("det_b");

  REQUIRE(run_cli("characterize --preset cold --pixels 2 --gates 2000000 --seed 9 --out " +
                  a.string())
              .code == 0);
  REQUIRE(run_cli("characterize --preset cold --pixels 2 --gates 2000000 --seed 9 --out " +
                  b.string())
              .code == 0);
  CHECK(slurp(a / "report.json") == slurp(b / "report.json"));
  CHECK(slurp(a / "crosstalk_sync.csv") == slurp(b / "crosstalk_sync.csv"));

  REQUIRE(run_cli("sweep --preset cold --points 0,12 --mode analytic --out " +
                  a.string())
              .code == 0);
  REQUIRE(run_cli("sweep --preset cold --points 0,12 --mode analytic --out " +
                  b.string())
              .code == 0);
  CHECK(slurp(a / "sweep.csv") == slurp(b / "sweep.csv"));
  CHECK(slurp(a / "sweep.json") == slurp(b / "sweep.json"));

  const RunResult mc1 =
      run_cli("point --preset cold --attenuation-db 0 --mode montecarlo "
              "--block-bits 200000 --seed 21");
  const RunResult mc2 =
      run_cli("point --preset cold --attenuation-db 0 --mode montecarlo "
              "--block-bits 200000 --seed 21");
  REQUIRE(mc1.code == 0);
  CHECK(mc1.out == mc2.out);
  const RunResult mc3 =
      run_cli("point --preset cold --attenuation-db 0 --mode montecarlo "
              "--block-bits 200000 --seed 22");
  CHECK(mc3.out != mc1.out);

  // The worker-pool size must not influence the result.
  const RunResult one_thread =
      run_cli("point --preset cold --attenuation-db 0 --mode montecarlo "
              "--block-bits 200000 --seed 21",
              "QKDSIM_THREADS=1");
  CHECK(one_thread.out == mc1.out);
}

TEST_CASE("sweep in both modes emits one row per point per mode") {
  const fs::path dir = temp_dir("sweep_both");
  const RunResult res = run_cli(
      "sweep --preset cold --points 0 --mode both --block-bits 200000 --out " +
      dir.string());
  REQUIRE(res.code == 0);
  const std::string csv = slurp(dir / "sweep.csv");
  CHECK(csv.find(",analytic\r\n") != std::string::npos);
  CHECK(csv.find(",montecarlo\r\n") != std::string::npos);
  const json sidecar = json::parse(slurp(dir / "sweep.json"));
  CHECK(sidecar.size() == 2);
}
