#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "qkdsim/config.hpp"
#include "qkdsim/rng.hpp"
#include "qkdsim/units.hpp"

using namespace qkdsim;

TEST_CASE("db_to_transmittance pinned values") {
  CHECK(db_to_transmittance(0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(db_to_transmittance(10.0) == doctest::Approx(0.1).epsilon(1e-15));
  // 19.2 dB: high-precision oracle 10^(-1.92)
  CHECK(db_to_transmittance(19.2) ==
        doctest::Approx(0.012022644346174129).epsilon(1e-12));
  CHECK_THROWS_AS(db_to_transmittance(std::nan("")), std::invalid_argument);
}

TEST_CASE("db_to_transmittance is multiplicative over dB addition") {
  RandomStream rs(RngSpec{7, 0});
  for (int i = 0; i < 200; ++i) {
    const double a = 40.0 * rs.uniform();
    const double b = 40.0 * rs.uniform();
    const double lhs = db_to_transmittance(a + b);
    const double rhs = db_to_transmittance(a) * db_to_transmittance(b);
    CHECK(std::abs(lhs - rhs) <= 1e-12 * std::abs(rhs));
  }
}

TEST_CASE("binary entropy pinned values and symmetry") {
  CHECK(binary_entropy(0.0) == 0.0);
  CHECK(binary_entropy(1.0) == 0.0);
  CHECK(binary_entropy(0.5) == doctest::Approx(1.0).epsilon(1e-15));
  // h(0.11), high-precision oracle
  CHECK(binary_entropy(0.11) == doctest::Approx(0.4999159581645280).epsilon(1e-12));
  CHECK_THROWS_AS(binary_entropy(-0.01), std::domain_error);
  CHECK_THROWS_AS(binary_entropy(1.01), std::domain_error);
  for (int i = 1; i < 1000; ++i) {
    const double p = i / 1000.0;
    CHECK(binary_entropy(p) == doctest::Approx(binary_entropy(1.0 - p)).epsilon(1e-13));
  }
}

TEST_CASE("philox4x32-10 known-answer vectors") {
  using A4 = std::array<std::uint32_t, 4>;
  using A2 = std::array<std::uint32_t, 2>;
  CHECK(detail::philox4x32(A4{0, 0, 0, 0}, A2{0, 0}) ==
        A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  CHECK(detail::philox4x32(A4{0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                           A2{0xffffffffu, 0xffffffffu}) ==
        A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
  CHECK(detail::philox4x32(A4{0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                           A2{0xa4093822u, 0x299f31d0u}) ==
        A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("random streams are deterministic and distinct") {
  RandomStream a(RngSpec{42, 3});
  RandomStream b(RngSpec{42, 3});
  RandomStream c(RngSpec{42, 4});
  RandomStream d(RngSpec{43, 3});
  bool same_ab = true, same_ac = true, same_ad = true;
  for (int i = 0; i < 1000; ++i) {
    const auto va = a.next_u64();
    same_ab &= va == b.next_u64();
    same_ac &= va == c.next_u64();
    same_ad &= va == d.next_u64();
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);
  CHECK_FALSE(same_ad);
}

TEST_CASE("uniform, exponential and poisson samplers have the right moments") {
  RandomStream rs(RngSpec{2024, 0});
  const int n = 200000;
  double sum_u = 0, sum_e = 0, sum_p = 0, sum_p2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rs.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum_u += u;
    sum_e += rs.exponential(2.5);
    const double k = static_cast<double>(rs.poisson(3.7));
    sum_p += k;
    sum_p2 += k * k;
  }
  CHECK(sum_u / n == doctest::Approx(0.5).epsilon(0.005));
  CHECK(sum_e / n == doctest::Approx(2.5).epsilon(0.01));
  const double mean_p = sum_p / n;
  CHECK(mean_p == doctest::Approx(3.7).epsilon(0.01));
  CHECK(sum_p2 / n - mean_p * mean_p == doctest::Approx(3.7).epsilon(0.03));
}

TEST_CASE("presets validate") {
  for (const auto* name : {"cold", "room"}) {
    const SystemConfig cfg = preset_by_name(name);
    const auto report = validate_config(cfg);
    CHECK_MESSAGE(report.ok(), report.joined());
  }
  const SystemConfig cold = cold_preset();
  CHECK(cold.array.pixel(0).spde == doctest::Approx(0.150));
  CHECK(cold.array.pixel(0).afterpulse_total == doctest::Approx(0.0223));
  // Combined 3.86 kHz over two pixels.
  CHECK(cold.array.pixel(0).dcr_hz + cold.array.pixel(1).dcr_hz ==
        doctest::Approx(3860.0));
  CHECK(cold.array.pixel(0).deadtime_gates() == 100);
  const SystemConfig room = room_preset();
  CHECK(room.array.pixel(0).spde == doctest::Approx(0.190));
  CHECK(room.array.pixel(0).dcr_hz + room.array.pixel(1).dcr_hz ==
        doctest::Approx(130000.0));
}

TEST_CASE("validation aggregates every violation with the field path") {
  SystemConfig cfg = cold_preset();
  cfg.protocol.mu_decoy = 0.5;  // above mu_signal
  cfg.protocol.p_signal = 0.9;  // probabilities no longer sum to 1
  const auto report = validate_config(cfg);
  REQUIRE_FALSE(report.ok());
  CHECK(report.errors.size() >= 2);
  bool saw_mu = false, saw_prob = false;
  for (const auto& e : report.errors) {
    if (e.find("mu_signal") != std::string::npos) saw_mu = true;
    if (e.find("sum to 1") != std::string::npos) saw_prob = true;
  }
  CHECK(saw_mu);
  CHECK(saw_prob);
  CHECK_THROWS_AS(validated(cfg), ConfigError);
}

TEST_CASE("channel config requires exactly one mode") {
  SystemConfig cfg = cold_preset();
  cfg.channel.attenuation_db = 5.0;
  cfg.channel.fibre_km = 10.0;
  CHECK_FALSE(validate_config(cfg).ok());
  cfg.channel.attenuation_db.reset();
  CHECK(validate_config(cfg).ok());
  CHECK(cfg.channel.total_db() == doctest::Approx(1.8));  // 10 km x 0.18
  cfg.channel.loss_override_db = 19.2;
  CHECK(cfg.channel.total_db() == doctest::Approx(19.2));
  CHECK(validate_config(cfg).ok());
}

TEST_CASE("config JSON round trip") {
  SystemConfig cfg = room_preset(3);
  cfg.channel = ChannelConfig::from_km(100.0);
  cfg.channel.loss_override_db = 19.2;
  cfg.rng = RngSpec{987, 5};
  cfg.protocol.basis_bias = 0.9;
  const std::string text = config_to_json(cfg);
  const SystemConfig back = config_from_json(text, SystemConfig{});
  CHECK(config_to_json(back) == text);
  CHECK(back.array.n_pixels == 3);
  CHECK(back.rng.seed == 987);
  CHECK(back.channel.total_db() == doctest::Approx(19.2));
}

TEST_CASE("partial JSON overrides a preset base") {
  const SystemConfig base = cold_preset();
  const SystemConfig cfg = config_from_json(
      R"({"receiver": {"visibility": 0.99}, "channel": {"attenuation_db": 7.5}})",
      base);
  CHECK(cfg.receiver.visibility == doctest::Approx(0.99));
  CHECK(cfg.channel.total_db() == doctest::Approx(7.5));
  // Everything else untouched.
  CHECK(cfg.array.pixel(0).spde == doctest::Approx(0.150));
  CHECK(cfg.protocol.basis_bias == doctest::Approx(0.9375));
}
