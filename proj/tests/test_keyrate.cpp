#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "qkdsim/config.hpp"
#include "qkdsim/keyrate.hpp"
#include "qkdsim/link_model.hpp"
#include "qkdsim/units.hpp"

using namespace qkdsim;

namespace {

OperatingPoint cold_op(double att_db) {
  SystemConfig cfg = cold_preset();
  cfg.channel = ChannelConfig::from_db(att_db);
  return OperatingPoint::from(cfg);
}

BlockCounts counts_at(const OperatingPoint& op, double block_bits) {
  const RateBreakdown rb = qber(op);
  const double maj =
      rb.cls[0].sifted_rate_hz + rb.cls[1].sifted_rate_hz + rb.cls[2].sifted_rate_hz;
  return expected_block_counts(op, block_bits / maj);
}

}  // namespace

TEST_CASE("infinite-block limit recovers the single-photon fraction") {
  // Noiseless channel: the s1 bound approaches the true Poisson
  // single-photon fraction of the detected events.
  SystemConfig cfg = cold_preset();
  for (auto& det : cfg.array.pixel_configs) {
    det.dcr_hz = 0.0;
    det.afterpulse_total = 0.0;
  }
  cfg.array.crosstalk_intrinsic.setZero();
  cfg.receiver.visibility = 1.0;
  cfg.channel = ChannelConfig::from_db(10.0);
  const OperatingPoint op = OperatingPoint::from(cfg);

  const BlockCounts bc = counts_at(op, 1e15);  // deltas negligible
  const DecoyBounds b = decoy_bounds(bc, cfg.protocol, cfg.finite_key);

  // Analytic oracle via the Poisson photon-number expansion of the detected
  // signal-class events.
  const LinkState ls = link_state(op);
  const double a_hi = ls.eta_eff * (1.0 + ls.visibility) / 2.0;
  const double q1 = ls.theta * (1.0 - (1.0 - ls.nu) * (1.0 - a_hi));
  const double mu = cfg.protocol.mu_signal;
  const double q_match = qber(op).cls[0].sifted_rate_hz /
                         (ls.rep_hz * cfg.protocol.p_signal * ls.bias * ls.bias);
  const double true_fraction = mu * std::exp(-mu) * q1 / q_match;

  const double bound_fraction = b.s1 / bc.sifted[0];
  CHECK(bound_fraction <= true_fraction * (1.0 + 1e-9));  // it is a lower bound
  CHECK(bound_fraction == doctest::Approx(true_fraction).epsilon(0.03));
}

TEST_CASE("all counts zero gives zero key without complaint") {
  BlockCounts empty;
  empty.duration_s = 1.0;
  const DecoyBounds b = decoy_bounds(empty, ProtocolConfig{}, FiniteKeyConfig{});
  CHECK(b.s0 == 0.0);
  CHECK(b.s1 == 0.0);
  const KeyRateReport r = secure_key_length(empty, ProtocolConfig{}, FiniteKeyConfig{});
  CHECK(r.secure_bits == 0.0);
  CHECK(r.zero_key);
}

TEST_CASE("finite-block bounds are never tighter than asymptotic ones") {
  RandomStream rs(RngSpec{31, 0});
  int checked = 0;
  for (int i = 0; i < 100; ++i) {
    SystemConfig cfg = cold_preset();
    cfg.receiver.visibility = 0.96 + 0.04 * rs.uniform();
    for (auto& det : cfg.array.pixel_configs) {
      det.dcr_hz = 5000.0 * rs.uniform();
      det.afterpulse_total = 0.03 * rs.uniform();
    }
    cfg.channel = ChannelConfig::from_db(25.0 * rs.uniform());
    const OperatingPoint op = OperatingPoint::from(cfg);
    const BlockCounts finite = counts_at(op, 5e6);
    const BlockCounts huge = counts_at(op, 5e13);
    const DecoyBounds bf = decoy_bounds(finite, cfg.protocol, cfg.finite_key);
    const DecoyBounds bh = decoy_bounds(huge, cfg.protocol, cfg.finite_key);
    // Compare per-block fractions: the asymptotic fraction dominates.
    CHECK(bf.s1 / finite.sifted[0] <= bh.s1 / huge.sifted[0] + 1e-12);
    CHECK(bf.s0 / finite.sifted[0] <= bh.s0 / huge.sifted[0] + 1e-12);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("measured QBER at or above 11% yields zero secure bits") {
  for (double att : {0.0, 10.0, 20.0}) {
    const OperatingPoint op = cold_op(att);
    BlockCounts bc = counts_at(op, 5e6);
    for (int k = 0; k < 3; ++k) {
      bc.errors[k] = 0.11 * bc.sifted[k];
      bc.errors_minor[k] = 0.11 * bc.sifted_minor[k];
    }
    const KeyRateReport r = secure_key_length(bc, op.protocol, FiniteKeyConfig{});
    CHECK(r.qber_majority == doctest::Approx(0.11).epsilon(1e-9));
    CHECK(r.secure_bits == 0.0);
    CHECK(r.zero_key);
  }
}

TEST_CASE("formula reduction: error-free counts give l -> s0 + s1") {
  SystemConfig cfg = cold_preset();
  for (auto& det : cfg.array.pixel_configs) {
    det.dcr_hz = 0.0;
    det.afterpulse_total = 0.0;
  }
  cfg.array.crosstalk_intrinsic.setZero();
  cfg.receiver.visibility = 1.0;
  cfg.channel = ChannelConfig::from_db(5.0);
  const OperatingPoint op = OperatingPoint::from(cfg);
  const BlockCounts bc = counts_at(op, 1e12);
  const KeyRateReport r = secure_key_length(bc, cfg.protocol, cfg.finite_key);
  CHECK(r.lambda_ec == 0.0);
  CHECK(r.phi1 < 1e-3);
  CHECK(r.secure_bits == doctest::Approx(r.s0 + r.s1).epsilon(1e-3));
}

TEST_CASE("cold preset at 0 dB sits in the reported peak-rate band") {
  const OperatingPoint op = cold_op(0.0);
  const KeyRateReport r = analytic_key_report(op, FiniteKeyConfig{});
  CHECK(r.secure_rate_hz >= 0.5e6);
  CHECK(r.secure_rate_hz <= 2.0e6);
  CHECK_FALSE(r.zero_key);
  // Intermediates satisfy the count budget.
  CHECK(r.s0 + r.s1 <= r.n_signal);
  CHECK(r.phi1 >= 0.0);
  CHECK(r.phi1 <= 0.5);
}

TEST_CASE("finite-key rate converges monotonically to the asymptotic rate") {
  const OperatingPoint op = cold_op(10.0);
  const double asym = asymptotic_key_rate(op);
  REQUIRE(asym > 0.0);
  double previous = 0.0;
  for (double block : {5e5, 5e6, 5e7, 5e8}) {
    FiniteKeyConfig fk;
    fk.block_bits = block;
    const KeyRateReport r = analytic_key_report(op, fk);
    CHECK(r.secure_rate_hz >= previous);
    CHECK(r.secure_rate_hz <= asym * (1.0 + 1e-12));
    previous = r.secure_rate_hz;
  }
  CHECK(previous >= 0.95 * asym);  // within 5% at 500 Mbit
}

TEST_CASE("asymptotic rate: zero transmittance and attenuation monotonicity") {
  CHECK(asymptotic_key_rate(cold_op(300.0)) == 0.0);
  double previous = std::numeric_limits<double>::infinity();
  for (double att = 0.0; att <= 30.0; att += 1.0) {
    const double rate = asymptotic_key_rate(cold_op(att));
    CHECK(rate <= previous * (1.0 + 1e-9) + 1e-9);
    previous = rate;
  }
}

TEST_CASE("key length responds monotonically to error and security inputs") {
  RandomStream rs(RngSpec{77, 0});
  for (int i = 0; i < 50; ++i) {
    const OperatingPoint op = cold_op(15.0 * rs.uniform());
    BlockCounts bc = counts_at(op, 5e6);
    const KeyRateReport base = secure_key_length(bc, op.protocol, FiniteKeyConfig{});

    // More majority-basis errors never lengthen the key.
    BlockCounts worse = bc;
    worse.errors[0] = std::min(bc.sifted[0], bc.errors[0] * 1.2 + 10.0);
    const KeyRateReport w1 = secure_key_length(worse, op.protocol, FiniteKeyConfig{});
    CHECK(w1.secure_bits <= base.secure_bits + 1e-9);

    // More minority-basis signal errors (higher phase error) never lengthen it.
    BlockCounts worse_x = bc;
    worse_x.errors_minor[0] =
        std::min(bc.sifted_minor[0], bc.errors_minor[0] * 1.3 + 5.0);
    const KeyRateReport w2 = secure_key_length(worse_x, op.protocol, FiniteKeyConfig{});
    CHECK(w2.phi1 >= base.phi1 - 1e-12);
    CHECK(w2.secure_bits <= base.secure_bits + 1e-9);

    // A stricter security parameter never lengthens the key.
    FiniteKeyConfig strict;
    strict.eps_sec = 1e-14;
    const KeyRateReport w3 = secure_key_length(bc, op.protocol, strict);
    CHECK(w3.secure_bits <= base.secure_bits + 1e-9);

    // Intermediates respect the count budget.
    CHECK(base.s0 + base.s1 <= bc.sifted_total() + 1e-9);
  }
}

TEST_CASE("report serializes every intermediate") {
  const KeyRateReport r = analytic_key_report(cold_op(5.0), FiniteKeyConfig{});
  const std::string j = r.to_json();
  for (const char* key :
       {"secure_bits", "secure_rate_hz", "qber_majority", "s0", "s1", "phi1",
        "lambda_ec", "delta_fk", "s1_minority", "v1_minority", "gamma_penalty",
        "n_signal_sifted", "block_duration_s"}) {
    CHECK(j.find(key) != std::string::npos);
  }
}
