#include "qkdsim/protocol_sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>
#include <thread>

#include "qkdsim/parallel.hpp"
#include "qkdsim/units.hpp"

namespace qkdsim {

PulsePattern generate_pattern(const ProtocolConfig& protocol, RngSpec rng) {
  RandomStream rs(rng);
  PulsePattern pattern;
  pattern.generated_from = rng;
  pattern.pulses.resize(protocol.pattern_length);
  for (auto& p : pattern.pulses) {
    p.basis = rs.bernoulli(protocol.basis_bias) ? 0 : 1;
    p.bit = rs.bernoulli(0.5) ? 1 : 0;
    const double u = rs.uniform();
    if (u < protocol.p_signal) {
      p.intensity = 0;
    } else if (u < protocol.p_signal + protocol.p_decoy) {
      p.intensity = 1;
    } else {
      p.intensity = 2;
    }
    // Majority basis encodes on {0, pi}, minority on {pi/2, 3pi/2}.
    const double base = p.basis == 0 ? 0.0 : std::numbers::pi / 2.0;
    p.phase = static_cast<float>(base + (p.bit ? std::numbers::pi : 0.0));
  }
  return pattern;
}

SiftedBlock simulate_block(const PulsePattern& pattern, const OperatingPoint& op,
                           std::uint64_t n_repeats, RngSpec rng,
                           std::ostream* trace) {
  if (op.detectors.n_pixels != 2) {
    throw ConfigError("simulate_block: needs a two-pixel detector array");
  }
  if (n_repeats < 1 || pattern.pulses.empty()) {
    throw ConfigError("simulate_block: empty pattern or zero repeats");
  }

  const double t_link = db_to_transmittance(op.channel.total_db() +
                                            op.receiver.insertion_loss_db) *
                        op.receiver.timebin_acceptance;
  const double v = op.receiver.visibility;
  const double spde0 = op.detectors.pixel(0).spde;
  const double spde1 = op.detectors.pixel(1).spde;

  // Per (intensity class, interference case) photon click probabilities.
  // Case 0: matched, bit 0 (constructive at detector 0); case 1: matched,
  // bit 1; case 2: basis mismatch (no interference).
  double p_click[3][3][2];
  for (int k = 0; k < 3; ++k) {
    const double flux = op.protocol.mu(static_cast<IntensityClass>(k)) * t_link;
    const double hi = (1.0 + v) / 2.0;
    const double lo = (1.0 - v) / 2.0;
    p_click[k][0][0] = -std::expm1(-flux * hi * spde0);
    p_click[k][0][1] = -std::expm1(-flux * lo * spde1);
    p_click[k][1][0] = -std::expm1(-flux * lo * spde0);
    p_click[k][1][1] = -std::expm1(-flux * hi * spde1);
    p_click[k][2][0] = -std::expm1(-flux * 0.5 * spde0);
    p_click[k][2][1] = -std::expm1(-flux * 0.5 * spde1);
  }

  GateEngine engine(op.detectors, rng.substream(0));
  RandomStream bob(rng.substream(1));
  SiftedBlock out;

  const std::size_t len = pattern.pulses.size();
  const std::uint64_t total = n_repeats * static_cast<std::uint64_t>(len);
  for (std::uint64_t i = 0; i < total; ++i) {
    const PulseSetting& s = pattern.pulses[i % len];
    const bool bob_major = bob.bernoulli(op.protocol.basis_bias);
    const std::uint8_t bob_basis = bob_major ? 0 : 1;
    const bool matched = bob_basis == s.basis;
    const int icase = matched ? (s.bit ? 1 : 0) : 2;

    const std::uint32_t mask = engine.step(
        std::span<const double>(p_click[s.intensity][icase], 2));

    int detector = -1;
    bool sifted = false;
    bool error = false;
    if (mask != 0) {
      ++out.detections;
      if (mask == 0b11) {
        ++out.double_clicks;
        detector = bob.bernoulli(0.5) ? 1 : 0;  // fair squash
      } else {
        detector = mask == 0b01 ? 0 : 1;
      }
      if (matched) {
        sifted = true;
        error = detector != s.bit;
        const int k = s.intensity;
        if (s.basis == 0) {
          out.counts.sifted[k] += 1.0;
          if (error) out.counts.errors[k] += 1.0;
        } else {
          out.counts.sifted_minor[k] += 1.0;
          if (error) out.counts.errors_minor[k] += 1.0;
        }
      }
    }
    if (trace != nullptr) {
      *trace << (i % len) << ',' << int(s.basis) << ',' << int(s.bit) << ','
             << int(s.intensity) << ',' << int(bob_basis) << ',' << detector
             << ',' << int(sifted) << ',' << int(error) << "\r\n";
    }
  }
  out.pulses_emitted = total;
  out.counts.duration_s = static_cast<double>(total) / op.protocol.rep_rate_hz();
  return out;
}

BlockRunResult run_to_block_size(const OperatingPoint& op, const FiniteKeyConfig& fk,
                                 RngSpec rng, BlockRunOptions options) {
  const RateBreakdown rb = qber(op);
  const double maj_rate = rb.cls[0].sifted_rate_hz + rb.cls[1].sifted_rate_hz +
                          rb.cls[2].sifted_rate_hz;
  if (!(maj_rate > 0.0)) {
    throw ModelError("run_to_block_size: expected sifted rate is zero");
  }
  const double projected_s = fk.block_bits / maj_rate;
  if (projected_s > options.max_block_seconds) {
    std::ostringstream os;
    os << "run_to_block_size: projected block duration " << projected_s
       << " s exceeds the cap of " << options.max_block_seconds << " s";
    throw ModelError(os.str());
  }

  const PulsePattern pattern = generate_pattern(op.protocol, rng.substream(0));
  const std::uint64_t len = pattern.pulses.size();
  const std::uint64_t repeats_per_chunk =
      std::max<std::uint64_t>(1, options.chunk_pulses / len);
  const double chunk_s = static_cast<double>(repeats_per_chunk * len) /
                         op.protocol.rep_rate_hz();
  const double sifted_per_chunk = maj_rate * chunk_s;

  SiftedBlock merged;
  std::uint64_t next_chunk = 0;
  const int workers = worker_count(options.max_threads);
  while (merged.counts.sifted_total() < fk.block_bits) {
    const double missing = fk.block_bits - merged.counts.sifted_total();
    int batch = static_cast<int>(std::ceil(missing / sifted_per_chunk * 1.02));
    batch = std::max(batch, 1);

    std::vector<SiftedBlock> blocks(batch);
    std::atomic<int> cursor{0};
    auto work = [&] {
      for (int c = cursor.fetch_add(1); c < batch; c = cursor.fetch_add(1)) {
        blocks[c] = simulate_block(pattern, op, repeats_per_chunk,
                                   rng.substream(1 + 2 * (next_chunk + c)));
      }
    };
    std::vector<std::thread> pool;
    const int nw = std::min<int>(workers, batch);
    for (int w = 0; w < nw; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();

    // Merge strictly in chunk order and stop at the first chunk that fills
    // the block, so the result does not depend on scheduling.
    for (int c = 0; c < batch; ++c) {
      merged.counts += blocks[c].counts;
      merged.pulses_emitted += blocks[c].pulses_emitted;
      merged.detections += blocks[c].detections;
      merged.double_clicks += blocks[c].double_clicks;
      if (merged.counts.sifted_total() >= fk.block_bits) break;
    }
    next_chunk += batch;
    if (merged.counts.duration_s > 4.0 * projected_s + 1.0) {
      throw ModelError("run_to_block_size: sifted rate far below projection");
    }
  }

  BlockRunResult res;
  res.block = std::move(merged);
  res.report = secure_key_length(res.block.counts, op.protocol, fk);
  return res;
}

}  // namespace qkdsim
