#include "qkdsim/spad_mc.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <ostream>
#include <thread>

#include "qkdsim/parallel.hpp"

namespace qkdsim {

const char* to_string(AvalancheCause cause) {
  switch (cause) {
    case AvalancheCause::photon: return "photon";
    case AvalancheCause::dark: return "dark";
    case AvalancheCause::afterpulse: return "afterpulse";
    case AvalancheCause::crosstalk: return "crosstalk";
  }
  return "?";
}

namespace {

struct StimulusLater {
  bool operator()(const CrosstalkStimulus& a, const CrosstalkStimulus& b) const {
    if (a.arrival_gate != b.arrival_gate) return a.arrival_gate > b.arrival_gate;
    return a.seq > b.seq;
  }
};

double hazard_scale(const DetectorConfig& det) {
  if (det.afterpulse_total <= 0.0) return 0.0;
  const double t_over_tau = det.gate_period_ns() / det.trap_tau_ns;
  const double beta = std::exp(-t_over_tau);
  return det.afterpulse_total * (1.0 - beta) *
         std::exp(static_cast<double>(det.deadtime_gates()) * t_over_tau);
}

}  // namespace

double afterpulse_gate_probability(const PixelState& state, const DetectorConfig& det) {
  if (state.trap_charge <= 0.0) return 0.0;
  return std::min(1.0, hazard_scale(det) * state.trap_charge);
}

GateEngine::GateEngine(const ArrayConfig& array, RngSpec rng)
    : array_(array), rng_(rng), n_(array.n_pixels) {
  if (n_ < 1 || n_ > 32) {
    throw ConfigError("GateEngine supports 1..32 pixels");
  }
  pixels_.resize(n_);
  p_dark_.resize(n_);
  hazard_scale_.resize(n_);
  trap_decay_.resize(n_);
  trap_cut_.resize(n_);
  inv_trap_tau_gates_.resize(n_);
  deadtime_gates_.resize(n_);
  gate_width_ns_.resize(n_);
  last_fired_.resize(n_);
  period_ns_ = array.pixel(0).gate_period_ns();
  universal_deadtime_ = array.universal_deadtime;
  any_crosstalk_ = array.crosstalk_intrinsic.size() > 0 &&
                   array.crosstalk_intrinsic.cwiseAbs().maxCoeff() > 0.0;
  for (int p = 0; p < n_; ++p) {
    const auto& det = array.pixel(p);
    pixels_[p].spde_effective = det.spde;
    p_dark_[p] = det.dark_prob_per_gate();
    hazard_scale_[p] = hazard_scale(det);
    const double t_over_tau = det.gate_period_ns() / det.trap_tau_ns;
    trap_decay_[p] = std::exp(-t_over_tau);
    // Drop trap populations whose remaining integrated hazard is below 1e-9.
    trap_cut_[p] =
        hazard_scale_[p] > 0.0
            ? 1e-9 * (1.0 - trap_decay_[p]) / hazard_scale_[p]
            : 1.0;
    inv_trap_tau_gates_[p] = t_over_tau;
    deadtime_gates_[p] = det.deadtime_gates();
    gate_width_ns_[p] = det.gate_width_ns();
  }
}

void GateEngine::fire(int pixel, AvalancheCause cause, std::int32_t aggressor) {
  PixelState& px = pixels_[pixel];
  // Decay the trap population to now, then add this avalanche's charge.
  if (px.trap_charge > 0.0 && px.trap_gate < gate_) {
    px.trap_charge *=
        std::exp(-static_cast<double>(gate_ - px.trap_gate) * inv_trap_tau_gates_[pixel]);
  }
  px.trap_charge += 1.0;
  px.trap_gate = gate_;
  px.dead_until_gate = gate_ + deadtime_gates_[pixel];
  fired_this_gate_.push_back(pixel);
  last_fired_[pixel] = Avalanche{gate_, cause, aggressor};
}

void GateEngine::emit_stimuli(int aggressor) {
  const double emission_ns =
      static_cast<double>(gate_) * period_ns_ + 0.5 * gate_width_ns_[aggressor];
  for (int v = 0; v < n_; ++v) {
    if (v == aggressor) continue;
    const double strength = array_.crosstalk_intrinsic(aggressor, v);
    if (strength <= 0.0) continue;
    const double arrival_ns = emission_ns + rng_.exponential(array_.formation_tau_ns);
    const auto arrival_gate = static_cast<std::uint64_t>(arrival_ns / period_ns_);
    const double offset_ns = arrival_ns - static_cast<double>(arrival_gate) * period_ns_;
    if (offset_ns > gate_width_ns_[v]) continue;  // lands between gates
    if (arrival_gate == gate_) {
      // Synchronous: resolve within this gate's cascade.
      if (gate_ >= pixels_[v].dead_until_gate && rng_.bernoulli(strength)) {
        fire(v, AvalancheCause::crosstalk, aggressor);
      }
    } else {
      auto& heap = pixels_[v].pending_stimuli;
      heap.push_back(CrosstalkStimulus{arrival_ns, arrival_gate, aggressor, gate_,
                                       strength, stim_seq_++});
      std::push_heap(heap.begin(), heap.end(), StimulusLater{});
    }
  }
}

std::uint32_t GateEngine::step(std::span<const double> photon_prob,
                               Avalanche* fired_out, std::uint32_t* live_mask_out) {
  fired_this_gate_.clear();
  std::uint32_t live_mask = 0;

  for (int p = 0; p < n_; ++p) {
    PixelState& px = pixels_[p];
    const bool has_arrivals =
        !px.pending_stimuli.empty() &&
        px.pending_stimuli.front().arrival_gate <= gate_;

    if (gate_ < px.dead_until_gate) {
      if (has_arrivals) {
        // Stimuli reaching a dead pixel are lost (no retriggering later).
        auto& heap = px.pending_stimuli;
        while (!heap.empty() && heap.front().arrival_gate <= gate_) {
          std::pop_heap(heap.begin(), heap.end(), StimulusLater{});
          heap.pop_back();
        }
      }
      continue;
    }
    live_mask |= 1u << p;

    // Afterpulse hazard: decay the trap population to this gate. The common
    // case is consecutive live gates, one multiply; dead stretches take the
    // exp path once.
    double p_ap = 0.0;
    if (px.trap_charge > 0.0) {
      if (px.trap_gate + 1 == gate_) {
        px.trap_charge *= trap_decay_[p];
      } else if (px.trap_gate < gate_) {
        px.trap_charge *= std::exp(
            -static_cast<double>(gate_ - px.trap_gate) * inv_trap_tau_gates_[p]);
      }
      px.trap_gate = gate_;
      if (px.trap_charge < trap_cut_[p]) {
        px.trap_charge = 0.0;
      } else {
        p_ap = std::min(1.0, hazard_scale_[p] * px.trap_charge);
      }
    }

    // Independent causes combined as 1 - prod(1 - p_k), resolved with a
    // single uniform draw: test the photon threshold, then renormalize the
    // residual uniform for each following cause. The first to trigger is the
    // recorded avalanche cause.
    const double p_photon =
        p < static_cast<int>(photon_prob.size()) ? photon_prob[p] : 0.0;
    bool fired = false;
    double u = rng_.uniform();
    if (u < p_photon) {
      fire(p, AvalancheCause::photon, -1);
      fired = true;
    } else {
      u = (u - p_photon) / (1.0 - p_photon);
      if (u < p_dark_[p]) {
        fire(p, AvalancheCause::dark, -1);
        fired = true;
      } else if (p_ap > 0.0) {
        u = (u - p_dark_[p]) / (1.0 - p_dark_[p]);
        if (u < p_ap) {
          fire(p, AvalancheCause::afterpulse, -1);
          fired = true;
        }
      }
    }
    if (has_arrivals) {
      auto& heap = px.pending_stimuli;
      while (!heap.empty() && heap.front().arrival_gate <= gate_) {
        std::pop_heap(heap.begin(), heap.end(), StimulusLater{});
        const CrosstalkStimulus stim = heap.back();
        heap.pop_back();
        if (!fired && rng_.bernoulli(stim.strength)) {
          fire(p, AvalancheCause::crosstalk, stim.source_pixel);
          fired = true;  // later arrivals this gate are absorbed
        }
      }
    }
  }

  // Cascade: every avalanche emits stimuli toward the other pixels; a
  // synchronous arrival may fire a victim inside this same gate, which then
  // emits in turn.
  if (any_crosstalk_) {
    for (std::size_t i = 0; i < fired_this_gate_.size(); ++i) {
      emit_stimuli(fired_this_gate_[i]);
    }
  }

  std::uint32_t mask = 0;
  for (const int p : fired_this_gate_) {
    mask |= 1u << p;
    if (fired_out != nullptr) fired_out[p] = last_fired_[p];
  }

  if (universal_deadtime_ && mask != 0) {
    std::uint64_t until = 0;
    for (const int p : fired_this_gate_) {
      until = std::max(until, gate_ + deadtime_gates_[p]);
    }
    for (int p = 0; p < n_; ++p) {
      pixels_[p].dead_until_gate = std::max(pixels_[p].dead_until_gate, until);
    }
  }

  if (live_mask_out != nullptr) *live_mask_out = live_mask;
  ++gate_;
  return mask;
}

// ---------------------------------------------------------------------------
// GateEventLog

void GateEventLog::merge_counters_from(const GateEventLog& other) {
  if (n_pixels == 0) {
    *this = other;
    events.assign(n_pixels, {});
    events_retained = false;
    return;
  }
  if (other.n_pixels != n_pixels) {
    throw ModelError("merge_counters_from: pixel count mismatch");
  }
  n_gates_simulated += other.n_gates_simulated;
  for (int p = 0; p < n_pixels; ++p) {
    counts_illuminated[p] += other.counts_illuminated[p];
    counts_dark_gates[p] += other.counts_dark_gates[p];
    live_illuminated_gates[p] += other.live_illuminated_gates[p];
    live_dark_gates[p] += other.live_dark_gates[p];
    for (int c = 0; c < 4; ++c) cause_counts[p][c] += other.cause_counts[p][c];
  }
  same_gate_pairs += other.same_gate_pairs;
  post_gate_pairs += other.post_gate_pairs;
  events_retained = false;
  for (auto& e : events) e.clear();
}

void GateEventLog::dump_events_csv(std::ostream& os) const {
  os << "gate_index,pixel,cause,aggressor_pixel\r\n";
  // Merge the per-pixel gate-ordered lists into global gate order.
  std::vector<std::size_t> pos(n_pixels, 0);
  while (true) {
    int best = -1;
    for (int p = 0; p < n_pixels; ++p) {
      if (pos[p] >= events[p].size()) continue;
      if (best < 0 || events[p][pos[p]].gate < events[best][pos[best]].gate ||
          (events[p][pos[p]].gate == events[best][pos[best]].gate && p < best)) {
        best = p;
      }
    }
    if (best < 0) break;
    const Avalanche& a = events[best][pos[best]++];
    os << a.gate << ',' << best << ',' << to_string(a.cause) << ',' << a.aggressor
       << "\r\n";
  }
}

// ---------------------------------------------------------------------------
// Drivers

namespace {

GateEventLog make_log(const ArrayConfig& array, const IlluminationSchedule& schedule) {
  GateEventLog log;
  log.n_pixels = array.n_pixels;
  log.schedule = schedule;
  log.gate_period_ns = array.pixel(0).gate_period_ns();
  log.counts_illuminated.assign(array.n_pixels, 0);
  log.counts_dark_gates.assign(array.n_pixels, 0);
  log.live_illuminated_gates.assign(array.n_pixels, 0);
  log.live_dark_gates.assign(array.n_pixels, 0);
  log.cause_counts.assign(array.n_pixels, {0, 0, 0, 0});
  log.same_gate_pairs =
      Eigen::Matrix<std::uint64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(array.n_pixels,
                                                                         array.n_pixels);
  log.post_gate_pairs = log.same_gate_pairs;
  log.events.resize(array.n_pixels);
  for (int p = 0; p < array.n_pixels; ++p) {
    log.gate_width_ns.push_back(array.pixel(p).gate_width_ns());
    log.deadtime_gates.push_back(array.pixel(p).deadtime_gates());
  }
  return log;
}

void validate_run(const ArrayConfig& array, const IlluminationSchedule& schedule,
                  std::uint64_t n_gates) {
  if (n_gates < 1) throw ConfigError("run_gates: n_gates must be >= 1");
  if (n_gates > (1ull << 62)) throw ConfigError("run_gates: gate index space overflow");
  if (schedule.period_gates < 1) throw ConfigError("run_gates: schedule period must be >= 1");
  if (!(schedule.mean_photons >= 0.0)) {
    throw ConfigError("run_gates: schedule mean_photons must be >= 0");
  }
  if (schedule.target_pixel >= array.n_pixels) {
    throw ConfigError("run_gates: schedule target pixel out of range");
  }
}

}  // namespace

GateEventLog run_gates(const ArrayConfig& array, const IlluminationSchedule& schedule,
                       std::uint64_t n_gates, RngSpec rng, RunOptions options) {
  validate_run(array, schedule, n_gates);
  GateEngine engine(array, rng);
  GateEventLog log = make_log(array, schedule);
  log.n_gates_simulated = n_gates;
  const int n = array.n_pixels;

  std::vector<double> mu_on(n, 0.0);
  const std::vector<double> mu_off(n, 0.0);
  for (int p = 0; p < n; ++p) {
    if (schedule.targets(p)) {
      mu_on[p] = -std::expm1(-schedule.mean_photons * array.pixel(p).spde);
    }
  }

  std::vector<Avalanche> fired(n);
  std::uint32_t max_window = 0;
  for (int p = 0; p < n; ++p) max_window = std::max(max_window, log.deadtime_gates[p]);
  std::deque<std::pair<std::uint64_t, int>> recent;  // (gate, pixel) within max_window

  for (std::uint64_t g = 0; g < n_gates; ++g) {
    const bool ill = schedule.illuminated(g);
    std::uint32_t live_mask = 0;
    const std::uint32_t mask =
        engine.step(ill ? mu_on : mu_off, fired.data(), &live_mask);

    if (live_mask != 0) {
      for (int p = 0; p < n; ++p) {
        if ((live_mask >> p) & 1u) {
          if (ill) {
            ++log.live_illuminated_gates[p];
          } else {
            ++log.live_dark_gates[p];
          }
        }
      }
    }
    if (mask == 0) continue;

    while (!recent.empty() && g - recent.front().first > max_window) recent.pop_front();

    int fired_px[32];
    int n_fired = 0;
    for (int p = 0; p < n; ++p) {
      if (!((mask >> p) & 1u)) continue;
      fired_px[n_fired++] = p;
      if (ill) {
        ++log.counts_illuminated[p];
      } else {
        ++log.counts_dark_gates[p];
      }
      ++log.cause_counts[p][static_cast<int>(fired[p].cause)];
      if (options.record_events) log.events[p].push_back(fired[p]);
      for (const auto& [g0, a] : recent) {
        if (g0 < g && g - g0 <= log.deadtime_gates[a]) {
          ++log.post_gate_pairs(a, p);
        }
      }
    }
    for (int i = 0; i < n_fired; ++i) {
      for (int j = i + 1; j < n_fired; ++j) {
        ++log.same_gate_pairs(fired_px[i], fired_px[j]);
        ++log.same_gate_pairs(fired_px[j], fired_px[i]);
      }
    }
    for (int i = 0; i < n_fired; ++i) recent.emplace_back(g, fired_px[i]);
  }
  log.events_retained = options.record_events;
  return log;
}

GateEventLog run_gates_parallel(const ArrayConfig& array,
                                const IlluminationSchedule& schedule,
                                std::uint64_t gates_per_trial, int n_trials,
                                RngSpec rng, int max_threads) {
  if (n_trials < 1) throw ConfigError("run_gates_parallel: n_trials must be >= 1");
  std::vector<GateEventLog> partial(n_trials);
  const int workers = worker_count(max_threads == 0 ? n_trials : std::min(max_threads, n_trials));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int t = next.fetch_add(1); t < n_trials; t = next.fetch_add(1)) {
      partial[t] = run_gates(array, schedule, gates_per_trial, rng.substream(t),
                             RunOptions{.record_events = false});
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& th : pool) th.join();

  GateEventLog total;
  for (int t = 0; t < n_trials; ++t) total.merge_counters_from(partial[t]);
  return total;
}

// ---------------------------------------------------------------------------
// Dead-time blanking

namespace {

struct Interval {
  std::uint64_t lo, hi;  // inclusive
};

std::vector<Interval> merged(std::vector<Interval> v) {
  std::sort(v.begin(), v.end(), [](const Interval& a, const Interval& b) {
    return a.lo < b.lo;
  });
  std::vector<Interval> out;
  for (const auto& iv : v) {
    if (iv.hi < iv.lo) continue;
    if (!out.empty() && iv.lo <= out.back().hi + 1) {
      out.back().hi = std::max(out.back().hi, iv.hi);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

/// Gates g in [lo, hi] with g % period == 0.
std::uint64_t illuminated_in(std::uint64_t lo, std::uint64_t hi, std::uint64_t period) {
  if (hi < lo) return 0;
  return hi / period - (lo == 0 ? 0 : (lo - 1) / period + 1) + 1;
}

}  // namespace

GateEventLog deadtime_blanking(const GateEventLog& log, DeadtimePolicy policy) {
  if (!log.events_retained) {
    throw ModelError("deadtime_blanking needs a single-trial log with retained events");
  }
  const int n = log.n_pixels;

  // Per-pixel pass: non-paralyzable chain against the previous kept avalanche.
  std::vector<std::vector<Avalanche>> kept(n);
  for (int p = 0; p < n; ++p) {
    std::uint64_t next_live = 0;
    for (const auto& a : log.events[p]) {
      if (a.gate >= next_live) {
        kept[p].push_back(a);
        next_live = a.gate + log.deadtime_gates[p];
      }
    }
  }

  std::vector<Interval> shared_windows;
  if (policy == DeadtimePolicy::universal) {
    struct Tagged {
      Avalanche a;
      int pixel;
    };
    std::vector<Tagged> all;
    for (int p = 0; p < n; ++p) {
      for (const auto& a : kept[p]) all.push_back({a, p});
    }
    std::sort(all.begin(), all.end(), [](const Tagged& x, const Tagged& y) {
      if (x.a.gate != y.a.gate) return x.a.gate < y.a.gate;
      return x.pixel < y.pixel;
    });

    std::vector<std::vector<Avalanche>> survivors(n);
    std::uint64_t window_end = 0;    // first live gate again
    std::uint64_t window_open = ~0ull;  // gate that opened the current window
    for (const auto& t : all) {
      const std::uint64_t g = t.a.gate;
      const bool live = g >= window_end;
      if (live || g == window_open) {
        survivors[t.pixel].push_back(t.a);
        const std::uint64_t end = g + log.deadtime_gates[t.pixel];
        if (live) window_open = g;
        if (end > window_end) {
          window_end = end;
          if (end > g + 1) shared_windows.push_back({g + 1, end - 1});
        }
      }
    }
    kept = std::move(survivors);
  }

  // Rebuild the log from the kept events.
  GateEventLog out = log;
  out.events = kept;
  for (int p = 0; p < n; ++p) {
    out.counts_illuminated[p] = 0;
    out.counts_dark_gates[p] = 0;
    out.cause_counts[p] = {0, 0, 0, 0};
  }
  out.same_gate_pairs.setZero();
  out.post_gate_pairs.setZero();

  struct Tagged {
    std::uint64_t gate;
    int pixel;
  };
  std::vector<Tagged> all;
  for (int p = 0; p < n; ++p) {
    for (const auto& a : kept[p]) {
      if (log.schedule.illuminated(a.gate)) {
        ++out.counts_illuminated[p];
      } else {
        ++out.counts_dark_gates[p];
      }
      ++out.cause_counts[p][static_cast<int>(a.cause)];
      all.push_back({a.gate, p});
    }
  }
  std::sort(all.begin(), all.end(), [](const Tagged& x, const Tagged& y) {
    if (x.gate != y.gate) return x.gate < y.gate;
    return x.pixel < y.pixel;
  });
  std::uint32_t max_window = 0;
  for (int p = 0; p < n; ++p) max_window = std::max(max_window, log.deadtime_gates[p]);
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      const std::uint64_t dg = all[j].gate - all[i].gate;
      if (dg > max_window) break;
      if (dg == 0) {
        ++out.same_gate_pairs(all[i].pixel, all[j].pixel);
        ++out.same_gate_pairs(all[j].pixel, all[i].pixel);
      } else if (dg <= log.deadtime_gates[all[i].pixel]) {
        ++out.post_gate_pairs(all[i].pixel, all[j].pixel);
      }
    }
  }

  // Live-gate denominators: exclude the physical dead windows implied by the
  // original avalanche list, plus the shared windows under the universal
  // policy.
  const std::uint64_t last_gate = log.n_gates_simulated - 1;
  for (int p = 0; p < n; ++p) {
    std::vector<Interval> excl = shared_windows;
    for (const auto& a : log.events[p]) {
      const std::uint64_t end = a.gate + log.deadtime_gates[p];
      if (end > a.gate + 1) excl.push_back({a.gate + 1, end - 1});
    }
    std::uint64_t excl_ill = 0, excl_total = 0;
    for (auto& iv : merged(std::move(excl))) {
      iv.hi = std::min(iv.hi, last_gate);
      if (iv.hi < iv.lo) continue;
      excl_total += iv.hi - iv.lo + 1;
      if (log.schedule.mean_photons > 0.0) {
        excl_ill += illuminated_in(iv.lo, iv.hi, log.schedule.period_gates);
      }
    }
    const std::uint64_t total_ill =
        log.schedule.mean_photons > 0.0
            ? illuminated_in(0, last_gate, log.schedule.period_gates)
            : 0;
    out.live_illuminated_gates[p] = total_ill - excl_ill;
    out.live_dark_gates[p] =
        (log.n_gates_simulated - total_ill) - (excl_total - excl_ill);
  }
  return out;
}

}  // namespace qkdsim
