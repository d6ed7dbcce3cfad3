#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "sirenloc/core.hpp"
#include "sirenloc/geometry.hpp"

namespace sirenloc::sim {

enum class SirenKind { wail, yelp, hi_lo, constant_tone };

struct SirenProfile {
  SirenKind kind = SirenKind::wail;
  double f_lo = 650.0;
  double f_hi = 1500.0;
  double sweep_period = 4.0;
  double amplitude = 0.8;

  friend bool operator==(const SirenProfile&, const SirenProfile&) = default;
};

inline void validate(const SirenProfile& p) {
  require(p.f_lo > 0.0 && p.f_lo <= p.f_hi, "SirenProfile: need 0 < f_lo <= f_hi");
  require(p.sweep_period > 0.0, "SirenProfile: sweep_period must be positive");
  require(p.amplitude >= 0.0 && p.amplitude <= 1.0, "SirenProfile: amplitude must be in [0,1]");
}

/// Instantaneous frequency of the siren pattern at time t (seconds).
inline double instantaneous_frequency(const SirenProfile& p, double t) {
  const double span = p.f_hi - p.f_lo;
  const double phase = t / p.sweep_period - std::floor(t / p.sweep_period);  // [0,1)
  switch (p.kind) {
    case SirenKind::constant_tone:
      return p.f_lo;
    case SirenKind::wail:
      return p.f_lo + span * 0.5 * (1.0 - std::cos(2.0 * kPi * phase));
    case SirenKind::yelp:
      return p.f_lo + span * (phase < 0.5 ? 2.0 * phase : 2.0 - 2.0 * phase);
    case SirenKind::hi_lo:
      return phase < 0.5 ? p.f_lo : p.f_hi;
  }
  return p.f_lo;
}

/// Phase-continuous FM tone. Sample n is at time t0 + n/sr.
inline std::vector<double> synth_siren_waveform(const SirenProfile& profile, double duration,
                                                double sr = kSampleRate, double t0 = 0.0) {
  validate(profile);
  require(duration >= 0.0, "synth_siren_waveform: negative duration");
  require(sr == kSampleRate, "synth_siren_waveform: sample rate must be 48000");
  const auto n = static_cast<std::size_t>(std::llround(duration * sr));
  std::vector<double> out(n);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = profile.amplitude * std::sin(phase);
    phase += 2.0 * kPi * instantaneous_frequency(profile, t0 + static_cast<double>(i) / sr) / sr;
    if (phase > 2.0 * kPi) phase -= 2.0 * kPi;
  }
  return out;
}

/// A sampled mono source whose first sample is emitted at time t0.
struct SourceSignal {
  std::span<const double> samples;
  double t0 = 0.0;
  double sr = kSampleRate;

  /// Linear interpolation between adjacent samples; silence outside the span.
  double at(double t) const {
    const double pos = (t - t0) * sr;
    if (pos < 0.0 || samples.empty()) return 0.0;
    const auto i = static_cast<std::size_t>(pos);
    if (i >= samples.size()) return 0.0;
    if (i + 1 == samples.size()) return pos == static_cast<double>(i) ? samples[i] : 0.0;
    const double frac = pos - static_cast<double>(i);
    return samples[i] + frac * (samples[i + 1] - samples[i]);
  }
};

/// Free-field propagation from a moving point source to a moving receiver.
/// For each output sample at reception time t the emission time tau solves
/// t - tau = |receiver(t) - source(tau)| / c, and the output is
/// source(tau) / max(range, r_min). Doppler follows from the varying delay.
inline std::vector<double> propagate(const SourceSignal& source, const Trajectory& source_traj,
                                     const Trajectory& receiver_traj, double out_t0,
                                     std::size_t n_out, double c = kSpeedOfSound,
                                     double r_min = kMinRange) {
  require(c > 0.0, "propagate: speed of sound must be positive");
  const double sr = source.sr;
  const double out_t1 = out_t0 + static_cast<double>(n_out > 0 ? n_out - 1 : 0) / sr;
  require(receiver_traj.covers(out_t0, out_t1), "propagate: receiver trajectory does not cover output span");
  require(!source_traj.empty(), "propagate: empty source trajectory");
  std::vector<double> out(n_out);
  for (std::size_t n = 0; n < n_out; ++n) {
    const double t = out_t0 + static_cast<double>(n) / sr;
    const Vec2 rx = interpolate_position(receiver_traj, t);
    double range = 0.0;
    double tau = t;
    for (int it = 0; it < 8; ++it) {
      const double ts = std::clamp(tau, source_traj.start(), source_traj.end());
      range = (rx - interpolate_position(source_traj, ts)).norm();
      const double next = t - range / c;
      const bool done = std::abs(next - tau) < 1e-10;
      tau = next;
      if (done) break;
    }
    require(tau >= source_traj.start() - 1e-9 && tau <= source_traj.end() + 1e-9,
            "propagate: source trajectory does not cover emission times");
    out[n] = source.at(tau) / std::max(range, r_min);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Microphone array
// ---------------------------------------------------------------------------

struct MicArrayGeometry {
  std::array<Vec2, 2> device_offsets{Vec2{-2.0, 0.5}, Vec2{-2.0, -0.5}};
  // front, back, left, right relative to each device centre
  std::array<Vec2, 4> capsule_offsets{Vec2{0.05, 0.0}, Vec2{-0.05, 0.0}, Vec2{0.0, 0.05},
                                      Vec2{0.0, -0.05}};
  double ego_length = 5.0;
  double ego_width = 2.0;

  /// Body-frame capsule positions; channel = device * 4 + capsule.
  std::array<Vec2, kNumChannels> capsules() const {
    std::array<Vec2, kNumChannels> out{};
    for (int d = 0; d < 2; ++d) {
      for (int c = 0; c < 4; ++c) out[d * 4 + c] = device_offsets[d] + capsule_offsets[c];
    }
    return out;
  }
};

/// World-frame track of a body-fixed point carried by the vehicle.
inline Trajectory carried_point_track(const Trajectory& vehicle, Vec2 body_offset) {
  Trajectory out;
  out.samples.reserve(vehicle.samples.size());
  for (const Pose& p : vehicle.samples) {
    const Vec2 w = p.position() + rotate(body_offset, p.heading);
    out.samples.push_back({p.t, w.x, w.y, p.heading});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise and mixing
// ---------------------------------------------------------------------------

using MultiChannel = std::vector<std::vector<double>>;

/// RBJ cookbook biquad used for noise shaping.
struct ShapingFilter {
  double b0, b1, b2, a1, a2;

  static ShapingFilter lowpass(double fc, double q, double sr) {
    const double w = 2.0 * kPi * fc / sr, alpha = std::sin(w) / (2.0 * q), cw = std::cos(w);
    const double a0 = 1.0 + alpha;
    return {(1.0 - cw) / 2.0 / a0, (1.0 - cw) / a0, (1.0 - cw) / 2.0 / a0, -2.0 * cw / a0,
            (1.0 - alpha) / a0};
  }
  static ShapingFilter bandpass(double fc, double q, double sr) {
    const double w = 2.0 * kPi * fc / sr, alpha = std::sin(w) / (2.0 * q), cw = std::cos(w);
    const double a0 = 1.0 + alpha;
    return {alpha / a0, 0.0, -alpha / a0, -2.0 * cw / a0, (1.0 - alpha) / a0};
  }
  void apply(std::vector<double>& x) const {
    double s1 = 0.0, s2 = 0.0;
    for (double& v : x) {
      const double in = v, out = b0 * in + s1;
      s1 = b1 * in - a1 * out + s2;
      s2 = b2 * in - a2 * out;
      v = out;
    }
  }
};

/// Ambient noise: white floor, low-frequency wind rumble below ~300 Hz, and
/// sporadic band-limited traffic bursts. Channels are independent.
inline MultiChannel ambient_noise(std::size_t n, int channels, std::uint64_t seed,
                                  double sr = kSampleRate) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto wind_lp = ShapingFilter::lowpass(120.0, 0.707, sr);
  const auto wind_lp2 = ShapingFilter::lowpass(300.0, 0.707, sr);
  MultiChannel out(channels, std::vector<double>(n));
  for (auto& ch : out) {
    std::vector<double> wind(n), traffic(n, 0.0);
    for (auto& v : wind) v = gauss(rng);
    wind_lp.apply(wind);
    wind_lp2.apply(wind);
    // bursts: Poisson arrivals about once per second, Hann envelope
    double t = -std::log(1.0 - unif(rng));
    while (t * sr < static_cast<double>(n)) {
      const double len = 0.2 + 0.8 * unif(rng);
      const double fc = 200.0 + 1800.0 * unif(rng);
      const double gain = 0.3 + 0.7 * unif(rng);
      const auto start = static_cast<std::size_t>(t * sr);
      const auto count = std::min(static_cast<std::size_t>(len * sr), n - start);
      std::vector<double> burst(count);
      for (auto& v : burst) v = gauss(rng);
      ShapingFilter::bandpass(fc, 1.5, sr).apply(burst);
      for (std::size_t i = 0; i < count; ++i) {
        const double env = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / count);
        traffic[start + i] += gain * env * burst[i];
      }
      t += len - std::log(1.0 - unif(rng));
    }
    for (std::size_t i = 0; i < n; ++i) ch[i] = 0.05 * gauss(rng) + 3.0 * wind[i] + traffic[i];
  }
  return out;
}

inline double mean_power(const MultiChannel& x) {
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& ch : x) {
    for (double v : ch) acc += v * v;
    count += ch.size();
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

struct MixResult {
  MultiChannel audio;
  bool clipped = false;
};

/// clean + g*noise with g chosen so that the session-wide SNR equals snr_db.
/// snr_db = +inf returns clean unchanged. Clipping to [-1,1] is applied and
/// flagged only when some sample exceeds the range.
inline MixResult mix_scene(const MultiChannel& clean, const MultiChannel& noise, double snr_db) {
  require(clean.size() == noise.size(), "mix_scene: channel count mismatch");
  for (std::size_t c = 0; c < clean.size(); ++c) {
    require(clean[c].size() == noise[c].size(), "mix_scene: length mismatch");
  }
  require(!std::isnan(snr_db) && snr_db != -std::numeric_limits<double>::infinity(),
          "mix_scene: snr_db must be finite or +inf");
  MixResult r;
  if (std::isinf(snr_db)) {
    r.audio = clean;
  } else {
    const double pc = mean_power(clean), pn = mean_power(noise);
    require(pc > 0.0, "mix_scene: silent clean signal with finite snr_db");
    require(pn > 0.0, "mix_scene: silent noise");
    const double g = std::sqrt(pc / (pn * std::pow(10.0, snr_db / 10.0)));
    r.audio = clean;
    for (std::size_t c = 0; c < clean.size(); ++c) {
      for (std::size_t i = 0; i < clean[c].size(); ++i) r.audio[c][i] += g * noise[c][i];
    }
  }
  for (auto& ch : r.audio) {
    for (double& v : ch) {
      if (v > 1.0 || v < -1.0) {
        r.clipped = true;
        v = std::clamp(v, -1.0, 1.0);
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

enum class Scenario { intersection, opposite_parallel, same_direction, negative_only };

struct SceneConfig {
  Scenario scenario = Scenario::intersection;
  std::uint64_t seed = 0;
  double duration = 20.0;
  double snr_db = 10.0;
  double ego_speed = 8.0;
  double ev_speed = 12.0;
  SirenProfile siren{};
  std::string session_tag = "day0";

  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

inline void validate(const SceneConfig& c) {
  require(c.duration >= 1.5, "SceneConfig: duration must be at least 1.5 s");
  require(!std::isnan(c.snr_db) && c.snr_db != -std::numeric_limits<double>::infinity(),
          "SceneConfig: snr_db must be finite or +inf");
  require(c.ego_speed >= 0.0 && c.ego_speed <= 40.0, "SceneConfig: ego_speed out of [0,40]");
  require(c.ev_speed >= 0.0 && c.ev_speed <= 40.0, "SceneConfig: ev_speed out of [0,40]");
  require(!c.session_tag.empty(), "SceneConfig: empty session_tag");
  validate(c.siren);
}

using AudioBuffer = std::vector<std::vector<float>>;

struct SessionData {
  AudioBuffer audio;  // kNumChannels x (duration * 48000), values in [-1,1]
  Trajectory ego_track;
  Trajectory ev_track;  // empty for negative sessions
  bool has_siren = false;
  bool clipped = false;
  std::string session_tag;

  double duration() const {
    return audio.empty() ? 0.0 : static_cast<double>(audio.front().size()) / kSampleRate;
  }
  friend bool operator==(const SessionData&, const SessionData&) = default;
};

/// Minimum lead time before t = 0 covered by tracks and source audio, so
/// that sound emitted before the recording starts is already in flight.
inline constexpr double kPreRoll = 1.0;
inline constexpr double kPoseRate = 100.0;
inline constexpr double kReferencePower = 1e-3;

namespace detail {

inline Trajectory straight_track(Vec2 origin_at_zero, double heading, double speed, double t0,
                                 double t1) {
  Trajectory tr;
  const Vec2 dir{std::cos(heading), std::sin(heading)};
  const auto n = static_cast<std::size_t>(std::llround((t1 - t0) * kPoseRate));
  for (std::size_t i = 0; i <= n; ++i) {
    const double t = t0 + static_cast<double>(i) / kPoseRate;
    const Vec2 p = origin_at_zero + (speed * t) * dir;
    tr.samples.push_back({t, p.x, p.y, wrap_angle(heading)});
  }
  return tr;
}

}  // namespace detail

/// Ego and emergency-vehicle tracks for a scenario. The EV passes its closest
/// point of approach in the middle portion of the session.
inline std::pair<Trajectory, Trajectory> scenario_tracks(const SceneConfig& cfg, double pre_roll = kPreRoll) {
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double t0 = -pre_roll, t1 = cfg.duration;
  const double t_meet = cfg.duration * (0.35 + 0.3 * u(rng));
  Trajectory ego, ev;
  switch (cfg.scenario) {
    case Scenario::intersection: {
      // ego northbound on x = 0, EV eastbound on y = lane; ego still short of
      // the crossing by `gap` metres when the EV crosses.
      const double gap = 8.0 + 17.0 * u(rng);
      const double lane = 2.0 + 4.0 * u(rng);
      const bool eastbound = u(rng) < 0.5;
      ego = detail::straight_track({0.0, -gap - cfg.ego_speed * t_meet}, kPi / 2.0,
                                   cfg.ego_speed, t0, t1);
      const double h = eastbound ? 0.0 : kPi;
      const double sx = eastbound ? -1.0 : 1.0;
      ev = detail::straight_track({sx * cfg.ev_speed * t_meet, lane}, h, cfg.ev_speed, t0, t1);
      break;
    }
    case Scenario::opposite_parallel: {
      // oncoming EV in the lane to the ego's left
      const double lane = 3.0 + 5.0 * u(rng);
      ego = detail::straight_track({-cfg.ego_speed * t_meet, 0.0}, 0.0, cfg.ego_speed, t0, t1);
      ev = detail::straight_track({cfg.ev_speed * t_meet, lane}, kPi, cfg.ev_speed, t0, t1);
      break;
    }
    case Scenario::same_direction: {
      // EV overtakes on either side
      const double side = u(rng) < 0.5 ? 1.0 : -1.0;
      const double lane = side * (3.0 + 4.0 * u(rng));
      ego = detail::straight_track({-cfg.ego_speed * t_meet, 0.0}, 0.0, cfg.ego_speed, t0, t1);
      ev = detail::straight_track({-cfg.ev_speed * t_meet, lane}, 0.0, cfg.ev_speed, t0, t1);
      break;
    }
    case Scenario::negative_only: {
      const double heading = wrap_angle(2.0 * kPi * u(rng));
      ego = detail::straight_track({0.0, 0.0}, heading, cfg.ego_speed, t0, t1);
      break;
    }
  }
  return {std::move(ego), std::move(ev)};
}

/// Lead time long enough that every sample recorded from t = 0 on was
/// emitted inside the tracks: the range can grow by at most 80 m/s (two
/// vehicles at 40 m/s) while sound closes at c.
inline double required_pre_roll(const Trajectory& ego, const Trajectory& ev, double c = kSpeedOfSound) {
  if (ev.empty()) return kPreRoll;
  const double r0 = (interpolate_position(ev, 0.0) - interpolate_position(ego, 0.0)).norm();
  const double margin = 10.0;  // array extent plus slack, metres
  return std::max(kPreRoll, std::ceil(10.0 * (r0 + margin) / (c - 80.0)) / 10.0);
}

/// Deterministic simulated drive for the given configuration.
inline SessionData generate_session(const SceneConfig& cfg,
                                    const MicArrayGeometry& geometry = {}) {
  validate(cfg);
  SessionData s;
  s.session_tag = cfg.session_tag;
  s.has_siren = cfg.scenario != Scenario::negative_only;
  auto [ego, ev] = scenario_tracks(cfg);
  const double pre_roll = required_pre_roll(ego, ev);
  if (pre_roll > kPreRoll) std::tie(ego, ev) = scenario_tracks(cfg, pre_roll);
  s.ego_track = std::move(ego);
  s.ev_track = std::move(ev);

  const auto n = static_cast<std::size_t>(std::llround(cfg.duration * kSampleRate));
  MultiChannel clean(kNumChannels, std::vector<double>(n, 0.0));
  if (s.has_siren) {
    const auto source = synth_siren_waveform(cfg.siren, cfg.duration + pre_roll, kSampleRate, -pre_roll);
    const SourceSignal sig{source, -pre_roll, kSampleRate};
    const auto capsules = geometry.capsules();
    for (int c = 0; c < kNumChannels; ++c) {
      const auto rx = carried_point_track(s.ego_track, capsules[c]);
      clean[c] = propagate(sig, s.ev_track, rx, 0.0, n);
    }
  }
  const auto noise = ambient_noise(n, kNumChannels, cfg.seed * 2654435761ULL + 17);
  MixResult mixed;
  if (s.has_siren) {
    mixed = mix_scene(clean, noise, cfg.snr_db);
  } else {
    // no siren power to reference: noise is set relative to a nominal
    // session power of kReferencePower
    const double p = mean_power(noise);
    const double target = kReferencePower * std::pow(10.0, -std::min(cfg.snr_db, 60.0) / 10.0);
    MultiChannel scaled = noise;
    const double g = p > 0.0 ? std::sqrt(target / p) : 0.0;
    for (auto& ch : scaled) for (double& v : ch) v *= g;
    mixed = mix_scene(scaled, clean, std::numeric_limits<double>::infinity());
  }
  s.clipped = mixed.clipped;
  s.audio.resize(kNumChannels);
  for (int c = 0; c < kNumChannels; ++c) {
    s.audio[c].assign(mixed.audio[c].begin(), mixed.audio[c].end());
  }
  return s;
}

}  // namespace sirenloc::sim
