#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sirenloc/core.hpp"
#include "sirenloc/geometry.hpp"
#include "sirenloc/scene_sim.hpp"

namespace sirenloc::io {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// WAV, IEEE float 32-bit PCM, interleaved
// ---------------------------------------------------------------------------

struct WavData {
  int sample_rate = kSampleRate;
  sim::AudioBuffer channels;
};

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint16_t get_u16(std::istream& is) {
  std::uint16_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 2);
  return v;
}
}  // namespace detail

inline void write_wav(const fs::path& path, const sim::AudioBuffer& channels, int sample_rate = kSampleRate) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  require(!channels.empty(), "write_wav: no channels");
  const std::size_t frames = channels.front().size();
  for (const auto& ch : channels) require(ch.size() == frames, "write_wav: ragged channels");
  const auto n_ch = static_cast<std::uint16_t>(channels.size());
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(frames * n_ch * 4);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  os.write("RIFF", 4);
  detail::put_u32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  detail::put_u32(os, 16);
  detail::put_u16(os, 3);  // WAVE_FORMAT_IEEE_FLOAT
  detail::put_u16(os, n_ch);
  detail::put_u32(os, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(os, static_cast<std::uint32_t>(sample_rate) * n_ch * 4);
  detail::put_u16(os, static_cast<std::uint16_t>(n_ch * 4));
  detail::put_u16(os, 32);
  os.write("data", 4);
  detail::put_u32(os, data_bytes);
  std::vector<float> frame(n_ch);
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t c = 0; c < n_ch; ++c) frame[c] = channels[c][i];
    os.write(reinterpret_cast<const char*>(frame.data()), static_cast<std::streamsize>(n_ch * 4));
  }
  if (!os) throw RuntimeFailure("write failed: " + path.string());
}

inline WavData read_wav(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("cannot open " + path.string());
  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) throw InvalidInput(path.string() + ": not a RIFF file");
  detail::get_u32(is);
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) throw InvalidInput(path.string() + ": not a WAVE file");
  WavData out;
  std::uint16_t format = 0, n_ch = 0, bits = 0;
  bool have_fmt = false;
  while (is.read(tag, 4)) {
    const std::uint32_t size = detail::get_u32(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = detail::get_u16(is);
      n_ch = detail::get_u16(is);
      out.sample_rate = static_cast<int>(detail::get_u32(is));
      detail::get_u32(is);
      detail::get_u16(is);
      bits = detail::get_u16(is);
      is.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw InvalidInput(path.string() + ": data chunk before fmt chunk");
      if (format != 3 || bits != 32) throw InvalidInput(path.string() + ": expected 32-bit float PCM");
      if (n_ch == 0) throw InvalidInput(path.string() + ": zero channels");
      const std::size_t frames = size / (4u * n_ch);
      std::vector<float> interleaved(frames * n_ch);
      is.read(reinterpret_cast<char*>(interleaved.data()),
              static_cast<std::streamsize>(interleaved.size() * 4));
      if (!is) throw RuntimeFailure(path.string() + ": truncated data chunk");
      out.channels.assign(n_ch, std::vector<float>(frames));
      for (std::size_t i = 0; i < frames; ++i) {
        for (std::size_t c = 0; c < n_ch; ++c) out.channels[c][i] = interleaved[i * n_ch + c];
      }
      return out;
    } else {
      is.seekg(size + (size & 1u), std::ios::cur);
    }
  }
  throw InvalidInput(path.string() + ": no data chunk");
}

// ---------------------------------------------------------------------------
// Pose logs: one `t x y heading` record per line, 6 decimals
// ---------------------------------------------------------------------------

inline void write_pose_log(const fs::path& path, const Trajectory& track) {
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  char line[160];
  for (const Pose& p : track.samples) {
    std::snprintf(line, sizeof line, "%.6f %.6f %.6f %.6f\n", p.t, p.x, p.y, p.heading);
    os << line;
  }
}

inline Trajectory read_pose_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw RuntimeFailure("cannot open " + path.string());
  Trajectory tr;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Pose p;
    if (!(ls >> p.t >> p.x >> p.y >> p.heading)) {
      throw InvalidInput(path.string() + ": malformed pose record: " + line);
    }
    tr.samples.push_back(p);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Enum names and session manifest
// ---------------------------------------------------------------------------

inline std::string to_string(sim::Scenario s) {
  switch (s) {
    case sim::Scenario::intersection: return "intersection";
    case sim::Scenario::opposite_parallel: return "opposite_parallel";
    case sim::Scenario::same_direction: return "same_direction";
    case sim::Scenario::negative_only: return "negative_only";
  }
  return "?";
}

inline sim::Scenario scenario_from_string(const std::string& s) {
  for (auto v : {sim::Scenario::intersection, sim::Scenario::opposite_parallel,
                 sim::Scenario::same_direction, sim::Scenario::negative_only}) {
    if (to_string(v) == s) return v;
  }
  throw InvalidInput("unknown scenario: " + s);
}

inline std::string to_string(sim::SirenKind k) {
  switch (k) {
    case sim::SirenKind::wail: return "wail";
    case sim::SirenKind::yelp: return "yelp";
    case sim::SirenKind::hi_lo: return "hi-lo";
    case sim::SirenKind::constant_tone: return "constant-tone";
  }
  return "?";
}

inline sim::SirenKind siren_kind_from_string(const std::string& s) {
  for (auto v : {sim::SirenKind::wail, sim::SirenKind::yelp, sim::SirenKind::hi_lo,
                 sim::SirenKind::constant_tone}) {
    if (to_string(v) == s) return v;
  }
  throw InvalidInput("unknown siren kind: " + s);
}

/// +inf is written as the string "inf" since JSON has no infinity.
inline json snr_to_json(double snr_db) {
  return std::isinf(snr_db) ? json("inf") : json(snr_db);
}

inline double snr_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
    throw InvalidInput("snr_db: expected a number or \"inf\"");
  }
  return j.get<double>();
}

struct SessionManifest {
  std::string scenario;
  std::uint64_t seed = 0;
  double snr_db = 0.0;
  bool has_siren = false;
  std::string session_tag;
  double duration = 0.0;
  bool clipped = false;
};

inline json to_json(const SessionManifest& m) {
  return json{{"scenario", m.scenario}, {"seed", m.seed},           {"snr_db", snr_to_json(m.snr_db)},
              {"has_siren", m.has_siren}, {"session_tag", m.session_tag}, {"duration", m.duration},
              {"sample_rate", kSampleRate}, {"channels", kNumChannels},  {"clipped", m.clipped}};
}

inline SessionManifest manifest_from_json(const json& j) {
  SessionManifest m;
  m.scenario = j.at("scenario").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.snr_db = snr_from_json(j.at("snr_db"));
  m.has_siren = j.at("has_siren").get<bool>();
  m.session_tag = j.at("session_tag").get<std::string>();
  m.duration = j.at("duration").get<double>();
  m.clipped = j.value("clipped", false);
  return m;
}

/// Directory name for a generated session; unique per (tag, scenario, seed).
inline std::string session_dir_name(const sim::SceneConfig& cfg) {
  return cfg.session_tag + "_" + to_string(cfg.scenario) + "_s" + std::to_string(cfg.seed);
}

/// Writes audio.wav, ego_poses.txt, ev_poses.txt and manifest.json into `dir`.
inline void write_session(const fs::path& dir, const sim::SessionData& s, const sim::SceneConfig& cfg) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create " + dir.string() + ": " + ec.message());
  write_wav(dir / "audio.wav", s.audio);
  write_pose_log(dir / "ego_poses.txt", s.ego_track);
  write_pose_log(dir / "ev_poses.txt", s.ev_track);
  SessionManifest m{io::to_string(cfg.scenario), cfg.seed, cfg.snr_db, s.has_siren,
                    s.session_tag, s.duration(), s.clipped};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw RuntimeFailure("cannot write manifest in " + dir.string());
  os << to_json(m).dump(2) << "\n";
}

struct LoadedSession {
  sim::SessionData data;
  SessionManifest manifest;
  std::string id;  // directory name
};

inline LoadedSession read_session(const fs::path& dir) {
  LoadedSession out;
  out.id = dir.filename().string();
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw RuntimeFailure("missing manifest in " + dir.string());
  out.manifest = manifest_from_json(json::parse(ms));
  auto wav = read_wav(dir / "audio.wav");
  if (wav.sample_rate != kSampleRate || wav.channels.size() != kNumChannels) {
    throw InvalidInput(dir.string() + ": expected 8 channels at 48 kHz");
  }
  out.data.audio = std::move(wav.channels);
  out.data.ego_track = read_pose_log(dir / "ego_poses.txt");
  out.data.ev_track = read_pose_log(dir / "ev_poses.txt");
  out.data.has_siren = out.manifest.has_siren;
  out.data.clipped = out.manifest.clipped;
  out.data.session_tag = out.manifest.session_tag;
  return out;
}

}  // namespace sirenloc::io
