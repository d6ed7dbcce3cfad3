#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sirenloc/core.hpp"
#include "sirenloc/geometry.hpp"
#include "sirenloc/scene_sim.hpp"

namespace sirenloc::label {

/// One training sample. The audio is a view into the owning session buffer.
struct LabeledWindow {
  std::shared_ptr<const sim::AudioBuffer> source;
  std::size_t audio_offset = 0;  // first sample of the model input slice
  std::size_t audio_len = 0;
  double t_end = 0.0;
  bool is_siren = false;
  double theta = std::numeric_limits<double>::quiet_NaN();
  double distance = std::numeric_limits<double>::quiet_NaN();
  std::string session_tag;
  std::string session_id;

  /// Copies the slice out as doubles, one vector per channel.
  std::vector<std::vector<double>> audio() const {
    std::vector<std::vector<double>> out;
    if (!source) return out;
    for (const auto& ch : *source) {
      out.emplace_back(ch.begin() + static_cast<std::ptrdiff_t>(audio_offset),
                       ch.begin() + static_cast<std::ptrdiff_t>(audio_offset + audio_len));
    }
    return out;
  }
};

struct WindowParams {
  double window_len = 1.5;
  double stride = 0.17;
  double input_len = 0.5;
  double cutoff_m = 100.0;

  friend bool operator==(const WindowParams&, const WindowParams&) = default;
};

inline std::size_t to_samples(double seconds) {
  return static_cast<std::size_t>(std::llround(seconds * kSampleRate));
}

/// Number of windows that fit in n samples: floor((n - window) / stride) + 1.
inline std::size_t window_count(std::size_t n, const WindowParams& p) {
  const auto w = to_samples(p.window_len), s = to_samples(p.stride);
  return n < w ? 0 : (n - w) / s + 1;
}

/// Sliding windows over a session, labeled from the poses at each window end.
/// The emitted audio is the trailing input_len of each window. Positive
/// windows farther than cutoff_m are dropped.
inline std::vector<LabeledWindow> window_dataset(std::shared_ptr<const sim::SessionData> session,
                                                 const WindowParams& p = {},
                                                 const std::string& session_id = {}) {
  require(session != nullptr, "window_dataset: null session");
  require(p.input_len > 0.0 && p.input_len <= p.window_len && p.stride > 0.0,
          "window_dataset: need 0 < input_len <= window_len and stride > 0");
  const auto audio = std::shared_ptr<const sim::AudioBuffer>(session, &session->audio);
  const std::size_t n = session->audio.empty() ? 0 : session->audio.front().size();
  const auto w = to_samples(p.window_len), s = to_samples(p.stride), in = to_samples(p.input_len);
  const std::size_t count = window_count(n, p);
  std::vector<LabeledWindow> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    LabeledWindow lw;
    lw.source = audio;
    const std::size_t end = k * s + w;
    lw.audio_offset = end - in;
    lw.audio_len = in;
    lw.t_end = static_cast<double>(end) / kSampleRate;
    lw.session_tag = session->session_tag;
    lw.session_id = session_id;
    lw.is_siren = session->has_siren;
    if (lw.is_siren) {
      const Pose ego = interpolate_pose(session->ego_track, lw.t_end);
      const Pose ev = interpolate_pose(session->ev_track, lw.t_end);
      const auto rel = relative_angle_distance(ego, ev);
      if (rel.distance > p.cutoff_m) continue;
      lw.theta = rel.theta;
      lw.distance = rel.distance;
    }
    out.push_back(std::move(lw));
  }
  return out;
}

inline bool in_front_back_sector(double theta, double halfwidth) {
  return std::abs(theta) <= halfwidth || kPi - std::abs(theta) <= halfwidth;
}

/// Thins positives that sit dead ahead or dead behind: each such sample is
/// kept with probability keep_ratio. Everything else passes through.
inline std::vector<LabeledWindow> balance_directions(const std::vector<LabeledWindow>& samples,
                                                     double sector_halfwidth, double keep_ratio,
                                                     std::uint64_t seed) {
  require(keep_ratio >= 0.0 && keep_ratio <= 1.0, "balance_directions: keep_ratio out of [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<LabeledWindow> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.is_siren && in_front_back_sector(s.theta, sector_halfwidth)) {
      if (!(u(rng) < keep_ratio)) continue;
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Session-disjoint splitting
// ---------------------------------------------------------------------------

struct DatasetSplit {
  std::vector<LabeledWindow> train, valid, test;
  std::array<double, 3> ratio{8, 1, 1};
  double deviation = 0.0;  // sum over splits of |fraction - target fraction|
  std::array<std::vector<std::string>, 3> tags;
};

/// Sum over splits of |count_s / total - ratio_s / sum(ratio)|.
inline double split_deviation(const std::array<std::size_t, 3>& counts, const std::array<double, 3>& ratio) {
  const double total = static_cast<double>(counts[0] + counts[1] + counts[2]);
  const double rsum = ratio[0] + ratio[1] + ratio[2];
  double d = 0.0;
  for (int i = 0; i < 3; ++i) d += std::abs(counts[i] / total - ratio[i] / rsum);
  return d;
}

/// Assignment of session groups (by size) to splits 0/1/2 with every split
/// non-empty, minimizing split_deviation. Exhaustive up to 12 groups,
/// greedy fill plus move/swap descent beyond that.
inline std::vector<int> assign_groups(const std::vector<std::size_t>& sizes,
                                      const std::array<double, 3>& ratio, std::uint64_t seed) {
  const std::size_t k = sizes.size();
  require(k >= 3, "split_by_session: need at least 3 distinct session tags");
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  auto counts_of = [&](const std::vector<int>& a) {
    std::array<std::size_t, 3> c{0, 0, 0};
    for (std::size_t i = 0; i < k; ++i) c[a[i]] += sizes[i];
    return c;
  };
  auto nonempty = [&](const std::vector<int>& a) {
    std::array<int, 3> n{0, 0, 0};
    for (int s : a) ++n[s];
    return n[0] > 0 && n[1] > 0 && n[2] > 0;
  };

  std::vector<int> best(k, 0);
  if (k <= 12) {
    double best_dev = std::numeric_limits<double>::infinity();
    std::vector<int> a(k, 0);
    std::size_t total = 1;
    for (std::size_t i = 0; i < k; ++i) total *= 3;
    for (std::size_t code = 0; code < total; ++code) {
      std::size_t c = code;
      for (std::size_t i = 0; i < k; ++i) {
        a[order[i]] = static_cast<int>(c % 3);
        c /= 3;
      }
      if (!nonempty(a)) continue;
      const double d = split_deviation(counts_of(a), ratio);
      if (d < best_dev - 1e-15) {
        best_dev = d;
        best = a;
      }
    }
    return best;
  }

  const double rsum = ratio[0] + ratio[1] + ratio[2];
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sizes[a] > sizes[b]; });
  std::array<double, 3> filled{0, 0, 0};
  for (std::size_t idx : order) {
    int pick = 0;
    double most = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < 3; ++s) {
      const double deficit = total * ratio[s] / rsum - filled[s];
      if (deficit > most) {
        most = deficit;
        pick = s;
      }
    }
    best[idx] = pick;
    filled[pick] += static_cast<double>(sizes[idx]);
  }
  // guarantee non-empty splits by moving the smallest groups
  for (int s = 0; s < 3 && !nonempty(best); ++s) {
    if (std::count(best.begin(), best.end(), s) == 0) {
      for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int from = best[*it];
        if (std::count(best.begin(), best.end(), from) > 1) {
          best[*it] = s;
          break;
        }
      }
    }
  }
  double dev = split_deviation(counts_of(best), ratio);
  for (bool improved = true; improved;) {
    improved = false;
    for (std::size_t i = 0; i < k; ++i) {
      for (int s = 0; s < 3; ++s) {
        if (s == best[i]) continue;
        auto cand = best;
        cand[i] = s;
        if (!nonempty(cand)) continue;
        const double d = split_deviation(counts_of(cand), ratio);
        if (d < dev - 1e-15) {
          best = std::move(cand);
          dev = d;
          improved = true;
        }
      }
      for (std::size_t j = i + 1; j < k; ++j) {
        if (best[i] == best[j]) continue;
        auto cand = best;
        std::swap(cand[i], cand[j]);
        const double d = split_deviation(counts_of(cand), ratio);
        if (d < dev - 1e-15) {
          best = std::move(cand);
          dev = d;
          improved = true;
        }
      }
    }
  }
  return best;
}

/// Whole session_tag groups go to train/valid/test with sample counts as close
/// to `ratio` as the grouping allows.
inline DatasetSplit split_by_session(const std::vector<LabeledWindow>& samples,
                                     std::array<double, 3> ratio = {8, 1, 1},
                                     std::uint64_t seed = 0) {
  require(ratio[0] >= 0 && ratio[1] >= 0 && ratio[2] >= 0 && ratio[0] + ratio[1] + ratio[2] > 0,
          "split_by_session: invalid ratio");
  std::map<std::string, std::size_t> counts;
  for (const auto& s : samples) ++counts[s.session_tag];
  std::vector<std::string> tags;
  std::vector<std::size_t> sizes;
  for (const auto& [tag, n] : counts) {
    tags.push_back(tag);
    sizes.push_back(n);
  }
  const auto assignment = assign_groups(sizes, ratio, seed);
  std::map<std::string, int> where;
  DatasetSplit out;
  out.ratio = ratio;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    where[tags[i]] = assignment[i];
    out.tags[assignment[i]].push_back(tags[i]);
  }
  for (const auto& s : samples) {
    switch (where[s.session_tag]) {
      case 0: out.train.push_back(s); break;
      case 1: out.valid.push_back(s); break;
      default: out.test.push_back(s); break;
    }
  }
  out.deviation = split_deviation({out.train.size(), out.valid.size(), out.test.size()}, ratio);
  return out;
}

// ---------------------------------------------------------------------------
// Label files: `session_tag t_end is_siren theta distance audio_offset`
// ---------------------------------------------------------------------------

struct LabelRecord {
  std::string session_tag;
  double t_end = 0.0;
  bool is_siren = false;
  double theta = std::numeric_limits<double>::quiet_NaN();
  double distance = std::numeric_limits<double>::quiet_NaN();
  std::size_t audio_offset = 0;
};

inline std::string format_record(const LabeledWindow& w) {
  char buf[256];
  if (w.is_siren) {
    std::snprintf(buf, sizeof buf, "%s %.6f 1 %.9f %.6f %zu", w.session_tag.c_str(), w.t_end,
                  w.theta, w.distance, w.audio_offset);
  } else {
    std::snprintf(buf, sizeof buf, "%s %.6f 0 nan nan %zu", w.session_tag.c_str(), w.t_end,
                  w.audio_offset);
  }
  return buf;
}

inline void write_labels(const std::filesystem::path& path, const std::vector<LabeledWindow>& windows) {
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  for (const auto& w : windows) os << format_record(w) << "\n";
}

inline std::vector<LabelRecord> read_labels(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw RuntimeFailure("cannot open " + path.string());
  std::vector<LabelRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    LabelRecord r;
    std::string theta, dist;
    int flag = 0;
    if (!(ls >> r.session_tag >> r.t_end >> flag >> theta >> dist >> r.audio_offset)) {
      throw InvalidInput(path.string() + ": malformed label record: " + line);
    }
    r.is_siren = flag != 0;
    if (r.is_siren) {
      r.theta = std::stod(theta);
      r.distance = std::stod(dist);
    }
    out.push_back(r);
  }
  return out;
}

/// Rebuilds windows over a loaded session from stored label records.
inline std::vector<LabeledWindow> windows_from_records(std::shared_ptr<const sim::SessionData> session,
                                                       const std::vector<LabelRecord>& records,
                                                       std::size_t input_samples,
                                                       const std::string& session_id) {
  const auto audio = std::shared_ptr<const sim::AudioBuffer>(session, &session->audio);
  const std::size_t n = session->audio.empty() ? 0 : session->audio.front().size();
  std::vector<LabeledWindow> out;
  for (const auto& r : records) {
    require(r.audio_offset + input_samples <= n, "label record points past the end of the session audio");
    LabeledWindow w;
    w.source = audio;
    w.audio_offset = r.audio_offset;
    w.audio_len = input_samples;
    w.t_end = r.t_end;
    w.is_siren = r.is_siren;
    w.theta = r.theta;
    w.distance = r.distance;
    w.session_tag = r.session_tag;
    w.session_id = session_id;
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace sirenloc::label
