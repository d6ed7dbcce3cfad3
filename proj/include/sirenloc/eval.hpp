#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sirenloc/core.hpp"

namespace sirenloc::eval {

struct Prediction {
  double p_siren = 0.0;
  double theta_hat = 0.0;  // radians
  double distance = 0.0;   // meters, already clamped for reporting
};

struct Truth {
  bool is_siren = false;
  double theta = 0.0;
  double distance = 0.0;
};

/// Absolute angular difference on the circle, in degrees, within [0, 180].
inline double angle_abs_error(double theta_hat, double theta) {
  double e = std::abs(wrap_angle(theta_hat) - wrap_angle(theta));
  if (e > kPi) e = 2.0 * kPi - e;
  return deg(e);
}

inline bool classify(double p_siren, double threshold = 0.5) { return p_siren >= threshold; }

// ---------------------------------------------------------------------------
// Distance-binned breakdown
// ---------------------------------------------------------------------------

inline constexpr int kNumBins = 10;
inline constexpr double kBinWidth = 10.0;

struct BinStats {
  std::size_t count = 0;   // positives in the bin
  std::size_t detected = 0;
  double recall = 0.0;     // percent
  double angle_mae = 0.0;  // degrees, over detected positives; NaN if none
  double distance_mae = 0.0;
};

struct MetricsTable {
  std::array<std::optional<BinStats>, kNumBins> bins;
};

/// Bin index for a ground-truth distance; 100 m exactly lands in the last bin.
inline int distance_bin(double d) {
  if (!(d >= 0.0) || d > kNumBins * kBinWidth) return -1;
  return std::min(static_cast<int>(d / kBinWidth), kNumBins - 1);
}

inline std::string bin_label(int b) {
  return std::to_string(static_cast<int>(b * kBinWidth)) + "-" + std::to_string(static_cast<int>((b + 1) * kBinWidth));
}

/// Per-bin recall over positives (there is no distance for a missing siren),
/// and angle/distance MAE over the detected positives of the bin.
inline MetricsTable binned_metrics(const std::vector<Prediction>& preds, const std::vector<Truth>& truths,
                                   double threshold = 0.5) {
  require(preds.size() == truths.size(), "binned_metrics: size mismatch");
  std::array<std::size_t, kNumBins> n{}, tp{};
  std::array<double, kNumBins> ang{}, dist{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!truths[i].is_siren) continue;
    const int b = distance_bin(truths[i].distance);
    if (b < 0) continue;
    ++n[b];
    if (!classify(preds[i].p_siren, threshold)) continue;
    ++tp[b];
    ang[b] += angle_abs_error(preds[i].theta_hat, truths[i].theta);
    dist[b] += std::abs(preds[i].distance - truths[i].distance);
  }
  MetricsTable t;
  for (int b = 0; b < kNumBins; ++b) {
    if (n[b] == 0) continue;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double d = static_cast<double>(tp[b]);
    t.bins[b] = BinStats{n[b], tp[b], 100.0 * d / static_cast<double>(n[b]), tp[b] ? ang[b] / d : nan,
                         tp[b] ? dist[b] / d : nan};
  }
  return t;
}

inline const char* kMetricsHeader = "metric,0-10,10-20,20-30,30-40,40-50,50-60,60-70,70-80,80-90,90-100";

inline std::string format_metrics_csv(const MetricsTable& t) {
  std::ostringstream os;
  os << kMetricsHeader << "\n";
  auto row = [&](const char* name, auto get) {
    os << name;
    for (const auto& b : t.bins) {
      os << ",";
      if (b && std::isfinite(get(*b))) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4f", get(*b));
        os << buf;
      } else {
        os << "NA";
      }
    }
    os << "\n";
  };
  row("recall_pct", [](const BinStats& b) { return b.recall; });
  row("angle_mae_deg", [](const BinStats& b) { return b.angle_mae; });
  row("distance_mae_m", [](const BinStats& b) { return b.distance_mae; });
  os << "count";
  for (const auto& b : t.bins) os << "," << (b ? std::to_string(b->count) : std::string("0"));
  os << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Order statistics
// ---------------------------------------------------------------------------

/// Linear-interpolated quantile of an ascending-sorted sample, q in [0,1].
inline double quantile_sorted(const std::vector<double>& v, double q) {
  require(!v.empty(), "quantile of empty sample");
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, 0.5);
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

/// Box-plot statistics with Tukey whiskers (furthest data within 1.5 IQR).
struct BoxStats {
  std::size_t count = 0;
  double min = 0, whisker_lo = 0, q1 = 0, median = 0, q3 = 0, whisker_hi = 0, max = 0, mean = 0;
};

inline BoxStats box_stats(std::vector<double> v) {
  require(!v.empty(), "box_stats: empty sample");
  std::sort(v.begin(), v.end());
  BoxStats b;
  b.count = v.size();
  b.min = v.front();
  b.max = v.back();
  b.q1 = quantile_sorted(v, 0.25);
  b.median = quantile_sorted(v, 0.5);
  b.q3 = quantile_sorted(v, 0.75);
  const double iqr = b.q3 - b.q1;
  b.whisker_lo = *std::lower_bound(v.begin(), v.end(), b.q1 - 1.5 * iqr);
  b.whisker_hi = *(std::upper_bound(v.begin(), v.end(), b.q3 + 1.5 * iqr) - 1);
  b.mean = eval::mean(v);
  return b;
}

/// Per-bin absolute angle (degrees) and distance (m) errors over positives.
struct ErrorDistributions {
  std::array<std::vector<double>, kNumBins> angle, distance;
};

inline ErrorDistributions error_distributions(const std::vector<Prediction>& preds,
                                              const std::vector<Truth>& truths) {
  require(preds.size() == truths.size(), "error_distributions: size mismatch");
  ErrorDistributions e;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!truths[i].is_siren) continue;
    const int b = distance_bin(truths[i].distance);
    if (b < 0) continue;
    e.angle[b].push_back(angle_abs_error(preds[i].theta_hat, truths[i].theta));
    e.distance[b].push_back(std::abs(preds[i].distance - truths[i].distance));
  }
  return e;
}

inline std::string format_box_csv(const std::array<std::vector<double>, kNumBins>& per_bin) {
  std::ostringstream os;
  os << "bin,count,min,whisker_lo,q1,median,q3,whisker_hi,max,mean\n";
  for (int b = 0; b < kNumBins; ++b) {
    os << bin_label(b);
    if (per_bin[b].empty()) {
      os << ",0,NA,NA,NA,NA,NA,NA,NA,NA\n";
      continue;
    }
    const auto s = box_stats(per_bin[b]);
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%zu,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n", s.count, s.min,
                  s.whisker_lo, s.q1, s.median, s.q3, s.whisker_hi, s.max, s.mean);
    os << buf;
  }
  return os.str();
}

/// Minimal SVG box plot, one box per non-empty bin.
inline std::string box_plot_svg(const std::array<std::vector<double>, kNumBins>& per_bin, const std::string& title,
                                const std::string& unit) {
  double top = 1.0;
  for (const auto& v : per_bin) {
    if (!v.empty()) top = std::max(top, box_stats(v).whisker_hi);
  }
  const double w = 640, h = 360, left = 60, right = 20, up = 40, down = 50;
  const double plot_w = w - left - right, plot_h = h - up - down;
  auto y = [&](double v) { return up + plot_h * (1.0 - v / top); };
  std::ostringstream os;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n",
                w, h);
  os << buf;
  os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", left,
                up, left, up + plot_h);
  os << buf;
  for (int k = 0; k <= 4; ++k) {
    const double v = top * k / 4.0;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n"
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>\n",
                  left - 5, y(v) + 4, v, left, y(v), left + plot_w, y(v));
    os << buf;
  }
  os << "<text x=\"15\" y=\"" << up + plot_h / 2 << "\" transform=\"rotate(-90 15 " << up + plot_h / 2
     << ")\" text-anchor=\"middle\">" << unit << "</text>\n";
  const double slot = plot_w / kNumBins;
  for (int b = 0; b < kNumBins; ++b) {
    const double cx = left + slot * (b + 0.5);
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%s</text>\n", cx,
                  up + plot_h + 18, bin_label(b).c_str());
    os << buf;
    if (per_bin[b].empty()) continue;
    const auto s = box_stats(per_bin[b]);
    const double bw = slot * 0.3;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"#9ecae1\" stroke=\"black\"/>\n"
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#d62728\" stroke-width=\"2\"/>\n",
                  cx, y(s.whisker_lo), cx, y(s.q1), cx, y(s.q3), cx, y(s.whisker_hi), cx - bw, y(s.q3), 2 * bw,
                  std::max(0.5, y(s.q1) - y(s.q3)), cx - bw, y(s.median), cx + bw, y(s.median));
    os << buf;
  }
  os << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << h - 10
     << "\" text-anchor=\"middle\">distance range (m)</text>\n</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

struct SummaryStats {
  std::size_t samples = 0;
  std::size_t positives_in_range = 0;
  double accuracy = 0.0;
  double recall = 0.0;
  double angle_median = 0.0, angle_mean = 0.0;        // degrees
  double distance_median = 0.0, distance_mean = 0.0;  // meters
  double range_lo = 10.0, range_hi = 50.0;
  std::optional<double> latency_median_ms, latency_p95_ms;
};

/// Accuracy over every sample; recall and error statistics over positives
/// whose true distance lies in [range_lo, range_hi].
inline SummaryStats summary_stats(const std::vector<Prediction>& preds, const std::vector<Truth>& truths,
                                  double range_lo = 10.0, double range_hi = 50.0, double threshold = 0.5) {
  require(preds.size() == truths.size(), "summary_stats: size mismatch");
  SummaryStats s;
  s.samples = preds.size();
  s.range_lo = range_lo;
  s.range_hi = range_hi;
  std::size_t correct = 0, tp = 0;
  std::vector<double> ang, dist;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool positive = classify(preds[i].p_siren, threshold);
    if (positive == truths[i].is_siren) ++correct;
    if (!truths[i].is_siren || truths[i].distance < range_lo || truths[i].distance > range_hi) continue;
    if (positive) ++tp;
    ang.push_back(angle_abs_error(preds[i].theta_hat, truths[i].theta));
    dist.push_back(std::abs(preds[i].distance - truths[i].distance));
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.positives_in_range = ang.size();
  s.accuracy = s.samples ? static_cast<double>(correct) / s.samples : nan;
  s.recall = ang.empty() ? nan : static_cast<double>(tp) / ang.size();
  s.angle_median = ang.empty() ? nan : median(ang);
  s.angle_mean = mean(ang);
  s.distance_median = dist.empty() ? nan : median(dist);
  s.distance_mean = mean(dist);
  return s;
}

inline std::string format_summary(const SummaryStats& s) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "samples: %zu\naccuracy: %.4f\n", s.samples, s.accuracy);
  os << buf;
  std::snprintf(buf, sizeof buf, "range: %.0f-%.0f m (%zu positives)\nrecall: %.4f\n", s.range_lo, s.range_hi,
                s.positives_in_range, s.recall);
  os << buf;
  std::snprintf(buf, sizeof buf, "angle abs error: median %.2f deg, mean %.2f deg\n", s.angle_median, s.angle_mean);
  os << buf;
  std::snprintf(buf, sizeof buf, "distance abs error: median %.2f m, mean %.2f m\n", s.distance_median,
                s.distance_mean);
  os << buf;
  if (s.latency_median_ms) {
    std::snprintf(buf, sizeof buf, "latency: median %.2f ms, p95 %.2f ms\n", *s.latency_median_ms,
                  s.latency_p95_ms.value_or(*s.latency_median_ms));
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

struct LatencyStats {
  double median_ms = 0.0;
  double p95_ms = 0.0;
  std::vector<double> samples_ms;
};

/// Wall-clock timing of `run`, discarding `warmup` initial calls.
inline LatencyStats measure_latency(const std::function<void()>& run, int runs = 100, int warmup = 10) {
  require(runs >= 1 && warmup >= 0, "measure_latency: bad run counts");
  for (int i = 0; i < warmup; ++i) run();
  LatencyStats s;
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    s.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = s.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  s.median_ms = quantile_sorted(sorted, 0.5);
  // nearest-rank p95
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(sorted.size())));
  s.p95_ms = sorted[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

}  // namespace sirenloc::eval
