#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "sirenloc/autolabel.hpp"

using namespace sirenloc;
using namespace sirenloc::label;

namespace {

Trajectory line_track(Vec2 p0, Vec2 v, double heading, double t1) {
  Trajectory tr;
  for (int i = 0; i <= static_cast<int>(t1 * 10.0); ++i) {
    const double t = i / 10.0;
    tr.samples.push_back({t, p0.x + v.x * t, p0.y + v.y * t, heading});
  }
  return tr;
}

std::shared_ptr<sim::SessionData> make_session(double duration, bool siren, Trajectory ev = {},
                                               Trajectory ego = {}) {
  auto s = std::make_shared<sim::SessionData>();
  const auto n = static_cast<std::size_t>(std::llround(duration * kSampleRate));
  s->audio.assign(kNumChannels, std::vector<float>(n));
  for (int c = 0; c < kNumChannels; ++c) {
    for (std::size_t i = 0; i < n; ++i) s->audio[c][i] = static_cast<float>(c * 1000000 + i);
  }
  s->ego_track = ego.empty() ? line_track({0, 0}, {0, 0}, 0.0, duration) : ego;
  s->ev_track = std::move(ev);
  s->has_siren = siren;
  s->session_tag = "day7";
  return s;
}

std::vector<LabeledWindow> tagged(const std::vector<std::size_t>& sizes) {
  std::vector<LabeledWindow> out;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    for (std::size_t i = 0; i < sizes[g]; ++i) {
      LabeledWindow w;
      w.session_tag = "t" + std::to_string(g);
      w.t_end = static_cast<double>(i);
      out.push_back(w);
    }
  }
  return out;
}

double brute_force_deviation(const std::vector<std::size_t>& sizes) {
  const std::size_t k = sizes.size();
  std::size_t total = 1;
  for (std::size_t i = 0; i < k; ++i) total *= 3;
  double best = 1e9;
  for (std::size_t code = 0; code < total; ++code) {
    std::array<double, 3> cnt{0, 0, 0};
    std::array<int, 3> groups{0, 0, 0};
    std::size_t c = code;
    for (std::size_t i = 0; i < k; ++i) {
      cnt[c % 3] += static_cast<double>(sizes[i]);
      ++groups[c % 3];
      c /= 3;
    }
    if (groups[0] == 0 || groups[1] == 0 || groups[2] == 0) continue;
    const double n = cnt[0] + cnt[1] + cnt[2];
    best = std::min(best, std::abs(cnt[0] / n - 0.8) + std::abs(cnt[1] / n - 0.1) + std::abs(cnt[2] / n - 0.1));
  }
  return best;
}

}  // namespace

TEST(WindowDataset, TenSecondsGives51Windows) {
  const auto w = window_dataset(make_session(10.0, false));
  EXPECT_EQ(w.size(), 51u);
}

TEST(WindowDataset, CountFormulaAndLayout) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(1.5, 8.0);
  for (int trial = 0; trial < 20; ++trial) {
    const double dur = std::round(u(rng) * 1000.0) / 1000.0;
    const auto s = make_session(dur, false);
    const auto w = window_dataset(s);
    const std::size_t n = s->audio[0].size();
    EXPECT_EQ(w.size(), (n - 72000) / 8160 + 1);
    for (std::size_t k = 0; k < w.size(); ++k) {
      const std::size_t end = k * 8160 + 72000;
      EXPECT_LE(end, n);
      EXPECT_EQ(w[k].audio_offset, end - 24000);
      EXPECT_EQ(w[k].audio_len, 24000u);
      EXPECT_DOUBLE_EQ(w[k].t_end, end / 48000.0);
    }
  }
  EXPECT_TRUE(window_dataset(make_session(1.4, false)).empty());
}

TEST(WindowDataset, AudioIsTrailingSlice) {
  const auto w = window_dataset(make_session(3.0, false));
  const auto a = w[2].audio();
  ASSERT_EQ(a.size(), 8u);
  for (int c = 0; c < 8; ++c) {
    EXPECT_EQ(a[c].front(), static_cast<float>(c * 1000000 + 2 * 8160 + 48000));
    EXPECT_EQ(a[c].back(), static_cast<float>(c * 1000000 + 2 * 8160 + 71999));
  }
}

TEST(WindowDataset, NegativeSessionKeepsAllUnlabeled) {
  const auto w = window_dataset(make_session(5.0, false));
  EXPECT_EQ(w.size(), window_count(240000, {}));
  for (const auto& x : w) {
    EXPECT_FALSE(x.is_siren);
    EXPECT_TRUE(std::isnan(x.theta));
    EXPECT_TRUE(std::isnan(x.distance));
  }
}

TEST(WindowDataset, CutoffAtWindowEnd) {
  EXPECT_TRUE(window_dataset(make_session(4.0, true, line_track({120, 0}, {0, 0}, 0, 4.0))).empty());
  EXPECT_EQ(window_dataset(make_session(4.0, true, line_track({80, 0}, {0, 0}, 0, 4.0))).size(),
            window_count(192000, {}));
  // receding EV crosses 100 m mid-session
  const auto ev = line_track({60, 0}, {10, 0}, 0, 8.0);
  const auto s = make_session(8.0, true, ev);
  const auto w = window_dataset(s);
  std::size_t expected = 0;
  for (std::size_t k = 0; k < window_count(s->audio[0].size(), {}); ++k) {
    const double t = (k * 8160 + 72000) / 48000.0;
    if (60.0 + 10.0 * t <= 100.0) ++expected;
  }
  EXPECT_EQ(w.size(), expected);
  for (const auto& x : w) {
    EXPECT_LE(x.distance, 100.0);
    EXPECT_NEAR(x.distance, 60.0 + 10.0 * x.t_end, 1e-9);
  }
}

TEST(WindowDataset, BearingRoundTrip) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ang(-kPi, kPi), d(2.0, 90.0);
  for (int i = 0; i < 50; ++i) {
    const double beta = ang(rng), r = d(rng), h = ang(rng);
    const Vec2 ev{r * std::cos(h + beta), r * std::sin(h + beta)};
    const auto w = window_dataset(make_session(2.0, true, line_track(ev, {0, 0}, 0, 2.0),
                                               line_track({0, 0}, {0, 0}, h, 2.0)));
    ASSERT_FALSE(w.empty());
    EXPECT_NEAR(std::remainder(w[0].theta - beta, 2.0 * kPi), 0.0, 1e-9);
    EXPECT_NEAR(w[0].distance, r, 1e-9);
  }
}

TEST(BalanceDirections, IdentityAtFullKeep) {
  const auto w = window_dataset(make_session(4.0, true, line_track({30, 0}, {0, 0}, 0, 4.0)));
  const auto b = balance_directions(w, rad(15.0), 1.0, 1);
  ASSERT_EQ(b.size(), w.size());
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(b[i].t_end, w[i].t_end);
}

TEST(BalanceDirections, ZeroKeepRemovesDeadAhead) {
  auto pos = window_dataset(make_session(4.0, true, line_track({30, 0}, {0, 0}, 0, 4.0)));
  const auto neg = window_dataset(make_session(4.0, false));
  pos.insert(pos.end(), neg.begin(), neg.end());
  const auto b = balance_directions(pos, rad(15.0), 0.0, 1);
  EXPECT_EQ(b.size(), neg.size());
  for (const auto& x : b) EXPECT_FALSE(x.is_siren);
}

TEST(BalanceDirections, BinomialCountOracle) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  std::vector<LabeledWindow> w(60000);
  for (auto& x : w) {
    x.is_siren = true;
    x.theta = u(rng);
    x.distance = 10.0;
  }
  const double hw = rad(15.0);
  const auto b = balance_directions(w, hw, 0.5, 5);
  double n_sector = 0, n_side = 0, k_sector = 0, k_side = 0;
  auto sector = [&](double th) { return std::abs(th) <= hw || std::abs(std::abs(th) - kPi) <= hw; };
  for (const auto& x : w) (sector(x.theta) ? n_sector : n_side) += 1;
  for (const auto& x : b) (sector(x.theta) ? k_sector : k_side) += 1;
  EXPECT_EQ(k_side, n_side);
  EXPECT_LE(std::abs(k_sector - 0.5 * n_sector), 3.0 * std::sqrt(n_sector * 0.25));
  // per-radian density in the sectors is about half the side density
  const double sector_rad = 4.0 * hw, side_rad = 2.0 * kPi - sector_rad;
  EXPECT_NEAR((k_sector / sector_rad) / (k_side / side_rad), 0.5, 0.05);
}

TEST(BalanceDirections, DeterministicPerSeed) {
  std::vector<LabeledWindow> w(500);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i].is_siren = true;
    w[i].theta = 0.01 * static_cast<double>(i % 10);
    w[i].t_end = static_cast<double>(i);
  }
  auto ends = [](const std::vector<LabeledWindow>& v) {
    std::vector<double> e;
    for (const auto& x : v) e.push_back(x.t_end);
    return e;
  };
  EXPECT_EQ(ends(balance_directions(w, rad(15.0), 0.5, 9)), ends(balance_directions(w, rad(15.0), 0.5, 9)));
  EXPECT_NE(ends(balance_directions(w, rad(15.0), 0.5, 9)), ends(balance_directions(w, rad(15.0), 0.5, 10)));
  EXPECT_THROW(balance_directions(w, rad(15.0), 1.5, 9), InvalidInput);
}

TEST(SplitBySession, TenEqualSessions) {
  const auto s = split_by_session(tagged(std::vector<std::size_t>(10, 30)));
  EXPECT_EQ(s.tags[0].size(), 8u);
  EXPECT_EQ(s.tags[1].size(), 1u);
  EXPECT_EQ(s.tags[2].size(), 1u);
  EXPECT_NEAR(s.deviation, 0.0, 1e-12);
}

TEST(SplitBySession, UnequalSessionsMatchExhaustiveOracle) {
  const auto s = split_by_session(tagged({5, 5, 90}));
  EXPECT_EQ(s.train.size(), 90u);
  EXPECT_EQ(s.valid.size(), 5u);
  EXPECT_EQ(s.test.size(), 5u);
  EXPECT_NEAR(s.deviation, 0.2, 1e-12);
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<std::size_t> sz(1, 120), k(3, 10);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::size_t> sizes(k(rng));
    for (auto& v : sizes) v = sz(rng);
    EXPECT_NEAR(split_by_session(tagged(sizes), {8, 1, 1}, trial).deviation, brute_force_deviation(sizes), 1e-12);
  }
}

TEST(SplitBySession, RejectsFewerThanThreeTags) {
  EXPECT_THROW(split_by_session(tagged({10, 10})), InvalidInput);
}

TEST(SplitBySession, DisjointOverRandomCollections) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> sz(1, 200), k(3, 40);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> sizes(k(rng));
    for (auto& v : sizes) v = sz(rng);
    const auto all = tagged(sizes);
    const auto s = split_by_session(all, {8, 1, 1}, static_cast<std::uint64_t>(trial));
    std::array<std::set<std::string>, 3> seen;
    const std::vector<LabeledWindow>* parts[3] = {&s.train, &s.valid, &s.test};
    for (int p = 0; p < 3; ++p) {
      EXPECT_FALSE(parts[p]->empty());
      for (const auto& x : *parts[p]) seen[p].insert(x.session_tag);
      EXPECT_EQ(seen[p], std::set<std::string>(s.tags[p].begin(), s.tags[p].end()));
    }
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        for (const auto& t : seen[a]) EXPECT_EQ(seen[b].count(t), 0u);
      }
    }
    EXPECT_EQ(s.train.size() + s.valid.size() + s.test.size(), all.size());
    EXPECT_EQ(seen[0].size() + seen[1].size() + seen[2].size(), sizes.size());
  }
}

TEST(SplitBySession, DeterministicPerSeed) {
  std::vector<std::size_t> sizes;
  for (int i = 0; i < 25; ++i) sizes.push_back(10 + (i * 37) % 50);
  EXPECT_EQ(split_by_session(tagged(sizes), {8, 1, 1}, 4).tags, split_by_session(tagged(sizes), {8, 1, 1}, 4).tags);
}

TEST(LabelRecords, RoundTrip) {
  const auto s = make_session(6.0, true, line_track({20, 5}, {3, -1}, 0, 6.0));
  const auto w = window_dataset(s, {}, "sess");
  const auto path = std::filesystem::temp_directory_path() / "sirenloc_labels_test.txt";
  write_labels(path, w);
  const auto records = read_labels(path);
  ASSERT_EQ(records.size(), w.size());
  const auto back = windows_from_records(s, records, 24000, "sess");
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_EQ(back[i].audio_offset, w[i].audio_offset);
    EXPECT_EQ(back[i].is_siren, w[i].is_siren);
    EXPECT_EQ(back[i].session_tag, w[i].session_tag);
    EXPECT_NEAR(back[i].t_end, w[i].t_end, 1e-6);
    EXPECT_NEAR(back[i].theta, w[i].theta, 1e-9);
    EXPECT_NEAR(back[i].distance, w[i].distance, 1e-6);
    EXPECT_EQ(back[i].audio(), w[i].audio());
  }
  std::filesystem::remove(path);
}

TEST(LabelRecords, MalformedLineRejected) {
  const auto path = std::filesystem::temp_directory_path() / "sirenloc_labels_bad.txt";
  {
    std::ofstream os(path);
    os << "day1 1.5 1 0.3\n";
  }
  EXPECT_THROW(read_labels(path), InvalidInput);
  std::filesystem::remove(path);
}
