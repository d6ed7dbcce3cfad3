// Acceptance run: one PASS/FAIL line per criterion. Optional arguments select
// criteria by number, e.g. `acceptance 1 2 7`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sirenloc/pipeline.hpp"
#include "test_util.hpp"

using namespace sirenloc;
using namespace sirenloc::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome dsp_oracle() {
  const auto t0 = Clock::now();
  const dsp::FeatureParams p;
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> len(1200, 4800);
  std::uniform_real_distribution<double> scale(-4.0, 2.0);
  std::normal_distribution<double> g;
  double worst_mel = 0.0, worst_mfcc = 0.0;
  const int inputs = 100;
  for (int i = 0; i < inputs; ++i) {
    std::vector<double> x(static_cast<std::size_t>(len(rng)));
    const double s = std::pow(10.0, scale(rng));
    for (auto& v : x) v = s * g(rng);
    const auto lm = dsp::log_mel(x, p);
    const auto oracle = log_mel_oracle(x, p);
    worst_mel = std::max(worst_mel, max_rel_err(lm, oracle));
    worst_mfcc = std::max(worst_mfcc, max_rel_err(dsp::mfcc(lm, p.n_mfcc), dct_oracle(oracle, p.n_mfcc)));
  }
  const double secs = seconds_since(t0);
  return {worst_mel < 1e-6 && worst_mfcc < 1e-6 && secs < 60.0,
          std::to_string(inputs) + " inputs, log-mel max rel err " + fmt("%.2e", worst_mel) + ", mfcc " +
              fmt("%.2e", worst_mfcc) + ", " + fmt("%.1f s", secs)};
}

Outcome filter_spec() {
  const auto t0 = Clock::now();
  const double pass = gain_db(1000.0), low = gain_db(100.0), high = gain_db(5000.0);
  const double secs = seconds_since(t0);
  return {pass > -1.0 && low <= -30.0 && high <= -30.0 && secs < 60.0,
          "1000 Hz " + fmt("%.3f dB", pass) + ", 100 Hz " + fmt("%.1f dB", low) + ", 5000 Hz " +
              fmt("%.1f dB", high)};
}

Outcome simulator_physics() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;

  // TDOA from broadband cross-correlation against geometry
  const sim::MicArrayGeometry geom;
  const auto caps = geom.capsules();
  std::vector<double> noise(kSampleRate);
  for (auto& v : noise) v = g(rng);
  const sim::SourceSignal broadband{noise, -0.5, kSampleRate};
  const int placements = 50;
  double tdoa_worst = 0.0;
  for (int trial = 0; trial < placements; ++trial) {
    const double ang = 2.0 * kPi * u(rng), dist = 5.0 + 95.0 * u(rng);
    const Vec2 s{dist * std::cos(ang), dist * std::sin(ang)};
    const auto ego = static_track({0.0, 0.0}, -0.5, 0.5);
    std::vector<std::vector<double>> ch;
    for (int c = 0; c < kNumChannels; ++c) {
      ch.push_back(sim::propagate(broadband, static_track(s, -0.5, 0.5), sim::carried_point_track(ego, caps[c]), 0.0,
                                  4800));
    }
    for (int i = 0; i < kNumChannels; ++i) {
      for (int j = i + 1; j < kNumChannels; ++j) {
        const double geo = ((s - caps[j]).norm() - (s - caps[i]).norm()) / kSpeedOfSound * kSampleRate;
        tdoa_worst = std::max(tdoa_worst, std::abs(xcorr_peak(ch[i], ch[j], 160) - geo));
      }
    }
  }

  // Doppler on a constant tone
  double doppler_worst = 0.0;
  for (double v : {-30.0, -20.0, -10.0, 10.0, 20.0, 30.0}) {
    sim::SirenProfile p;
    p.kind = sim::SirenKind::constant_tone;
    p.f_lo = p.f_hi = 1000.0;
    const double ts = -3.0;
    const auto wave = sim::synth_siren_waveform(p, 6.0, kSampleRate, ts);
    const sim::SourceSignal sig{wave, ts, kSampleRate};
    const auto y = sim::propagate(sig, moving_track({-600.0, 0.0}, {v, 0.0}, ts, 3.0),
                                  static_track({0.0, 0.0}, ts, 3.0), 0.0, 96000);
    const double expected = 1000.0 * kSpeedOfSound / (kSpeedOfSound - v);
    doppler_worst = std::max(doppler_worst, std::abs(zero_crossing_frequency(y, 0, y.size()) / expected - 1.0));
  }

  // level drop per distance doubling
  sim::SirenProfile p;
  p.kind = sim::SirenKind::constant_tone;
  p.f_lo = p.f_hi = 500.0;
  const auto tone_wave = sim::synth_siren_waveform(p, 3.0, kSampleRate, -2.0);
  const sim::SourceSignal tone_src{tone_wave, -2.0, kSampleRate};
  double doubling_worst = 0.0;
  for (double r : {2.0, 5.0, 10.0, 20.0, 45.0}) {
    const auto mic = static_track({0.0, 0.0}, -2.0, 1.0);
    const auto near = sim::propagate(tone_src, static_track({r, 0.0}, -2.0, 1.0), mic, 0.0, 24000);
    const auto far = sim::propagate(tone_src, static_track({2.0 * r, 0.0}, -2.0, 1.0), mic, 0.0, 24000);
    doubling_worst = std::max(doubling_worst, std::abs(power_db(near, 0) - power_db(far, 0) - 20.0 * std::log10(2.0)));
  }
  const double secs = seconds_since(t0);
  return {tdoa_worst <= 1.0 && doppler_worst <= 0.01 && doubling_worst <= 0.2 && secs < 300.0,
          "TDOA worst " + fmt("%.3f samples", tdoa_worst) + " over " + std::to_string(placements) +
              " placements x 28 pairs, Doppler worst " + fmt("%.3f%%", 100.0 * doppler_worst) +
              ", doubling worst " + fmt("%.4f dB", doubling_worst) + " off 6.02, " + fmt("%.1f s", secs)};
}

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  const nn::SirenNet cnn(tiny_cnn_config());
  const auto b = random_batch(cnn.config(), 4, 11);
  const auto r = check_gradients(cnn, cnn.init_params(), b.inputs, b.targets, {1.0, 1.0, 0.01});
  const auto rn = check_gradients(cnn, cnn.init_params(), b.inputs, b.targets, {1.0, 1.0, 0.01}, true);
  const nn::SirenNet att(tiny_attention_config());
  const auto ba = random_batch(att.config(), 3, 12);
  const auto ra = check_gradients(att, att.init_params(), ba.inputs, ba.targets, {1.0, 1.0, 0.01}, false, 1e-4);
  const bool all = r.checked == cnn.layout().scalar_count() && ra.checked == att.layout().scalar_count();
  const double worst = std::max({r.max_rel, rn.max_rel, ra.max_rel});
  const double secs = seconds_since(t0);
  return {all && worst < 1e-4 && secs < 300.0,
          "cnn " + std::to_string(r.checked) + " params max rel " + fmt("%.2e", std::max(r.max_rel, rn.max_rel)) +
              ", attention " + std::to_string(ra.checked) + " params max rel " + fmt("%.2e", ra.max_rel) + ", " +
              fmt("%.1f s", secs)};
}

Outcome loss_semantics() {
  const auto t0 = Clock::now();
  const nn::SirenNet net(tiny_cnn_config());
  const auto p0 = net.init_params();
  const auto neg = random_batch(net.config(), 6, 14, 0);
  const auto g = train::backward(net, p0, neg.inputs, neg.targets, {10.0, 10.0, 0.008});
  std::size_t nonzero = 0;
  for (const auto& t : g.tensors()) {
    const int h = nn::SirenNet::head_of(t.name);
    if (h != nn::SirenNet::kAngleHead && h != nn::SirenNet::kDistanceHead) continue;
    for (double v : t.values) nonzero += v != 0.0;
  }
  const auto tr = random_batch(net.config(), 12, 16), va = random_batch(net.config(), 4, 17);
  train::TrainConfig c;
  c.lr_init = 1e-2;
  c.lr_min = 1e-4;
  c.epochs = 3;
  c.batch_size = 4;
  c.weights = {1.0, 0.0, 0.0};
  const auto r = train::train_loop(net, p0, as_set(tr), as_set(va), c);
  const bool siren_moved = !head_unchanged(p0, r.best, nn::SirenNet::kSirenHead);
  const bool frozen = head_unchanged(p0, r.best, nn::SirenNet::kAngleHead) &&
                      head_unchanged(p0, r.best, nn::SirenNet::kDistanceHead);
  const double secs = seconds_since(t0);
  return {nonzero == 0 && siren_moved && frozen && secs < 120.0,
          std::to_string(nonzero) + " nonzero angle/distance head gradients on a negative batch; weights (1,0,0): " +
              (frozen ? "angle/distance heads bit-unchanged" : "angle/distance heads changed") +
              (siren_moved ? ", siren head trained" : ", siren head did not move")};
}

// ---------------------------------------------------------------------------

struct PredictionRow {
  bool is_siren;
  double theta, distance, p_siren, theta_hat, distance_hat;
};

std::vector<PredictionRow> read_predictions(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  std::vector<PredictionRow> rows;
  while (std::getline(is, line)) {
    PredictionRow r{};
    int s = 0;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf", &s, &r.theta, &r.distance, &r.p_siren, &r.theta_hat,
                    &r.distance_hat) != 6) {
      throw RuntimeFailure("bad predictions row: " + line);
    }
    r.is_siren = s != 0;
    rows.push_back(r);
  }
  return rows;
}

config::RunConfig e2e_config(const fs::path& dir) {
  config::RunConfig rc;
  rc.output_dir = dir.string();
  rc.batch.count = 40;
  rc.batch.seed = 11;
  rc.batch.duration = 26.0;
  rc.batch.snr_db = {0.0, 20.0};
  rc.train.epochs = 20;
  rc.train.lr_init = 1e-3;
  rc.train.lr_min = 1e-6;
  rc.train.batch_size = 32;
  return rc;
}

Outcome end_to_end() {
  const fs::path dir = fs::absolute("acceptance_e2e");
  fs::remove_all(dir);
  const auto rc = e2e_config(dir);
  fs::create_directories(dir);
  std::ofstream log(dir / "pipeline.log");

  pipeline::cmd_simulate(rc, log);
  const auto split = pipeline::cmd_label(rc, log);
  const auto t_train = Clock::now();
  const std::clock_t c_train = std::clock();
  const auto trained = pipeline::cmd_train(rc, std::nullopt, log);
  const double train_min = static_cast<double>(std::clock() - c_train) / CLOCKS_PER_SEC / 60.0;
  const double train_wall_min = seconds_since(t_train) / 60.0;
  pipeline::cmd_eval(rc, trained.checkpoint, log);

  const auto rows = read_predictions(pipeline::eval_dir(rc) / "predictions.csv");
  const auto data = pipeline::load_dataset(rc);
  double train_mean = 0.0;
  std::size_t train_pos = 0;
  for (const auto& w : data.parts[0]) {
    if (!w.is_siren) continue;
    train_mean += w.distance;
    ++train_pos;
  }
  train_mean /= static_cast<double>(std::max<std::size_t>(train_pos, 1));

  std::size_t correct = 0, near_n = 0, near_tp = 0, far_n = 0, far_tp = 0, pos = 0;
  double angle_sum = 0.0, dist_sum = 0.0, const_sum = 0.0;
  std::size_t angle_n = 0;
  for (const auto& r : rows) {
    const bool hit = eval::classify(r.p_siren, rc.eval.threshold);
    correct += hit == r.is_siren;
    if (!r.is_siren) continue;
    ++pos;
    dist_sum += std::abs(r.distance_hat - r.distance);
    const_sum += std::abs(train_mean - r.distance);
    if (r.distance <= 50.0) {
      angle_sum += eval::angle_abs_error(r.theta_hat, r.theta);
      ++angle_n;
    }
    if (r.distance < 20.0) {
      ++near_n;
      near_tp += hit;
    } else if (r.distance >= 80.0 && r.distance <= 100.0) {
      ++far_n;
      far_tp += hit;
    }
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(rows.size());
  const double near_recall = near_n ? static_cast<double>(near_tp) / near_n : std::nan("");
  const double far_recall = far_n ? static_cast<double>(far_tp) / far_n : std::nan("");
  const double angle_mae = angle_n ? angle_sum / angle_n : std::nan("");
  const double dist_mae = dist_sum / static_cast<double>(pos);
  const double const_mae = const_sum / static_cast<double>(pos);
  const double improvement = 1.0 - dist_mae / const_mae;

  const std::size_t windows = split.train.size() + split.valid.size() + split.test.size();
  log.flush();
  std::size_t generated = 0;
  {
    std::ifstream is(dir / "pipeline.log");
    std::string line;
    while (std::getline(is, line)) {
      if (std::sscanf(line.c_str(), "windows: %zu generated", &generated) == 1) break;
    }
  }
  const bool ok = acc >= 0.95 && near_n > 0 && far_n > 0 && near_recall >= far_recall && angle_mae <= 30.0 &&
                  improvement >= 0.25 && train_min <= 30.0;
  std::string d = std::to_string(rc.batch.count) + " sessions, " + std::to_string(generated) + " windows generated, " +
                  std::to_string(windows) + " after balancing (" +
                  std::to_string(rows.size()) + " test); accuracy " + fmt("%.4f", acc) + "; recall 0-20 m " +
                  fmt("%.4f", near_recall) + " (n=" + std::to_string(near_n) + ") vs 80-100 m " +
                  fmt("%.4f", far_recall) + " (n=" + std::to_string(far_n) + "); angle MAE <=50 m " +
                  fmt("%.2f deg", angle_mae) + "; distance MAE " + fmt("%.2f m", dist_mae) + " vs train-mean " +
                  fmt("%.2f m", const_mae) + " (" + fmt("%.1f%% better", 100.0 * improvement) + "); training " +
                  fmt("%.1f min CPU", train_min) + fmt(" (%.1f min wall)", train_wall_min);
  return {ok, d};
}

// ---------------------------------------------------------------------------

Outcome angle_error_suite() {
  using eval::angle_abs_error;
  bool ok = angle_abs_error(0.7, 0.7) == 0.0;
  ok &= std::abs(angle_abs_error(rad(-10.0), rad(10.0)) - 20.0) < 1e-12;
  ok &= std::abs(angle_abs_error(3.0, -3.0) - deg(2.0 * kPi - 6.0)) < 1e-12;
  ok &= std::abs(angle_abs_error(3.0, -3.0) - 16.23) < 0.005;
  std::mt19937_64 rng(707);
  std::uniform_real_distribution<double> a(-kPi, kPi);
  std::size_t bad = 0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    const double x = a(rng), y = a(rng);
    const double e = angle_abs_error(x, y);
    bad += !(e >= 0.0 && e <= 180.0) || e != angle_abs_error(y, x) || angle_abs_error(x, x) != 0.0 ||
           std::abs(angle_abs_error(x + 2.0 * kPi, y) - e) > 1e-9 || std::abs(angle_abs_error(x, y - 2.0 * kPi) - e) > 1e-9;
  }
  return {ok && bad == 0, std::string("closed-form cases ") + (ok ? "exact" : "wrong") + ", " + std::to_string(bad) +
                              " symmetry/bound/wrap violations over " + std::to_string(trials) + " random pairs"};
}

Outcome latency() {
  const nn::ModelConfig cfg;
  const nn::SirenNet net(cfg);
  const auto params = net.init_params();
  const dsp::Featurizer featurizer(dsp::FilterSpec{}, cfg.features);
  std::mt19937_64 rng(808);
  std::normal_distribution<double> g(0.0, 0.1);
  std::vector<std::vector<double>> window(cfg.in_channels, std::vector<double>(cfg.input_len));
  for (auto& ch : window) {
    for (auto& v : ch) v = g(rng);
  }
  double sink = 0.0;
  const auto s = eval::measure_latency(
      [&] {
        const auto pred = pipeline::prediction_of(net.forward(params, nn::make_input(featurizer(window))));
        sink += pred.p_siren;
      },
      100, 10);
  return {s.median_ms < 50.0 && std::isfinite(sink),
          "median " + fmt("%.2f ms", s.median_ms) + ", p95 " + fmt("%.2f ms", s.p95_ms) + " over " +
              std::to_string(s.samples_ms.size()) + " runs"};
}

config::RunConfig small_run(const fs::path& dir) {
  config::RunConfig rc;
  rc.output_dir = dir.string();
  rc.batch.count = 4;
  rc.batch.seed = 3;
  rc.batch.duration = 3.0;
  rc.batch.sessions_per_tag = 1;
  rc.model.cnn = {{4, 9, 8}, {4, 9, 8}};
  rc.model.feature_convs = {{4, 3, 4}};
  rc.model.head_width = 4;
  rc.train.epochs = 2;
  rc.train.lr_init = 1e-3;
  rc.train.lr_min = 1e-6;
  rc.train.batch_size = 8;
  rc.eval.latency_runs = 3;
  return rc;
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Outcome determinism() {
  const fs::path root = fs::absolute("acceptance_determinism");
  fs::remove_all(root);
  std::ostringstream log;
  pipeline::TrainOutcome trained;
  for (const char* name : {"a", "b"}) {
    const auto rc = small_run(root / name);
    pipeline::cmd_simulate(rc, log);
    pipeline::cmd_label(rc, log);
    trained = pipeline::cmd_train(rc, std::nullopt, log);
    pipeline::cmd_eval(rc, trained.checkpoint, log);
  }
  const auto fa = files_under(root / "a"), fb = files_under(root / "b");
  std::size_t compared = 0, differing = 0;
  std::set<std::string> kinds;
  for (const auto& f : fa) {
    if (f.filename() == "summary.txt") continue;  // carries wall-clock latency
    ++compared;
    const std::string ext = f.extension().string();
    kinds.insert(f.filename() == "labels.txt" ? "labels" : ext.empty() ? f.filename().string() : ext);
    if (read_bytes(root / "a" / f) != read_bytes(root / "b" / f)) ++differing;
  }
  const bool same_set = fa == fb;
  const bool has_all = kinds.count(".wav") && kinds.count("labels") && kinds.count(".ckpt") && kinds.count(".csv");

  const auto ck = ckpt::load(trained.checkpoint);
  const bool params_exact = ck.params == trained.params && ck.config == small_run(root / "b").model;
  const fs::path copy = root / "resaved.ckpt";
  ckpt::save(copy, ck.config, ck.params);
  const bool resave_exact = read_bytes(copy) == read_bytes(trained.checkpoint);

  std::string kind_list;
  for (const auto& k : kinds) kind_list += (kind_list.empty() ? "" : " ") + k;
  return {same_set && has_all && differing == 0 && params_exact && resave_exact,
          std::to_string(differing) + " of " + std::to_string(compared) + " files differ across two runs (" +
              kind_list + "); checkpoint reload " + (params_exact ? "bit-exact" : "differs") + ", resave " +
              (resave_exact ? "byte-identical" : "differs")};
}

Outcome split_hygiene() {
  std::mt19937_64 rng(1010);
  std::uniform_int_distribution<std::size_t> sz(1, 200), k(3, 40);
  const int collections = 100;
  std::size_t shared = 0, lost = 0, empty = 0;
  for (int trial = 0; trial < collections; ++trial) {
    std::vector<label::LabeledWindow> all;
    const std::size_t groups = k(rng);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t n = sz(rng);
      for (std::size_t i = 0; i < n; ++i) {
        label::LabeledWindow w;
        w.session_tag = "day" + std::to_string(gi);
        w.t_end = static_cast<double>(i);
        all.push_back(w);
      }
    }
    const auto s = label::split_by_session(all, {8, 1, 1}, static_cast<std::uint64_t>(trial));
    std::array<std::set<std::string>, 3> seen;
    const std::vector<label::LabeledWindow>* parts[3] = {&s.train, &s.valid, &s.test};
    for (int p = 0; p < 3; ++p) {
      empty += parts[p]->empty();
      for (const auto& x : *parts[p]) seen[p].insert(x.session_tag);
    }
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        for (const auto& t : seen[a]) shared += seen[b].count(t);
      }
    }
    lost += all.size() - (s.train.size() + s.valid.size() + s.test.size());
  }
  return {shared == 0 && lost == 0 && empty == 0,
          std::to_string(shared) + " shared session tags, " + std::to_string(lost) + " lost windows, " +
              std::to_string(empty) + " empty splits over " + std::to_string(collections) + " random collections"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"dsp oracle equivalence", dsp_oracle},
      {"filter spec", filter_spec},
      {"simulator physics", simulator_physics},
      {"gradient integrity", gradient_integrity},
      {"loss semantics", loss_semantics},
      {"synthetic end-to-end", end_to_end},
      {"angle-error unit suite", angle_error_suite},
      {"latency", latency},
      {"determinism and persistence", determinism},
      {"split hygiene", split_hygiene},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
