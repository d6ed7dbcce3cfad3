#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "sirenloc/autolabel.hpp"
#include "sirenloc/checkpoint.hpp"
#include "sirenloc/config.hpp"
#include "sirenloc/core.hpp"
#include "sirenloc/dsp.hpp"
#include "sirenloc/eval.hpp"
#include "sirenloc/model.hpp"
#include "sirenloc/scene_sim.hpp"
#include "sirenloc/session_io.hpp"
#include "sirenloc/train.hpp"

namespace sirenloc::pipeline {

namespace fs = std::filesystem;
using config::json;
using config::RunConfig;

inline fs::path sessions_dir(const RunConfig& rc) { return fs::path(rc.output_dir) / "sessions"; }
inline fs::path dataset_manifest(const RunConfig& rc) { return fs::path(rc.output_dir) / "dataset.json"; }
inline fs::path model_dir(const RunConfig& rc) { return fs::path(rc.output_dir) / "model"; }
inline fs::path eval_dir(const RunConfig& rc) { return fs::path(rc.output_dir) / "eval"; }

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os << text;
  if (!os) throw RuntimeFailure("failed writing " + path.string());
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Generates every configured scene; all scenes are validated before any
/// file is written. Returns the session directory names.
inline std::vector<std::string> cmd_simulate(const RunConfig& rc, std::ostream& log) {
  const auto scenes = config::expand_scenes(rc);
  require(!scenes.empty(), "simulate: no scenes configured");
  std::set<std::string> ids;
  for (const auto& s : scenes) {
    sim::validate(s);
    require(ids.insert(io::session_dir_name(s)).second, "simulate: duplicate session " + io::session_dir_name(s));
  }
  const fs::path root = sessions_dir(rc);
  ensure_dir(root);
  const sim::MicArrayGeometry geometry;
  std::vector<std::string> out;
  for (const auto& s : scenes) {
    const auto data = sim::generate_session(s, geometry);
    const std::string id = io::session_dir_name(s);
    io::write_session(root / id, data, s);
    char line[256];
    std::snprintf(line, sizeof line, "%-40s %-18s siren=%d snr=%s clipped=%d %.1fs\n", id.c_str(),
                  io::to_string(s.scenario).c_str(), data.has_siren ? 1 : 0,
                  io::snr_to_json(s.snr_db).dump().c_str(), data.clipped ? 1 : 0, data.duration());
    log << line;
    out.push_back(id);
  }
  log << out.size() << " sessions written to " << root.string() << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Sessions and datasets on disk
// ---------------------------------------------------------------------------

struct SessionSet {
  std::vector<std::string> ids;
  std::vector<std::shared_ptr<const sim::SessionData>> data;
};

inline std::vector<std::string> list_sessions(const RunConfig& rc) {
  const fs::path root = sessions_dir(rc);
  if (!fs::is_directory(root)) throw InvalidInput("no sessions under " + root.string() + " (run simulate first)");
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) ids.push_back(e.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw InvalidInput("no sessions under " + root.string() + " (run simulate first)");
  return ids;
}

inline SessionSet load_sessions(const RunConfig& rc, const std::vector<std::string>& ids) {
  SessionSet s;
  for (const auto& id : ids) {
    auto loaded = io::read_session(sessions_dir(rc) / id);
    s.ids.push_back(id);
    s.data.push_back(std::make_shared<const sim::SessionData>(std::move(loaded.data)));
  }
  return s;
}

inline std::string split_name(int k) {
  static const char* names[3] = {"train", "valid", "test"};
  return names[k];
}

/// Angle histogram in 30 degree sectors starting at -180.
inline std::array<std::size_t, 12> angle_histogram(const std::vector<label::LabeledWindow>& w) {
  std::array<std::size_t, 12> h{};
  for (const auto& s : w) {
    if (!s.is_siren) continue;
    const int b = static_cast<int>(std::floor((deg(s.theta) + 180.0) / 30.0));
    ++h[std::clamp(b, 0, 11)];
  }
  return h;
}

// ---------------------------------------------------------------------------
// label
// ---------------------------------------------------------------------------

/// Windows every session, balances directions, splits by session tag and
/// writes labels.txt per session plus dataset.json.
inline label::DatasetSplit cmd_label(const RunConfig& rc, std::ostream& log) {
  const auto ids = list_sessions(rc);
  const auto sessions = load_sessions(rc, ids);
  std::vector<label::LabeledWindow> all;
  std::size_t raw = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto windows = label::window_dataset(sessions.data[i], rc.label.windows, ids[i]);
    raw += windows.size();
    const auto& b = rc.label.balance;
    std::uint64_t seed = b.seed;
    for (char c : ids[i]) seed = seed * 131 + static_cast<unsigned char>(c);
    windows = label::balance_directions(windows, rad(b.sector_halfwidth_deg), b.keep_ratio, seed);
    label::write_labels(sessions_dir(rc) / ids[i] / "labels.txt", windows);
    all.insert(all.end(), windows.begin(), windows.end());
  }
  auto split = label::split_by_session(all, rc.label.split.ratio, rc.label.split.seed);

  json manifest;
  manifest["sessions"] = ids;
  manifest["windows"] = {{"window_len", rc.label.windows.window_len},
                         {"stride", rc.label.windows.stride},
                         {"input_len", rc.label.windows.input_len},
                         {"cutoff_m", rc.label.windows.cutoff_m}};
  manifest["deviation"] = split.deviation;
  const std::vector<label::LabeledWindow>* parts[3] = {&split.train, &split.valid, &split.test};
  for (int k = 0; k < 3; ++k) {
    std::size_t pos = 0;
    for (const auto& w : *parts[k]) pos += w.is_siren ? 1 : 0;
    manifest["splits"][split_name(k)] = {
        {"tags", split.tags[k]}, {"windows", parts[k]->size()}, {"positives", pos}};
  }
  write_text(dataset_manifest(rc), manifest.dump(2) + "\n");

  if (rc.label.dump_features) {
    const fs::path dir = fs::path(rc.output_dir) / "features";
    ensure_dir(dir);
    const dsp::Featurizer featurizer(rc.filter, rc.model.features);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      dsp::ArrayFile stack;
      std::size_t n = 0;
      for (const auto& w : all) {
        if (w.session_id != ids[i]) continue;
        const auto a = dsp::pack_features(featurizer(w.audio()).features);
        if (stack.dims.empty()) stack.dims = a.dims;
        stack.values.insert(stack.values.end(), a.values.begin(), a.values.end());
        ++n;
      }
      if (n == 0) continue;
      stack.dims.insert(stack.dims.begin(), n);
      dsp::write_array_file((dir / (ids[i] + ".slf")).string(), stack);
    }
  }

  log << "windows: " << raw << " generated, " << all.size() << " kept after balancing\n";
  for (int k = 0; k < 3; ++k) {
    std::size_t pos = 0;
    for (const auto& w : *parts[k]) pos += w.is_siren ? 1 : 0;
    log << split_name(k) << ": " << parts[k]->size() << " windows (" << pos << " siren, "
        << parts[k]->size() - pos << " background) from " << split.tags[k].size() << " tags\n";
  }
  log << "angle histogram (30 deg sectors from -180):";
  for (auto c : angle_histogram(all)) log << " " << c;
  log << "\n";
  return split;
}

/// Labeled windows of each split, reloaded from disk.
struct Dataset {
  SessionSet sessions;
  std::array<std::vector<label::LabeledWindow>, 3> parts;
  label::WindowParams windows;
};

inline Dataset load_dataset(const RunConfig& rc) {
  std::ifstream is(dataset_manifest(rc));
  if (!is) throw InvalidInput("missing " + dataset_manifest(rc).string() + " (run label first)");
  const json m = json::parse(is);
  Dataset d;
  const auto& w = m.at("windows");
  d.windows.window_len = w.at("window_len").get<double>();
  d.windows.stride = w.at("stride").get<double>();
  d.windows.input_len = w.at("input_len").get<double>();
  d.windows.cutoff_m = w.at("cutoff_m").get<double>();
  std::map<std::string, int> where;
  for (int k = 0; k < 3; ++k) {
    for (const auto& t : m.at("splits").at(split_name(k)).at("tags")) where[t.get<std::string>()] = k;
  }
  d.sessions = load_sessions(rc, m.at("sessions").get<std::vector<std::string>>());
  for (std::size_t i = 0; i < d.sessions.ids.size(); ++i) {
    const auto records = label::read_labels(sessions_dir(rc) / d.sessions.ids[i] / "labels.txt");
    for (auto& win : label::windows_from_records(d.sessions.data[i], records, label::to_samples(d.windows.input_len),
                                                     d.sessions.ids[i])) {
      const auto it = where.find(win.session_tag);
      if (it == where.end()) throw InvalidInput("session tag " + win.session_tag + " missing from dataset.json");
      d.parts[it->second].push_back(std::move(win));
    }
  }
  return d;
}

inline train::Target target_of(const label::LabeledWindow& w) {
  return w.is_siren ? train::Target{true, w.theta, w.distance} : train::Target{false, 0.0, 0.0};
}

inline eval::Truth truth_of(const label::LabeledWindow& w) {
  return w.is_siren ? eval::Truth{true, w.theta, w.distance} : eval::Truth{false, 0.0, 0.0};
}

/// Checks that windows of this dataset produce inputs the model accepts.
inline void check_compatible(const nn::ModelConfig& m, const label::WindowParams& w) {
  const auto n = label::to_samples(w.input_len);
  if (static_cast<std::size_t>(m.input_len) != n) {
    throw InvalidInput("model expects " + std::to_string(m.input_len) + " input samples but windows carry " +
                       std::to_string(n));
  }
  if (m.in_channels != kNumChannels) throw InvalidInput("model expects " + std::to_string(m.in_channels) + " channels");
}

/// Model inputs for a list of windows. Spectral features are computed once
/// and kept; the band-passed waveform is recomputed on demand.
class InputCache {
 public:
  InputCache(const dsp::FilterSpec& filter, const nn::ModelConfig& model, std::vector<label::LabeledWindow> windows)
      : featurizer_(filter, model.features), windows_(std::move(windows)), features_(windows_.size()) {}

  std::size_t size() const { return windows_.size(); }
  const std::vector<label::LabeledWindow>& windows() const { return windows_; }

  nn::ModelInput operator()(std::size_t i) {
    const auto audio = windows_[i].audio();
    nn::ModelInput in;
    in.waveform.resize(static_cast<Eigen::Index>(audio.size()), static_cast<Eigen::Index>(audio[0].size()));
    if (features_[i].size() == 0) {
      const auto fw = featurizer_(audio);
      features_[i] = nn::arrange_features(fw.features);
      for (std::size_t c = 0; c < audio.size(); ++c) {
        for (std::size_t k = 0; k < audio[c].size(); ++k) in.waveform(c, k) = fw.waveform[c][k];
      }
    } else {
      const auto f = featurizer_.filter_channels(audio);
      for (std::size_t c = 0; c < audio.size(); ++c) {
        for (std::size_t k = 0; k < f[c].size(); ++k) in.waveform(c, k) = f[c][k];
      }
    }
    in.features = features_[i];
    return in;
  }

  train::SampleSet sample_set() {
    train::SampleSet s;
    s.input = [this](std::size_t i) { return (*this)(i); };
    for (const auto& w : windows_) s.targets.push_back(target_of(w));
    return s;
  }

 private:
  dsp::Featurizer featurizer_;
  std::vector<label::LabeledWindow> windows_;
  std::vector<nn::Mat> features_;
};

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline std::string na_or(double v, bool available) {
  if (!available || !std::isfinite(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline const char* kHistoryHeader =
    "stage,epoch,lr,train_loss,train_siren,train_angle,train_distance,valid_loss,valid_siren,valid_angle,"
    "valid_distance,valid_accuracy,valid_angle_mae_deg,valid_distance_mae_m";

/// One history row; metrics of tasks with zero weight are reported as NA.
inline std::string history_row(const std::string& stage, const train::EpochRecord& r, const train::LossWeights& w) {
  const bool s = w.siren > 0.0, a = w.angle > 0.0, d = w.distance > 0.0;
  std::string row = stage + "," + std::to_string(r.epoch) + "," + na_or(r.lr, true);
  for (const auto* l : {&r.train, &r.valid}) {
    row += "," + na_or(l->total, true) + "," + na_or(l->siren, s) + "," + na_or(l->angle, a) + "," +
           na_or(l->distance, d);
  }
  row += "," + na_or(r.valid_accuracy, s) + "," + na_or(r.valid_angle_mae_deg, a) + "," +
         na_or(r.valid_distance_mae_m, d);
  return row;
}

struct TrainOutcome {
  nn::Params params;
  train::TrainResult main, fine_tune;
  fs::path checkpoint;
};

/// Trains per the configuration (optionally starting from a checkpoint) and
/// writes model/best.ckpt and model/history.csv.
inline TrainOutcome cmd_train(const RunConfig& rc, const std::optional<fs::path>& resume, std::ostream& log) {
  const Dataset data = load_dataset(rc);
  check_compatible(rc.model, data.windows);
  require(!data.parts[0].empty() && !data.parts[1].empty(), "train: empty train or valid split");
  const nn::SirenNet net(rc.model);
  nn::Params init;
  if (resume) {
    auto ck = ckpt::load(*resume);
    if (!(ck.config == rc.model)) throw InvalidInput("checkpoint model configuration differs from config");
    init = std::move(ck.params);
  } else {
    init = net.init_params();
  }
  InputCache train_inputs(rc.filter, rc.model, data.parts[0]);
  InputCache valid_inputs(rc.filter, rc.model, data.parts[1]);
  const auto train_set = train_inputs.sample_set();
  const auto valid_set = valid_inputs.sample_set();

  ensure_dir(model_dir(rc));
  std::string history = std::string(kHistoryHeader) + "\n";
  const fs::path history_path = model_dir(rc) / "history.csv";
  auto report = [&](const std::string& stage, const train::LossWeights& w) {
    return [&, stage, w](const train::EpochRecord& r) {
      history += history_row(stage, r, w) + "\n";
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s epoch %d lr %.3g train %.5f valid %.5f acc %.4f angle %.2f deg dist %.2f m\n",
                    stage.c_str(), r.epoch, r.lr, r.train.total, r.valid.total, r.valid_accuracy,
                    r.valid_angle_mae_deg, r.valid_distance_mae_m);
      log << buf << std::flush;
    };
  };

  TrainOutcome out;
  try {
    out.main = train::train_loop(net, init, train_set, valid_set, rc.train, report("main", rc.train.weights));
    out.params = out.main.best;
    if (rc.fine_tune.epochs > 0) {
      train::TrainConfig ft = rc.train;
      ft.epochs = rc.fine_tune.epochs;
      ft.weights = rc.fine_tune.weights;
      ft.lr_init = rc.fine_tune.lr;
      ft.lr_min = std::min(ft.lr_min, ft.lr_init);
      out.fine_tune = train::fine_tune_heads(net, out.params, train_set, valid_set, ft,
                                             report("fine_tune", rc.fine_tune.weights));
      out.params = out.fine_tune.best;
    }
  } catch (const train::DivergenceError&) {
    write_text(history_path, history);
    throw;
  }
  write_text(history_path, history);
  out.checkpoint = model_dir(rc) / "best.ckpt";
  ckpt::save(out.checkpoint, rc.model, out.params);
  log << "best epoch " << out.main.best_epoch << ", checkpoint " << out.checkpoint.string() << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline eval::Prediction prediction_of(const nn::ModelOutput& o) {
  return {o.p_siren, o.theta_hat, train::reported_distance(o.distance)};
}

struct EvalReport {
  eval::MetricsTable table;
  eval::SummaryStats summary;
};

/// Writes metrics.csv, summary.txt, predictions.csv and per-bin box
/// statistics (CSV and SVG) for a set of predictions.
inline EvalReport write_eval_report(const fs::path& dir, const std::vector<eval::Prediction>& preds,
                                    const std::vector<eval::Truth>& truths, const config::EvalConfig& cfg,
                                    std::optional<eval::LatencyStats> latency = std::nullopt) {
  ensure_dir(dir);
  EvalReport r;
  r.table = eval::binned_metrics(preds, truths, cfg.threshold);
  r.summary = eval::summary_stats(preds, truths, cfg.range_m[0], cfg.range_m[1], cfg.threshold);
  if (latency) {
    r.summary.latency_median_ms = latency->median_ms;
    r.summary.latency_p95_ms = latency->p95_ms;
  }
  write_text(dir / "metrics.csv", eval::format_metrics_csv(r.table));
  write_text(dir / "summary.txt", eval::format_summary(r.summary));
  std::string rows = "is_siren,theta,distance,p_siren,theta_hat,distance_hat\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", truths[i].is_siren ? 1 : 0, truths[i].theta,
                  truths[i].distance, preds[i].p_siren, preds[i].theta_hat, preds[i].distance);
    rows += buf;
  }
  write_text(dir / "predictions.csv", rows);
  const auto dist = eval::error_distributions(preds, truths);
  write_text(dir / "angle_box.csv", eval::format_box_csv(dist.angle));
  write_text(dir / "distance_box.csv", eval::format_box_csv(dist.distance));
  write_text(dir / "angle_box.svg", eval::box_plot_svg(dist.angle, "angle abs error", "deg"));
  write_text(dir / "distance_box.svg", eval::box_plot_svg(dist.distance, "distance abs error", "m"));
  return r;
}

/// Evaluates a checkpoint on the test split.
inline EvalReport cmd_eval(const RunConfig& rc, const fs::path& checkpoint, std::ostream& log) {
  const auto ck = ckpt::load(checkpoint);
  const Dataset data = load_dataset(rc);
  check_compatible(ck.config, data.windows);
  require(!data.parts[2].empty(), "eval: empty test split");
  const nn::SirenNet net(ck.config);
  InputCache inputs(rc.filter, ck.config, data.parts[2]);
  std::vector<eval::Prediction> preds;
  std::vector<eval::Truth> truths;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    preds.push_back(prediction_of(net.forward(ck.params, inputs(i))));
    truths.push_back(truth_of(inputs.windows()[i]));
  }
  const dsp::Featurizer featurizer(rc.filter, ck.config.features);
  const auto probe = inputs.windows().front().audio();
  const auto latency = eval::measure_latency(
      [&] { (void)net.forward(ck.params, nn::make_input(featurizer(probe))); }, rc.eval.latency_runs);
  auto report = write_eval_report(eval_dir(rc), preds, truths, rc.eval, latency);
  log << eval::format_metrics_csv(report.table) << eval::format_summary(report.summary);
  return report;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

struct Detection {
  double t = 0.0;
  double p_siren = 0.0;
  double theta_deg = 0.0;
  double distance_m = 0.0;
  double latency_ms = 0.0;
};

inline std::string format_detection(const Detection& d) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.3f %.6f %.3f %.3f %.3f", d.t, d.p_siren, d.theta_deg, d.distance_m,
                d.latency_ms);
  return buf;
}

/// Number of ticks for a recording of n samples.
inline std::size_t tick_count(std::size_t n, std::size_t first_end, std::size_t stride) {
  return n < first_end ? 0 : (n - first_end) / stride + 1;
}

/// Streams over a recording: the first tick is at `first_end` samples, then
/// every `stride` samples. Each tick sees only the trailing input_len
/// samples before it.
inline std::vector<Detection> infer_stream(const nn::SirenNet& net, const nn::Params& params,
                                           const dsp::FilterSpec& filter, const sim::AudioBuffer& audio,
                                           std::size_t first_end, std::size_t stride,
                                           const std::function<void(const Detection&)>& sink = {}) {
  require(stride > 0, "infer: stride must be positive");
  const auto& cfg = net.config();
  require(audio.size() == static_cast<std::size_t>(cfg.in_channels), "infer: channel count mismatch");
  const std::size_t in_len = static_cast<std::size_t>(cfg.input_len);
  require(first_end >= in_len, "infer: first tick earlier than one input length");
  const dsp::Featurizer featurizer(filter, cfg.features);
  const std::size_t n = audio.front().size();
  std::vector<Detection> out;
  std::vector<std::vector<double>> slice(audio.size(), std::vector<double>(in_len));
  for (std::size_t k = 0; k < tick_count(n, first_end, stride); ++k) {
    const std::size_t end = first_end + k * stride;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t c = 0; c < audio.size(); ++c) {
      std::copy(audio[c].begin() + static_cast<std::ptrdiff_t>(end - in_len),
                audio[c].begin() + static_cast<std::ptrdiff_t>(end), slice[c].begin());
    }
    const auto o = net.forward(params, nn::make_input(featurizer(slice)));
    const auto t1 = std::chrono::steady_clock::now();
    Detection d{static_cast<double>(end) / kSampleRate, o.p_siren, deg(o.theta_hat),
                train::reported_distance(o.distance), std::chrono::duration<double, std::milli>(t1 - t0).count()};
    if (sink) sink(d);
    out.push_back(d);
  }
  return out;
}

/// Runs the checkpoint over a WAV file or a session directory.
inline std::vector<Detection> cmd_infer(const RunConfig& rc, const fs::path& checkpoint, const fs::path& input,
                                        double stride_s, std::ostream& records) {
  const auto ck = ckpt::load(checkpoint);
  const fs::path wav_path = fs::is_directory(input) ? input / "audio.wav" : input;
  auto wav = io::read_wav(wav_path);
  if (wav.sample_rate != kSampleRate || wav.channels.size() != kNumChannels) {
    throw InvalidInput(wav_path.string() + ": expected 8 channels at 48 kHz, got " +
                       std::to_string(wav.channels.size()) + " at " + std::to_string(wav.sample_rate) + " Hz");
  }
  require(stride_s > 0.0, "infer: stride must be positive");
  const nn::SirenNet net(ck.config);
  return infer_stream(net, ck.params, rc.filter, wav.channels, label::to_samples(rc.label.windows.window_len),
                      label::to_samples(stride_s), [&](const Detection& d) {
                        records << format_detection(d) << "\n" << std::flush;
                      });
}

}  // namespace sirenloc::pipeline
