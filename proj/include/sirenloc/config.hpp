#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sirenloc/autolabel.hpp"
#include "sirenloc/core.hpp"
#include "sirenloc/dsp.hpp"
#include "sirenloc/model.hpp"
#include "sirenloc/scene_sim.hpp"
#include "sirenloc/session_io.hpp"
#include "sirenloc/train.hpp"

namespace sirenloc::config {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Expands into `count` scenes cycling through `scenarios`, with seeds,
/// SNRs, speeds and siren patterns drawn from `seed`. Each scene gets its
/// own session tag (one simulated collection day per session).
struct SceneBatch {
  int count = 0;
  std::uint64_t seed = 1;
  std::vector<sim::Scenario> scenarios{sim::Scenario::intersection, sim::Scenario::opposite_parallel,
                                       sim::Scenario::same_direction, sim::Scenario::negative_only};
  double duration = 20.0;
  std::array<double, 2> snr_db{0.0, 20.0};
  std::string tag_prefix = "day";
  int sessions_per_tag = 4;  // consecutive sessions sharing one collection-day tag

  friend bool operator==(const SceneBatch&, const SceneBatch&) = default;
};

struct BalanceConfig {
  double sector_halfwidth_deg = 15.0;
  double keep_ratio = 0.5;
  std::uint64_t seed = 0;
  friend bool operator==(const BalanceConfig&, const BalanceConfig&) = default;
};

struct SplitConfig {
  std::array<double, 3> ratio{8, 1, 1};
  std::uint64_t seed = 0;
  friend bool operator==(const SplitConfig&, const SplitConfig&) = default;
};

struct LabelConfig {
  label::WindowParams windows{};
  BalanceConfig balance{};
  SplitConfig split{};
  bool dump_features = false;
  friend bool operator==(const LabelConfig&, const LabelConfig&) = default;
};

struct FineTuneConfig {
  int epochs = 0;
  train::LossWeights weights{};
  double lr = 1e-5;
  friend bool operator==(const FineTuneConfig&, const FineTuneConfig&) = default;
};

struct EvalConfig {
  double threshold = 0.5;
  std::array<double, 2> range_m{10.0, 50.0};
  int latency_runs = 100;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct RunConfig {
  std::string output_dir = "run";
  std::vector<sim::SceneConfig> scenes;
  SceneBatch batch{};
  LabelConfig label{};
  dsp::FilterSpec filter{};
  nn::ModelConfig model{};
  train::TrainConfig train{};
  FineTuneConfig fine_tune{};
  EvalConfig eval{};

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Explicit scenes followed by the batch expansion.
inline std::vector<sim::SceneConfig> expand_scenes(const RunConfig& rc) {
  std::vector<sim::SceneConfig> out = rc.scenes;
  const SceneBatch& b = rc.batch;
  if (b.count <= 0) return out;
  require(!b.scenarios.empty(), "scene batch: no scenarios");
  require(b.sessions_per_tag >= 1, "scene batch: sessions_per_tag must be at least 1");
  std::mt19937_64 rng(b.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const sim::SirenKind kinds[3] = {sim::SirenKind::wail, sim::SirenKind::yelp, sim::SirenKind::hi_lo};
  for (int i = 0; i < b.count; ++i) {
    sim::SceneConfig s;
    s.scenario = b.scenarios[static_cast<std::size_t>(i) % b.scenarios.size()];
    s.seed = b.seed * 1000 + static_cast<std::uint64_t>(i);
    s.duration = b.duration;
    s.snr_db = b.snr_db[0] + (b.snr_db[1] - b.snr_db[0]) * u(rng);
    s.ego_speed = 4.0 + 8.0 * u(rng);
    s.ev_speed = 8.0 + 10.0 * u(rng);
    if (s.scenario == sim::Scenario::same_direction) s.ev_speed = s.ego_speed + 8.0 + 6.0 * u(rng);
    s.siren.kind = kinds[static_cast<std::size_t>(u(rng) * 3.0) % 3];
    s.siren.f_lo = 600.0 + 150.0 * u(rng);
    s.siren.f_hi = 1300.0 + 300.0 * u(rng);
    s.siren.sweep_period = s.siren.kind == sim::SirenKind::wail ? 3.0 + 2.0 * u(rng) : 0.3 + 0.5 * u(rng);
    s.siren.amplitude = 0.8;
    char tag[64];
    std::snprintf(tag, sizeof tag, "%s%03d", b.tag_prefix.c_str(), i / b.sessions_per_tag);
    s.session_tag = tag;
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON mapping. Unknown keys are rejected; missing keys keep their defaults.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    require(ok.count(key) > 0, where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline json conv_list(const std::vector<nn::ConvSpec>& v) {
  json a = json::array();
  for (const auto& c : v) a.push_back({{"channels", c.channels}, {"kernel", c.kernel}, {"stride", c.stride}});
  return a;
}

inline std::vector<nn::ConvSpec> conv_list_from(const json& a, const std::string& where) {
  require(a.is_array(), where + ": expected an array");
  std::vector<nn::ConvSpec> out;
  for (const auto& c : a) {
    check_keys(c, {"channels", "kernel", "stride"}, where);
    nn::ConvSpec s;
    read(c, "channels", s.channels);
    read(c, "kernel", s.kernel);
    read(c, "stride", s.stride);
    out.push_back(s);
  }
  return out;
}

}  // namespace detail

inline json to_json(const sim::SirenProfile& p) {
  return {{"kind", io::to_string(p.kind)}, {"f_lo", p.f_lo}, {"f_hi", p.f_hi},
          {"sweep_period", p.sweep_period}, {"amplitude", p.amplitude}};
}

inline sim::SirenProfile siren_from_json(const json& j) {
  detail::check_keys(j, {"kind", "f_lo", "f_hi", "sweep_period", "amplitude"}, "siren");
  sim::SirenProfile p;
  if (j.contains("kind")) p.kind = io::siren_kind_from_string(j.at("kind").get<std::string>());
  detail::read(j, "f_lo", p.f_lo);
  detail::read(j, "f_hi", p.f_hi);
  detail::read(j, "sweep_period", p.sweep_period);
  detail::read(j, "amplitude", p.amplitude);
  return p;
}

inline json to_json(const sim::SceneConfig& s) {
  return {{"scenario", io::to_string(s.scenario)}, {"seed", s.seed},          {"duration", s.duration},
          {"snr_db", io::snr_to_json(s.snr_db)},    {"ego_speed", s.ego_speed}, {"ev_speed", s.ev_speed},
          {"siren", to_json(s.siren)},               {"session_tag", s.session_tag}};
}

inline sim::SceneConfig scene_from_json(const json& j) {
  detail::check_keys(j, {"scenario", "seed", "duration", "snr_db", "ego_speed", "ev_speed", "siren", "session_tag"},
                     "scene");
  sim::SceneConfig s;
  if (j.contains("scenario")) s.scenario = io::scenario_from_string(j.at("scenario").get<std::string>());
  detail::read(j, "seed", s.seed);
  detail::read(j, "duration", s.duration);
  if (j.contains("snr_db")) s.snr_db = io::snr_from_json(j.at("snr_db"));
  detail::read(j, "ego_speed", s.ego_speed);
  detail::read(j, "ev_speed", s.ev_speed);
  if (j.contains("siren")) s.siren = siren_from_json(j.at("siren"));
  detail::read(j, "session_tag", s.session_tag);
  return s;
}

inline json to_json(const dsp::FeatureParams& f) {
  return {{"frame_len", f.frame_len}, {"hop", f.hop},   {"n_fft", f.n_fft}, {"n_mels", f.n_mels},
          {"n_mfcc", f.n_mfcc},       {"fmin", f.fmin}, {"fmax", f.fmax},   {"log_floor", f.log_floor}};
}

inline dsp::FeatureParams features_from_json(const json& j) {
  detail::check_keys(j, {"frame_len", "hop", "n_fft", "n_mels", "n_mfcc", "fmin", "fmax", "log_floor"}, "features");
  dsp::FeatureParams f;
  detail::read(j, "frame_len", f.frame_len);
  detail::read(j, "hop", f.hop);
  detail::read(j, "n_fft", f.n_fft);
  detail::read(j, "n_mels", f.n_mels);
  detail::read(j, "n_mfcc", f.n_mfcc);
  detail::read(j, "fmin", f.fmin);
  detail::read(j, "fmax", f.fmax);
  detail::read(j, "log_floor", f.log_floor);
  return f;
}

inline std::string to_string(nn::WaveformStream s) { return s == nn::WaveformStream::cnn ? "cnn" : "attention"; }
inline std::string to_string(nn::PositionalMode m) {
  switch (m) {
    case nn::PositionalMode::concat: return "concat";
    case nn::PositionalMode::sum: return "sum";
    case nn::PositionalMode::none: return "none";
  }
  return "?";
}

inline json to_json(const nn::ModelConfig& m) {
  return {{"waveform_stream", to_string(m.waveform_stream)},
          {"in_channels", m.in_channels},
          {"input_len", m.input_len},
          {"input_gain", m.input_gain},
          {"cnn", detail::conv_list(m.cnn)},
          {"cnn_relu", m.cnn_relu},
          {"token_len", m.token_len},
          {"pos_enc_len", m.pos_enc_len},
          {"proj_width", m.proj_width},
          {"heads", m.heads},
          {"depth", m.depth},
          {"ff_width", m.ff_width},
          {"pos_mode", to_string(m.pos_mode)},
          {"features", to_json(m.features)},
          {"feature_convs", detail::conv_list(m.feature_convs)},
          {"feature_relu", m.feature_relu},
          {"feature_offset", m.feature_offset},
          {"feature_scale", m.feature_scale},
          {"head_width", m.head_width},
          {"distance_scale", m.distance_scale},
          {"distance_offset", m.distance_offset},
          {"init_seed", m.init_seed}};
}

inline nn::ModelConfig model_from_json(const json& j) {
  detail::check_keys(j,
                     {"waveform_stream", "in_channels", "input_len", "input_gain", "cnn", "cnn_relu", "token_len",
                      "pos_enc_len", "proj_width", "heads", "depth", "ff_width", "pos_mode", "features",
                      "feature_convs", "feature_relu", "feature_offset", "feature_scale", "head_width",
                      "distance_scale", "distance_offset", "init_seed"},
                     "model");
  nn::ModelConfig m;
  if (j.contains("waveform_stream")) {
    const auto s = j.at("waveform_stream").get<std::string>();
    require(s == "cnn" || s == "attention", "model.waveform_stream: expected cnn or attention");
    m.waveform_stream = s == "cnn" ? nn::WaveformStream::cnn : nn::WaveformStream::attention;
  }
  detail::read(j, "in_channels", m.in_channels);
  detail::read(j, "input_len", m.input_len);
  detail::read(j, "input_gain", m.input_gain);
  if (j.contains("cnn")) m.cnn = detail::conv_list_from(j.at("cnn"), "model.cnn");
  detail::read(j, "cnn_relu", m.cnn_relu);
  detail::read(j, "token_len", m.token_len);
  detail::read(j, "pos_enc_len", m.pos_enc_len);
  detail::read(j, "proj_width", m.proj_width);
  detail::read(j, "heads", m.heads);
  detail::read(j, "depth", m.depth);
  detail::read(j, "ff_width", m.ff_width);
  if (j.contains("pos_mode")) {
    const auto s = j.at("pos_mode").get<std::string>();
    if (s == "concat") m.pos_mode = nn::PositionalMode::concat;
    else if (s == "sum") m.pos_mode = nn::PositionalMode::sum;
    else if (s == "none") m.pos_mode = nn::PositionalMode::none;
    else throw InvalidInput("model.pos_mode: expected concat, sum or none");
  }
  if (j.contains("features")) m.features = features_from_json(j.at("features"));
  if (j.contains("feature_convs")) m.feature_convs = detail::conv_list_from(j.at("feature_convs"), "model.feature_convs");
  detail::read(j, "feature_relu", m.feature_relu);
  detail::read(j, "feature_offset", m.feature_offset);
  detail::read(j, "feature_scale", m.feature_scale);
  detail::read(j, "head_width", m.head_width);
  detail::read(j, "distance_scale", m.distance_scale);
  detail::read(j, "distance_offset", m.distance_offset);
  detail::read(j, "init_seed", m.init_seed);
  return m;
}

inline json to_json(const train::LossWeights& w) { return json::array({w.siren, w.angle, w.distance}); }

inline train::LossWeights weights_from_json(const json& j) {
  require(j.is_array() && j.size() == 3, "weights: expected [siren, angle, distance]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json to_json(const train::TrainConfig& t) {
  return {{"lr_init", t.lr_init},   {"lr_min", t.lr_min},         {"plateau_factor", t.plateau_factor},
          {"plateau_patience", t.plateau_patience},                 {"batch_size", t.batch_size},
          {"epochs", t.epochs},     {"seed", t.seed},             {"weights", to_json(t.weights)},
          {"normalized_angle_loss", t.normalized_angle_loss}};
}

inline train::TrainConfig train_from_json(const json& j) {
  detail::check_keys(j,
                     {"lr_init", "lr_min", "plateau_factor", "plateau_patience", "batch_size", "epochs", "seed",
                      "weights", "normalized_angle_loss"},
                     "train");
  train::TrainConfig t;
  detail::read(j, "lr_init", t.lr_init);
  detail::read(j, "lr_min", t.lr_min);
  detail::read(j, "plateau_factor", t.plateau_factor);
  detail::read(j, "plateau_patience", t.plateau_patience);
  detail::read(j, "batch_size", t.batch_size);
  detail::read(j, "epochs", t.epochs);
  detail::read(j, "seed", t.seed);
  if (j.contains("weights")) t.weights = weights_from_json(j.at("weights"));
  detail::read(j, "normalized_angle_loss", t.normalized_angle_loss);
  return t;
}

inline json to_json(const RunConfig& rc) {
  json scenes = json::array();
  for (const auto& s : rc.scenes) scenes.push_back(to_json(s));
  json scenarios = json::array();
  for (auto s : rc.batch.scenarios) scenarios.push_back(io::to_string(s));
  const auto& w = rc.label.windows;
  return {
      {"output_dir", rc.output_dir},
      {"simulate",
       {{"scenes", scenes},
        {"batch",
         {{"count", rc.batch.count},
          {"seed", rc.batch.seed},
          {"scenarios", scenarios},
          {"duration", rc.batch.duration},
          {"snr_db", rc.batch.snr_db},
          {"tag_prefix", rc.batch.tag_prefix},
          {"sessions_per_tag", rc.batch.sessions_per_tag}}}}},
      {"label",
       {{"window_len", w.window_len},
        {"stride", w.stride},
        {"input_len", w.input_len},
        {"cutoff_m", w.cutoff_m},
        {"balance",
         {{"sector_halfwidth_deg", rc.label.balance.sector_halfwidth_deg},
          {"keep_ratio", rc.label.balance.keep_ratio},
          {"seed", rc.label.balance.seed}}},
        {"split", {{"ratio", rc.label.split.ratio}, {"seed", rc.label.split.seed}}},
        {"dump_features", rc.label.dump_features}}},
      {"filter", {{"lo", rc.filter.lo}, {"hi", rc.filter.hi}, {"order", rc.filter.order}}},
      {"model", to_json(rc.model)},
      {"train", to_json(rc.train)},
      {"fine_tune",
       {{"epochs", rc.fine_tune.epochs}, {"weights", to_json(rc.fine_tune.weights)}, {"lr", rc.fine_tune.lr}}},
      {"eval",
       {{"threshold", rc.eval.threshold}, {"range_m", rc.eval.range_m}, {"latency_runs", rc.eval.latency_runs}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  detail::check_keys(j, {"output_dir", "simulate", "label", "filter", "model", "train", "fine_tune", "eval"}, "config");
  RunConfig rc;
  detail::read(j, "output_dir", rc.output_dir);
  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    detail::check_keys(s, {"scenes", "batch"}, "simulate");
    if (s.contains("scenes")) {
      require(s.at("scenes").is_array(), "simulate.scenes: expected an array");
      for (const auto& sc : s.at("scenes")) rc.scenes.push_back(scene_from_json(sc));
    }
    if (s.contains("batch")) {
      const auto& b = s.at("batch");
      detail::check_keys(b, {"count", "seed", "scenarios", "duration", "snr_db", "tag_prefix", "sessions_per_tag"},
                        "simulate.batch");
      detail::read(b, "count", rc.batch.count);
      detail::read(b, "seed", rc.batch.seed);
      if (b.contains("scenarios")) {
        rc.batch.scenarios.clear();
        for (const auto& n : b.at("scenarios")) rc.batch.scenarios.push_back(io::scenario_from_string(n.get<std::string>()));
      }
      detail::read(b, "duration", rc.batch.duration);
      detail::read(b, "snr_db", rc.batch.snr_db);
      detail::read(b, "tag_prefix", rc.batch.tag_prefix);
      detail::read(b, "sessions_per_tag", rc.batch.sessions_per_tag);
    }
  }
  if (j.contains("label")) {
    const auto& l = j.at("label");
    detail::check_keys(l, {"window_len", "stride", "input_len", "cutoff_m", "balance", "split", "dump_features"},
                       "label");
    detail::read(l, "window_len", rc.label.windows.window_len);
    detail::read(l, "stride", rc.label.windows.stride);
    detail::read(l, "input_len", rc.label.windows.input_len);
    detail::read(l, "cutoff_m", rc.label.windows.cutoff_m);
    if (l.contains("balance")) {
      const auto& b = l.at("balance");
      detail::check_keys(b, {"sector_halfwidth_deg", "keep_ratio", "seed"}, "label.balance");
      detail::read(b, "sector_halfwidth_deg", rc.label.balance.sector_halfwidth_deg);
      detail::read(b, "keep_ratio", rc.label.balance.keep_ratio);
      detail::read(b, "seed", rc.label.balance.seed);
    }
    if (l.contains("split")) {
      const auto& s = l.at("split");
      detail::check_keys(s, {"ratio", "seed"}, "label.split");
      detail::read(s, "ratio", rc.label.split.ratio);
      detail::read(s, "seed", rc.label.split.seed);
    }
    detail::read(l, "dump_features", rc.label.dump_features);
  }
  if (j.contains("filter")) {
    const auto& f = j.at("filter");
    detail::check_keys(f, {"lo", "hi", "order"}, "filter");
    detail::read(f, "lo", rc.filter.lo);
    detail::read(f, "hi", rc.filter.hi);
    detail::read(f, "order", rc.filter.order);
  }
  if (j.contains("model")) rc.model = model_from_json(j.at("model"));
  if (j.contains("train")) rc.train = train_from_json(j.at("train"));
  if (j.contains("fine_tune")) {
    const auto& f = j.at("fine_tune");
    detail::check_keys(f, {"epochs", "weights", "lr"}, "fine_tune");
    detail::read(f, "epochs", rc.fine_tune.epochs);
    if (f.contains("weights")) rc.fine_tune.weights = weights_from_json(f.at("weights"));
    detail::read(f, "lr", rc.fine_tune.lr);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"threshold", "range_m", "latency_runs"}, "eval");
    detail::read(e, "threshold", rc.eval.threshold);
    detail::read(e, "range_m", rc.eval.range_m);
    detail::read(e, "latency_runs", rc.eval.latency_runs);
  }
  return rc;
}

/// Parses and validates a configuration file.
inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
  try {
    RunConfig rc = run_config_from_json(j);
    for (const auto& s : expand_scenes(rc)) sim::validate(s);
    dsp::validate(rc.filter, kSampleRate);
    nn::validate(rc.model);
    train::validate(rc.train);
    return rc;
  } catch (const json::exception& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

}  // namespace sirenloc::config
