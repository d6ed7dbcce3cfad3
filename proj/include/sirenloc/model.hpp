#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "sirenloc/core.hpp"
#include "sirenloc/dsp.hpp"
#include "sirenloc/tensor.hpp"

namespace sirenloc::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Vec>;
using ConstVecMap = Eigen::Map<const Vec>;

enum class WaveformStream { cnn, attention };
enum class PositionalMode { concat, sum, none };

struct ConvSpec {
  int channels = 16;
  int kernel = 9;
  int stride = 4;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct ModelConfig {
  WaveformStream waveform_stream = WaveformStream::cnn;
  int in_channels = kNumChannels;
  int input_len = 24000;  // samples per channel
  double input_gain = 10.0;

  // convolutional waveform stream
  std::vector<ConvSpec> cnn{{16, 9, 4}, {32, 9, 4}, {64, 9, 4}, {64, 9, 4}};
  bool cnn_relu = true;

  // attention waveform stream
  int token_len = 1000;
  int pos_enc_len = 100;
  int proj_width = 64;
  int heads = 4;
  int depth = 2;
  int ff_width = 128;
  PositionalMode pos_mode = PositionalMode::concat;

  // spectral feature stream: inputs are (value - offset) * scale
  dsp::FeatureParams features{};
  std::vector<ConvSpec> feature_convs{{32, 3, 2}, {32, 3, 2}};
  bool feature_relu = true;
  double feature_offset = -10.0;
  double feature_scale = 0.1;

  int head_width = 64;
  // distance = distance_scale * head_output + distance_offset
  double distance_scale = 50.0;
  double distance_offset = 50.0;

  std::uint64_t init_seed = 0;

  int feature_rows() const { return in_channels * (features.n_mfcc + features.n_mels); }
  int feature_frames() const { return features.frames_for(static_cast<std::size_t>(input_len)); }
  int tokens_per_channel() const { return (input_len + token_len - 1) / token_len; }
  int model_width() const {
    return pos_mode == PositionalMode::concat ? proj_width + pos_enc_len : proj_width;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline int conv_out_len(int len, const ConvSpec& c) {
  return len < c.kernel ? 0 : (len - c.kernel) / c.stride + 1;
}

inline void validate(const ModelConfig& c) {
  require(c.in_channels >= 1 && c.input_len >= 1, "ModelConfig: bad input shape");
  require(c.head_width >= 1, "ModelConfig: head_width must be positive");
  if (c.waveform_stream == WaveformStream::cnn) {
    require(!c.cnn.empty(), "ModelConfig: cnn needs at least one layer");
    int len = c.input_len;
    for (const auto& l : c.cnn) {
      require(l.channels >= 1 && l.kernel >= 1 && l.stride >= 1, "ModelConfig: bad conv spec");
      len = conv_out_len(len, l);
      require(len >= 1, "ModelConfig: cnn reduces the input to nothing");
    }
  } else {
    require(c.token_len >= 1, "ModelConfig: token_len must be positive");
    require(c.pos_enc_len >= 1, "ModelConfig: pos_enc_len must be at least 1");
    require(c.proj_width >= 1 && c.depth >= 0 && c.ff_width >= 1 && c.heads >= 1,
            "ModelConfig: bad attention sizes");
    require(c.model_width() % c.heads == 0, "ModelConfig: heads must divide the model width");
    require(c.pos_mode != PositionalMode::sum || c.proj_width % 2 == 0,
            "ModelConfig: summed positional encoding needs an even projection width");
  }
  require(c.feature_frames() >= 1, "ModelConfig: input shorter than one feature frame");
  int len = c.feature_frames();
  for (const auto& l : c.feature_convs) {
    require(l.channels >= 1 && l.kernel >= 1 && l.stride >= 1, "ModelConfig: bad feature conv spec");
    len = conv_out_len(len, l);
    require(len >= 1, "ModelConfig: feature convs reduce the input to nothing");
  }
}

/// Sinusoidal positional encoding, positions x dim.
inline Mat positional_encoding(int positions, int dim) {
  Mat pe(positions, dim);
  for (int p = 0; p < positions; ++p) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / dim);
      pe(p, i) = i % 2 == 0 ? std::sin(p * rate) : std::cos(p * rate);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Head post-processing
// ---------------------------------------------------------------------------

struct AnglePair {
  double sin_n = 0.0;
  double cos_n = 1.0;
  bool degenerate = false;
};

/// Projects (s, c) onto the unit circle. Below 1e-8 in norm the pair is
/// undefined and (0, 1) is returned with the degeneracy flag set.
inline AnglePair normalize_angle_pair(double sin_raw, double cos_raw) {
  const double r = std::hypot(sin_raw, cos_raw);
  if (r < 1e-8) return {0.0, 1.0, true};
  return {sin_raw / r, cos_raw / r, false};
}

inline double angle_from_pair(double sin_n, double cos_n) {
  return wrap_angle(std::atan2(sin_n, cos_n));
}

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

struct ModelOutput {
  double logit = 0.0;
  double p_siren = 0.5;
  double sin_raw = 0.0;
  double cos_raw = 0.0;
  double distance = 0.0;  // meters, unconstrained
  double sin_n = 0.0;
  double cos_n = 1.0;
  double theta_hat = 0.0;
  bool degenerate = false;
};

/// Gradient of a scalar loss with respect to the raw head outputs. Heads
/// whose flag is off are skipped entirely and receive no gradient.
struct OutputGrad {
  double d_logit = 0.0;
  double d_sin = 0.0;
  double d_cos = 0.0;
  double d_distance = 0.0;
  bool siren = true;
  bool angle = true;
  bool distance = true;
};

/// Waveform (channels x samples, band-passed) and the arranged feature matrix
/// (channels * (n_mfcc + n_mels) rows x frames, un-normalized).
struct ModelInput {
  Mat waveform;
  Mat features;
};

/// Rows for channel c are [mfcc_0..mfcc_{k-1}, logmel_0..logmel_{m-1}].
inline Mat arrange_features(const dsp::SpectralFeatures& f) {
  require(!f.log_mel.empty() && f.log_mel.size() == f.mfcc.size(), "arrange_features: channel mismatch");
  const int frames = f.log_mel[0].rows;
  const int nm = f.log_mel[0].cols, nc = f.mfcc[0].cols;
  Mat out(static_cast<int>(f.log_mel.size()) * (nc + nm), frames);
  for (std::size_t c = 0; c < f.log_mel.size(); ++c) {
    require(f.log_mel[c].rows == frames && f.mfcc[c].rows == frames, "arrange_features: frame mismatch");
    const int base = static_cast<int>(c) * (nc + nm);
    for (int t = 0; t < frames; ++t) {
      for (int k = 0; k < nc; ++k) out(base + k, t) = f.mfcc[c](t, k);
      for (int m = 0; m < nm; ++m) out(base + nc + m, t) = f.log_mel[c](t, m);
    }
  }
  return out;
}

inline ModelInput make_input(const dsp::FeaturizedWindow& fw) {
  ModelInput in;
  const int ch = static_cast<int>(fw.waveform.size());
  const int len = ch ? static_cast<int>(fw.waveform[0].size()) : 0;
  in.waveform.resize(ch, len);
  for (int c = 0; c < ch; ++c) {
    for (int i = 0; i < len; ++i) in.waveform(c, i) = fw.waveform[c][i];
  }
  in.features = arrange_features(fw.features);
  return in;
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const Mat& x, int k, int s, Mat& cols) {
  const int channels = static_cast<int>(x.rows());
  const int t_out = (static_cast<int>(x.cols()) - k) / s + 1;
  cols.resize(static_cast<Eigen::Index>(channels) * k, t_out);
  for (int c = 0; c < channels; ++c) {
    const double* src = x.row(c).data();
    for (int j = 0; j < k; ++j) {
      double* dst = cols.row(static_cast<Eigen::Index>(c) * k + j).data();
      for (int t = 0; t < t_out; ++t) dst[t] = src[t * s + j];
    }
  }
}

inline void col2im_add(const Mat& dcols, int k, int s, Mat& dx) {
  const int channels = static_cast<int>(dx.rows());
  const int t_out = static_cast<int>(dcols.cols());
  for (int c = 0; c < channels; ++c) {
    double* dst = dx.row(c).data();
    for (int j = 0; j < k; ++j) {
      const double* src = dcols.row(static_cast<Eigen::Index>(c) * k + j).data();
      for (int t = 0; t < t_out; ++t) dst[t * s + j] += src[t];
    }
  }
}

inline void relu_inplace(Mat& m) { m = m.cwiseMax(0.0); }

}  // namespace detail

struct ConvCache {
  Mat cols;
  Mat pre;
  Mat out;
};

struct AttentionLayerCache {
  Mat x_in, q, k, v;
  std::vector<Mat> attn;  // per head, tokens x tokens
  Mat o, x1, ff_pre, ff_act, x_out;
};

struct WaveCache {
  Mat input;  // gain-scaled waveform or token matrix
  std::vector<ConvCache> conv;
  Mat z0;
  std::vector<AttentionLayerCache> attn;
};

struct FeatureCache {
  Mat input;  // normalized feature matrix
  std::vector<ConvCache> conv;
};

struct HeadCache {
  Vec hidden_pre;
  Vec hidden;
};

struct ForwardCache {
  WaveCache wave;
  FeatureCache feat;
  Vec embedding;
  HeadCache head[3];
};

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Dual-stream multi-task network: a waveform stream (1-D CNN or
/// self-attention over 1000-sample tokens), a spectral-feature stream, and
/// three independent two-layer MLP heads on the concatenated embedding.
class SirenNet {
 public:
  static constexpr int kSirenHead = 0, kAngleHead = 1, kDistanceHead = 2;

  explicit SirenNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    build_layout();
  }

  const ModelConfig& config() const { return cfg_; }
  int wave_embedding_size() const { return wave_dim_; }
  int feature_embedding_size() const { return feat_dim_; }
  int embedding_size() const { return wave_dim_ + feat_dim_; }

  /// Empty parameter set with the network's layout.
  const Params& layout() const { return layout_; }

  /// Fan-in scaled uniform initialization, seeded by config().init_seed.
  Params init_params() const {
    Params p = layout_;
    std::mt19937_64 rng(cfg_.init_seed);
    for (std::size_t i = 0; i < p.count(); ++i) {
      const double fan_in = static_cast<double>(fan_in_[i]);
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      for (double& v : p[i].values) v = u(rng);
    }
    return p;
  }

  /// True for tensors belonging to one of the three output heads.
  static bool is_head_tensor(const std::string& name) { return name.rfind("head_", 0) == 0; }
  static int head_of(const std::string& name) {
    if (name.rfind("head_siren.", 0) == 0) return kSirenHead;
    if (name.rfind("head_angle.", 0) == 0) return kAngleHead;
    if (name.rfind("head_dist.", 0) == 0) return kDistanceHead;
    return -1;
  }

  void check_params(const Params& p) const {
    require(p.count() == layout_.count(), "params do not match model layout");
    for (std::size_t i = 0; i < p.count(); ++i) {
      require(p[i].name == layout_[i].name && p[i].shape == layout_[i].shape,
              "params do not match model layout at " + layout_[i].name);
    }
  }

  // --- streams -------------------------------------------------------------

  Vec forward_waveform_stream(const Params& p, const Mat& waveform, WaveCache* cache = nullptr) const {
    require(waveform.rows() == cfg_.in_channels && waveform.cols() == cfg_.input_len,
            "waveform stream: input shape mismatch");
    WaveCache local;
    WaveCache& c = cache ? *cache : local;
    return cfg_.waveform_stream == WaveformStream::cnn ? cnn_forward(p, waveform, c)
                                                       : attention_forward(p, waveform, c);
  }

  Vec forward_feature_stream(const Params& p, const Mat& features, FeatureCache* cache = nullptr) const {
    require(features.rows() == cfg_.feature_rows() && features.cols() == cfg_.feature_frames(),
            "feature stream: input shape mismatch");
    FeatureCache local;
    FeatureCache& c = cache ? *cache : local;
    c.input = ((features.array() - cfg_.feature_offset) * cfg_.feature_scale).matrix();
    const Mat* x = &c.input;
    c.conv.resize(cfg_.feature_convs.size());
    for (std::size_t l = 0; l < cfg_.feature_convs.size(); ++l) {
      conv_forward(p, feat_conv_[l], cfg_.feature_convs[l], *x, c.conv[l], cfg_.feature_relu);
      x = &c.conv[l].out;
    }
    return Eigen::Map<const Vec>(x->data(), x->size());
  }

  /// Attention encoder over an explicit token matrix (tokens x token_len),
  /// with or without positional encoding. Mean-pooled over tokens.
  Vec encode_tokens(const Params& p, const Mat& tokens, bool use_positions, WaveCache* cache = nullptr) const {
    require(cfg_.waveform_stream == WaveformStream::attention, "encode_tokens: not an attention model");
    require(tokens.cols() == cfg_.token_len, "encode_tokens: token width mismatch");
    WaveCache local;
    WaveCache& c = cache ? *cache : local;
    c.input = tokens;
    const Mat proj = (tokens * weight(p, attn_.proj_w).transpose()).rowwise() +
                     bias(p, attn_.proj_b).transpose();
    const int n = static_cast<int>(tokens.rows());
    const int d = cfg_.model_width();
    c.z0.resize(n, d);
    switch (cfg_.pos_mode) {
      case PositionalMode::concat: {
        c.z0.leftCols(cfg_.proj_width) = proj;
        if (use_positions) {
          c.z0.rightCols(cfg_.pos_enc_len) = positional_encoding(n, cfg_.pos_enc_len);
        } else {
          c.z0.rightCols(cfg_.pos_enc_len).setZero();
        }
        break;
      }
      case PositionalMode::sum:
        c.z0 = use_positions ? Mat(proj + positional_encoding(n, cfg_.proj_width)) : proj;
        break;
      case PositionalMode::none:
        c.z0 = proj;
        break;
    }
    c.attn.resize(cfg_.depth);
    const Mat* x = &c.z0;
    for (int l = 0; l < cfg_.depth; ++l) {
      attention_layer_forward(p, attn_.layers[l], *x, c.attn[l]);
      x = &c.attn[l].x_out;
    }
    return x->colwise().mean().transpose();
  }

  /// Per-channel tokenization, channel sequences concatenated; the last
  /// token of each channel is zero-padded when token_len does not divide the
  /// input length.
  Mat tokenize(const Mat& waveform) const {
    const int per = cfg_.tokens_per_channel();
    Mat tokens = Mat::Zero(static_cast<Eigen::Index>(cfg_.in_channels) * per, cfg_.token_len);
    for (int c = 0; c < cfg_.in_channels; ++c) {
      for (int j = 0; j < per; ++j) {
        const int start = j * cfg_.token_len;
        const int len = std::min(cfg_.token_len, cfg_.input_len - start);
        tokens.row(c * per + j).head(len) = cfg_.input_gain * waveform.row(c).segment(start, len);
      }
    }
    return tokens;
  }

  // --- heads ---------------------------------------------------------------

  ModelOutput heads(const Params& p, const Vec& embedding, HeadCache* cache = nullptr) const {
    require(embedding.size() == embedding_size(), "heads: embedding size mismatch");
    HeadCache local[3];
    HeadCache* hc = cache ? cache : local;
    double raw[3][2] = {};
    for (int h = 0; h < 3; ++h) {
      const auto& hl = head_[h];
      hc[h].hidden_pre = weight(p, hl.w1) * embedding + bias(p, hl.b1);
      hc[h].hidden = hc[h].hidden_pre.cwiseMax(0.0);
      const Vec o = weight(p, hl.w2) * hc[h].hidden + bias(p, hl.b2);
      for (int k = 0; k < o.size(); ++k) raw[h][k] = o(k);
    }
    ModelOutput out;
    out.logit = raw[kSirenHead][0];
    out.p_siren = sigmoid(out.logit);
    out.sin_raw = raw[kAngleHead][0];
    out.cos_raw = raw[kAngleHead][1];
    out.distance = cfg_.distance_scale * raw[kDistanceHead][0] + cfg_.distance_offset;
    const auto pair = normalize_angle_pair(out.sin_raw, out.cos_raw);
    out.sin_n = pair.sin_n;
    out.cos_n = pair.cos_n;
    out.degenerate = pair.degenerate;
    out.theta_hat = angle_from_pair(pair.sin_n, pair.cos_n);
    return out;
  }

  Vec embed(const Params& p, const ModelInput& in, ForwardCache* cache = nullptr) const {
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    const Vec ew = forward_waveform_stream(p, in.waveform, &c.wave);
    const Vec ef = forward_feature_stream(p, in.features, &c.feat);
    c.embedding.resize(ew.size() + ef.size());
    c.embedding << ew, ef;
    return c.embedding;
  }

  ModelOutput forward(const Params& p, const ModelInput& in, ForwardCache* cache = nullptr) const {
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    embed(p, in, &c);
    return heads(p, c.embedding, c.head);
  }

  // --- gradients -----------------------------------------------------------

  /// Head gradients only; returns dLoss/dEmbedding.
  Vec backward_heads(const Params& p, const Vec& embedding, const HeadCache* hc, const OutputGrad& g,
                     Params& grads) const {
    Vec d_emb = Vec::Zero(embedding.size());
    const bool active[3] = {g.siren, g.angle, g.distance};
    for (int h = 0; h < 3; ++h) {
      if (!active[h]) continue;
      Vec d_out;
      if (h == kSirenHead) {
        d_out = Vec::Constant(1, g.d_logit);
      } else if (h == kAngleHead) {
        d_out.resize(2);
        d_out << g.d_sin, g.d_cos;
      } else {
        d_out = Vec::Constant(1, g.d_distance * cfg_.distance_scale);
      }
      const auto& hl = head_[h];
      weight_grad(grads, hl.w2).noalias() += d_out * hc[h].hidden.transpose();
      bias_grad(grads, hl.b2) += d_out;
      Vec d_hidden = weight(p, hl.w2).transpose() * d_out;
      d_hidden.array() *= (hc[h].hidden_pre.array() > 0.0).cast<double>();
      weight_grad(grads, hl.w1).noalias() += d_hidden * embedding.transpose();
      bias_grad(grads, hl.b1) += d_hidden;
      d_emb.noalias() += weight(p, hl.w1).transpose() * d_hidden;
    }
    return d_emb;
  }

  /// Accumulates dLoss/dParams into `grads` (same layout as params).
  void backward(const Params& p, const ForwardCache& c, const OutputGrad& g, Params& grads,
                bool through_backbone = true) const {
    const Vec d_emb = backward_heads(p, c.embedding, c.head, g, grads);
    if (!through_backbone || !(g.siren || g.angle || g.distance)) return;
    const Vec d_wave = d_emb.head(wave_dim_);
    const Vec d_feat = d_emb.tail(feat_dim_);
    if (cfg_.waveform_stream == WaveformStream::cnn) {
      cnn_backward(p, c.wave, d_wave, grads);
    } else {
      attention_backward(p, c.wave, d_wave, grads);
    }
    feature_backward(p, c.feat, d_feat, grads);
  }

 private:
  struct ConvIdx {
    std::size_t w, b;
  };
  struct AttnLayerIdx {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
  };
  struct AttnIdx {
    std::size_t proj_w = 0, proj_b = 0;
    std::vector<AttnLayerIdx> layers;
  };
  struct HeadIdx {
    std::size_t w1, b1, w2, b2;
  };

  std::size_t add(const std::string& name, std::vector<std::size_t> shape, std::size_t fan_in) {
    fan_in_.push_back(fan_in);
    return layout_.add(name, std::move(shape));
  }

  ConvIdx add_conv(const std::string& prefix, int in, const ConvSpec& s) {
    const auto fan = static_cast<std::size_t>(in) * s.kernel;
    ConvIdx ci;
    ci.w = add(prefix + ".weight", {static_cast<std::size_t>(s.channels), static_cast<std::size_t>(in),
                                    static_cast<std::size_t>(s.kernel)},
               fan);
    ci.b = add(prefix + ".bias", {static_cast<std::size_t>(s.channels)}, fan);
    return ci;
  }

  std::pair<std::size_t, std::size_t> add_linear(const std::string& prefix, int in, int out) {
    const auto w = add(prefix + ".weight", {static_cast<std::size_t>(out), static_cast<std::size_t>(in)},
                       static_cast<std::size_t>(in));
    const auto b = add(prefix + ".bias", {static_cast<std::size_t>(out)}, static_cast<std::size_t>(in));
    return {w, b};
  }

  void build_layout() {
    if (cfg_.waveform_stream == WaveformStream::cnn) {
      int in = cfg_.in_channels;
      for (std::size_t l = 0; l < cfg_.cnn.size(); ++l) {
        wave_conv_.push_back(add_conv("wave.conv" + std::to_string(l), in, cfg_.cnn[l]));
        in = cfg_.cnn[l].channels;
      }
      wave_dim_ = in;
    } else {
      const int d = cfg_.model_width();
      std::tie(attn_.proj_w, attn_.proj_b) = add_linear("wave.proj", cfg_.token_len, cfg_.proj_width);
      for (int l = 0; l < cfg_.depth; ++l) {
        const std::string pre = "wave.layer" + std::to_string(l);
        AttnLayerIdx a{};
        std::tie(a.wq, a.bq) = add_linear(pre + ".q", d, d);
        std::tie(a.wk, a.bk) = add_linear(pre + ".k", d, d);
        std::tie(a.wv, a.bv) = add_linear(pre + ".v", d, d);
        std::tie(a.wo, a.bo) = add_linear(pre + ".o", d, d);
        std::tie(a.w1, a.b1) = add_linear(pre + ".ff1", d, cfg_.ff_width);
        std::tie(a.w2, a.b2) = add_linear(pre + ".ff2", cfg_.ff_width, d);
        attn_.layers.push_back(a);
      }
      wave_dim_ = d;
    }
    int in = cfg_.feature_rows();
    int len = cfg_.feature_frames();
    for (std::size_t l = 0; l < cfg_.feature_convs.size(); ++l) {
      feat_conv_.push_back(add_conv("feat.conv" + std::to_string(l), in, cfg_.feature_convs[l]));
      in = cfg_.feature_convs[l].channels;
      len = conv_out_len(len, cfg_.feature_convs[l]);
    }
    feat_dim_ = in * len;
    const int e = wave_dim_ + feat_dim_;
    const char* names[3] = {"head_siren", "head_angle", "head_dist"};
    const int outs[3] = {1, 2, 1};
    for (int h = 0; h < 3; ++h) {
      HeadIdx hi{};
      std::tie(hi.w1, hi.b1) = add_linear(std::string(names[h]) + ".fc0", e, cfg_.head_width);
      std::tie(hi.w2, hi.b2) = add_linear(std::string(names[h]) + ".fc1", cfg_.head_width, outs[h]);
      head_[h] = hi;
    }
  }

  // Weight tensors are viewed as (rows = shape[0]) x (everything else).
  ConstMatMap weight(const Params& p, std::size_t i) const {
    const auto& t = p[i];
    const auto rows = static_cast<Eigen::Index>(t.shape[0]);
    return {t.values.data(), rows, static_cast<Eigen::Index>(t.size()) / rows};
  }
  ConstVecMap bias(const Params& p, std::size_t i) const {
    return {p[i].values.data(), static_cast<Eigen::Index>(p[i].size())};
  }
  MatMap weight_grad(Params& g, std::size_t i) const {
    auto& t = g[i];
    const auto rows = static_cast<Eigen::Index>(t.shape[0]);
    return {t.values.data(), rows, static_cast<Eigen::Index>(t.size()) / rows};
  }
  VecMap bias_grad(Params& g, std::size_t i) const {
    return {g[i].values.data(), static_cast<Eigen::Index>(g[i].size())};
  }

  void conv_forward(const Params& p, const ConvIdx& idx, const ConvSpec& s, const Mat& x, ConvCache& c,
                    bool relu) const {
    detail::im2col(x, s.kernel, s.stride, c.cols);
    c.pre.noalias() = weight(p, idx.w) * c.cols;
    c.pre.colwise() += bias(p, idx.b);
    c.out = relu ? Mat(c.pre.cwiseMax(0.0)) : c.pre;
  }

  /// dy is the gradient w.r.t. the layer output; returns the gradient w.r.t.
  /// the layer input when needed.
  void conv_backward(const Params& p, const ConvIdx& idx, const ConvSpec& s, const ConvCache& c, Mat dy,
                     bool relu, Params& g, Mat* dx, int in_len) const {
    if (relu) dy.array() *= (c.pre.array() > 0.0).cast<double>();
    weight_grad(g, idx.w).noalias() += dy * c.cols.transpose();
    bias_grad(g, idx.b) += dy.rowwise().sum();
    if (dx) {
      const Mat dcols = weight(p, idx.w).transpose() * dy;
      dx->setZero(c.cols.rows() / s.kernel, in_len);
      detail::col2im_add(dcols, s.kernel, s.stride, *dx);
    }
  }

  Vec cnn_forward(const Params& p, const Mat& waveform, WaveCache& c) const {
    c.input = cfg_.input_gain * waveform;
    c.conv.resize(cfg_.cnn.size());
    const Mat* x = &c.input;
    for (std::size_t l = 0; l < cfg_.cnn.size(); ++l) {
      conv_forward(p, wave_conv_[l], cfg_.cnn[l], *x, c.conv[l], cfg_.cnn_relu);
      x = &c.conv[l].out;
    }
    return x->rowwise().mean();
  }

  void cnn_backward(const Params& p, const WaveCache& c, const Vec& d_emb, Params& g) const {
    const auto& last = c.conv.back().out;
    Mat dy = (d_emb / static_cast<double>(last.cols())).replicate(1, last.cols());
    for (std::size_t l = cfg_.cnn.size(); l-- > 0;) {
      const Mat& x = l == 0 ? c.input : c.conv[l - 1].out;
      Mat dx;
      conv_backward(p, wave_conv_[l], cfg_.cnn[l], c.conv[l], std::move(dy), cfg_.cnn_relu, g,
                    l > 0 ? &dx : nullptr, static_cast<int>(x.cols()));
      dy = std::move(dx);
    }
  }

  void feature_backward(const Params& p, const FeatureCache& c, const Vec& d_emb, Params& g) const {
    if (cfg_.feature_convs.empty()) return;
    const auto& last = c.conv.back().out;
    Mat dy = Eigen::Map<const Mat>(d_emb.data(), last.rows(), last.cols());
    for (std::size_t l = cfg_.feature_convs.size(); l-- > 0;) {
      const Mat& x = l == 0 ? c.input : c.conv[l - 1].out;
      Mat dx;
      conv_backward(p, feat_conv_[l], cfg_.feature_convs[l], c.conv[l], std::move(dy), cfg_.feature_relu, g,
                    l > 0 ? &dx : nullptr, static_cast<int>(x.cols()));
      dy = std::move(dx);
    }
  }

  Vec attention_forward(const Params& p, const Mat& waveform, WaveCache& c) const {
    return encode_tokens(p, tokenize(waveform), true, &c);
  }

  void attention_layer_forward(const Params& p, const AttnLayerIdx& a, const Mat& x,
                               AttentionLayerCache& c) const {
    const int d = cfg_.model_width();
    const int dh = d / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.x_in = x;
    c.q = (x * weight(p, a.wq).transpose()).rowwise() + bias(p, a.bq).transpose();
    c.k = (x * weight(p, a.wk).transpose()).rowwise() + bias(p, a.bk).transpose();
    c.v = (x * weight(p, a.wv).transpose()).rowwise() + bias(p, a.bv).transpose();
    c.attn.resize(cfg_.heads);
    c.o.resize(x.rows(), d);
    for (int h = 0; h < cfg_.heads; ++h) {
      Mat s = scale * c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose();
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp().matrix();
        s.row(r) /= s.row(r).sum();
      }
      c.o.middleCols(h * dh, dh) = s * c.v.middleCols(h * dh, dh);
      c.attn[h] = std::move(s);
    }
    c.x1 = x + Mat((c.o * weight(p, a.wo).transpose()).rowwise() + bias(p, a.bo).transpose());
    c.ff_pre = (c.x1 * weight(p, a.w1).transpose()).rowwise() + bias(p, a.b1).transpose();
    c.ff_act = c.ff_pre.cwiseMax(0.0);
    c.x_out = c.x1 + Mat((c.ff_act * weight(p, a.w2).transpose()).rowwise() + bias(p, a.b2).transpose());
  }

  Mat attention_layer_backward(const Params& p, const AttnLayerIdx& a, const AttentionLayerCache& c,
                               const Mat& d_out, Params& g) const {
    const int d = cfg_.model_width();
    const int dh = d / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    // feed-forward with residual
    weight_grad(g, a.w2).noalias() += d_out.transpose() * c.ff_act;
    bias_grad(g, a.b2) += d_out.colwise().sum().transpose();
    Mat d_ff = d_out * weight(p, a.w2);
    d_ff.array() *= (c.ff_pre.array() > 0.0).cast<double>();
    weight_grad(g, a.w1).noalias() += d_ff.transpose() * c.x1;
    bias_grad(g, a.b1) += d_ff.colwise().sum().transpose();
    Mat d_x1 = d_out + d_ff * weight(p, a.w1);
    // output projection with residual
    weight_grad(g, a.wo).noalias() += d_x1.transpose() * c.o;
    bias_grad(g, a.bo) += d_x1.colwise().sum().transpose();
    const Mat d_o = d_x1 * weight(p, a.wo);
    Mat d_q(c.q.rows(), d), d_k(c.k.rows(), d), d_v(c.v.rows(), d);
    for (int h = 0; h < cfg_.heads; ++h) {
      const Mat& att = c.attn[h];
      const auto d_oh = d_o.middleCols(h * dh, dh);
      const Mat d_att = d_oh * c.v.middleCols(h * dh, dh).transpose();
      d_v.middleCols(h * dh, dh) = att.transpose() * d_oh;
      const Vec row_dot = (d_att.array() * att.array()).rowwise().sum();
      const Mat d_s = (att.array() * (d_att.colwise() - row_dot).array()).matrix() * scale;
      d_q.middleCols(h * dh, dh) = d_s * c.k.middleCols(h * dh, dh);
      d_k.middleCols(h * dh, dh) = d_s.transpose() * c.q.middleCols(h * dh, dh);
    }
    weight_grad(g, a.wq).noalias() += d_q.transpose() * c.x_in;
    bias_grad(g, a.bq) += d_q.colwise().sum().transpose();
    weight_grad(g, a.wk).noalias() += d_k.transpose() * c.x_in;
    bias_grad(g, a.bk) += d_k.colwise().sum().transpose();
    weight_grad(g, a.wv).noalias() += d_v.transpose() * c.x_in;
    bias_grad(g, a.bv) += d_v.colwise().sum().transpose();
    return d_x1 + d_q * weight(p, a.wq) + d_k * weight(p, a.wk) + d_v * weight(p, a.wv);
  }

  void attention_backward(const Params& p, const WaveCache& c, const Vec& d_emb, Params& g) const {
    const Eigen::Index n = c.z0.rows();
    Mat dz = (d_emb.transpose() / static_cast<double>(n)).replicate(n, 1);
    for (int l = cfg_.depth; l-- > 0;) dz = attention_layer_backward(p, attn_.layers[l], c.attn[l], dz, g);
    const Mat d_proj = dz.leftCols(cfg_.proj_width);
    weight_grad(g, attn_.proj_w).noalias() += d_proj.transpose() * c.input;
    bias_grad(g, attn_.proj_b) += d_proj.colwise().sum().transpose();
  }

  ModelConfig cfg_;
  Params layout_;
  std::vector<std::size_t> fan_in_;
  std::vector<ConvIdx> wave_conv_;
  AttnIdx attn_;
  std::vector<ConvIdx> feat_conv_;
  HeadIdx head_[3]{};
  int wave_dim_ = 0;
  int feat_dim_ = 0;
};

}  // namespace sirenloc::nn
