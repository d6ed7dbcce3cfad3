#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "sirenloc/core.hpp"

namespace sirenloc::dsp {

// ---------------------------------------------------------------------------
// Band-pass filtering
// ---------------------------------------------------------------------------

struct FilterSpec {
  double lo = 500.0;
  double hi = 1800.0;
  int order = 4;  // low-pass prototype order; the band-pass has 2*order poles

  friend bool operator==(const FilterSpec&, const FilterSpec&) = default;
};

/// One second-order section, a0 normalized to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;

  std::complex<double> response(double omega) const {
    const std::complex<double> z1 = std::polar(1.0, -omega);
    const std::complex<double> z2 = z1 * z1;
    return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
  }
};

inline void validate(const FilterSpec& spec, double sr) {
  require(spec.lo > 0.0 && spec.lo < spec.hi && spec.hi < sr / 2.0,
          "FilterSpec: need 0 < lo < hi < sr/2");
  require(spec.order >= 1 && spec.order <= 16, "FilterSpec: order out of range");
}

/// Digital Butterworth band-pass as cascaded biquads: analog prototype,
/// low-pass to band-pass transform, bilinear transform with pre-warped edges.
/// Unity gain at the geometric band centre.
inline std::vector<Biquad> design_bandpass(const FilterSpec& spec, double sr) {
  validate(spec, sr);
  using cd = std::complex<double>;
  const int n = spec.order;
  const double fs2 = 2.0 * sr;
  const double w_lo = fs2 * std::tan(kPi * spec.lo / sr);
  const double w_hi = fs2 * std::tan(kPi * spec.hi / sr);
  const double bw = w_hi - w_lo;
  const double w0_sq = w_lo * w_hi;

  std::vector<cd> z_poles;
  for (int k = 0; k < n; ++k) {
    const cd p = std::polar(1.0, kPi * (2.0 * k + n + 1) / (2.0 * n));
    const cd pb = p * bw / 2.0;
    const cd root = std::sqrt(pb * pb - w0_sq);
    for (const cd s : {pb + root, pb - root}) {
      z_poles.push_back((1.0 + s / fs2) / (1.0 - s / fs2));
    }
  }
  std::vector<Biquad> sections;
  for (const cd& z : z_poles) {
    if (z.imag() <= 0.0) continue;  // conjugate partner completes the section
    Biquad q;
    q.b0 = 1.0;
    q.b1 = 0.0;
    q.b2 = -1.0;  // zeros at z = +1 and z = -1
    q.a1 = -2.0 * z.real();
    q.a2 = std::norm(z);
    sections.push_back(q);
  }
  const double centre = 2.0 * std::atan(std::sqrt(w0_sq) / fs2);
  std::complex<double> h = 1.0;
  for (const auto& q : sections) h *= q.response(centre);
  const double g = std::pow(1.0 / std::abs(h), 1.0 / static_cast<double>(sections.size()));
  for (auto& q : sections) {
    q.b0 *= g;
    q.b1 *= g;
    q.b2 *= g;
  }
  return sections;
}

/// Causal cascade filtering (transposed direct form II), zero initial state.
inline std::vector<double> apply_sos(std::span<const Biquad> sections, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  std::size_t i = 0;
  for (; i + 1 < sections.size(); i += 2) {
    const Biquad& q = sections[i];
    const Biquad& r = sections[i + 1];
    double s1 = 0.0, s2 = 0.0, t1 = 0.0, t2 = 0.0;
    for (double& v : y) {
      const double in = v;
      const double mid = q.b0 * in + s1;
      s1 = q.b1 * in - q.a1 * mid + s2;
      s2 = q.b2 * in - q.a2 * mid;
      const double out = r.b0 * mid + t1;
      t1 = r.b1 * mid - r.a1 * out + t2;
      t2 = r.b2 * mid - r.a2 * out;
      v = out;
    }
  }
  for (; i < sections.size(); ++i) {
    const Biquad& q = sections[i];
    double s1 = 0.0, s2 = 0.0;
    for (double& v : y) {
      const double in = v;
      const double out = q.b0 * in + s1;
      s1 = q.b1 * in - q.a1 * out + s2;
      s2 = q.b2 * in - q.a2 * out;
      v = out;
    }
  }
  return y;
}

/// Same cascade applied to several equal-length channels at once.
inline std::vector<std::vector<double>> apply_sos(std::span<const Biquad> sections,
                                                  std::span<const std::vector<double>> channels) {
  const std::size_t nc = channels.size();
  const std::size_t n = nc ? channels[0].size() : 0;
  std::vector<double> buf(n * nc);
  for (std::size_t c = 0; c < nc; ++c) {
    require(channels[c].size() == n, "apply_sos: ragged channels");
    for (std::size_t i = 0; i < n; ++i) buf[i * nc + c] = channels[c][i];
  }
  std::vector<double> s1(nc), s2(nc);
  for (const auto& q : sections) {
    std::fill(s1.begin(), s1.end(), 0.0);
    std::fill(s2.begin(), s2.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double* v = &buf[i * nc];
      for (std::size_t c = 0; c < nc; ++c) {
        const double in = v[c];
        const double out = q.b0 * in + s1[c];
        s1[c] = q.b1 * in - q.a1 * out + s2[c];
        s2[c] = q.b2 * in - q.a2 * out;
        v[c] = out;
      }
    }
  }
  std::vector<std::vector<double>> out(nc, std::vector<double>(n));
  for (std::size_t c = 0; c < nc; ++c) {
    for (std::size_t i = 0; i < n; ++i) out[c][i] = buf[i * nc + c];
  }
  return out;
}

inline std::vector<double> bandpass(std::span<const double> signal, const FilterSpec& spec,
                                    double sr = kSampleRate) {
  for (double v : signal) require(std::isfinite(v), "bandpass: non-finite sample");
  const auto sections = design_bandpass(spec, sr);
  return apply_sos(sections, signal);
}

// ---------------------------------------------------------------------------
// Spectral features
// ---------------------------------------------------------------------------

struct FeatureParams {
  int frame_len = 1200;
  int hop = 480;
  int n_fft = 2048;
  int n_mels = 40;
  int n_mfcc = 13;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-10;

  int frames_for(std::size_t n) const {
    return n < static_cast<std::size_t>(frame_len)
               ? 0
               : 1 + static_cast<int>((n - frame_len) / static_cast<std::size_t>(hop));
  }
  friend bool operator==(const FeatureParams&, const FeatureParams&) = default;
};

inline void validate(const FeatureParams& p, double sr) {
  require(p.frame_len > 0 && p.hop > 0, "FeatureParams: frame_len and hop must be positive");
  require(p.n_fft >= p.frame_len && std::has_single_bit(static_cast<unsigned>(p.n_fft)),
          "FeatureParams: n_fft must be a power of two >= frame_len");
  require(p.n_mels >= 1 && p.n_mfcc >= 1 && p.n_mfcc <= p.n_mels,
          "FeatureParams: need 1 <= n_mfcc <= n_mels");
  require(p.fmin >= 0.0 && p.fmin < p.fmax && p.fmax <= sr / 2.0,
          "FeatureParams: need 0 <= fmin < fmax <= sr/2");
  require(p.log_floor > 0.0, "FeatureParams: log_floor must be positive");
}

/// Row-major dense matrix of doubles.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Real-input FFT of a fixed size. Copies share the plan; execution uses
/// caller-owned buffers so a plan can serve several extractors.
class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    require(n >= 2, "fft: size must be at least 2");
    Buffers b(n);
    plan_ = std::shared_ptr<fftw_plan_s>(fftw_plan_dft_r2c_1d(n, b.in, b.out, FFTW_ESTIMATE), fftw_destroy_plan);
    if (!plan_) throw RuntimeFailure("fftw: plan creation failed");
  }

  int size() const { return n_; }
  int bins() const { return n_ / 2 + 1; }

  struct Buffers {
    explicit Buffers(int n)
        : in(fftw_alloc_real(static_cast<std::size_t>(n))), out(fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1))) {
      if (!in || !out) throw RuntimeFailure("fftw: allocation failed");
    }
    ~Buffers() {
      fftw_free(in);
      fftw_free(out);
    }
    Buffers(const Buffers&) = delete;
    Buffers& operator=(const Buffers&) = delete;
    double* in;
    fftw_complex* out;
  };

  void execute(Buffers& b) const { fftw_execute_dft_r2c(plan_.get(), b.in, b.out); }

 private:
  int n_;
  std::shared_ptr<fftw_plan_s> plan_;
};

/// Periodic Hann window.
inline std::vector<double> hann(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
  return w;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Band edge frequencies: n_mels + 2 points evenly spaced on the mel scale.
inline std::vector<double> mel_edges(const FeatureParams& p) {
  const double m0 = hz_to_mel(p.fmin), m1 = hz_to_mel(p.fmax);
  std::vector<double> edges(p.n_mels + 2);
  for (int i = 0; i < p.n_mels + 2; ++i) {
    edges[i] = mel_to_hz(m0 + (m1 - m0) * i / (p.n_mels + 1));
  }
  return edges;
}

/// Triangular mel weights, n_mels x (n_fft/2 + 1), peak 1 at each band centre.
inline Matrix mel_filterbank(const FeatureParams& p, double sr) {
  const int n_bins = p.n_fft / 2 + 1;
  const auto edges = mel_edges(p);
  Matrix fb(p.n_mels, n_bins);
  for (int m = 0; m < p.n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = k * sr / p.n_fft;
      const double w = std::min((f - lo) / (c - lo), (hi - f) / (hi - c));
      fb(m, k) = std::max(0.0, w);
    }
  }
  return fb;
}

/// Precomputed window and filterbank for repeated log-mel extraction.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(FeatureParams p, double sr = kSampleRate)
      : params_((validate(p, sr), p)), sr_(sr), fft_(p.n_fft) {
    window_ = hann(params_.frame_len);
    filterbank_ = mel_filterbank(params_, sr_);
    // only bins inside some band contribute
    for (int m = 0; m < params_.n_mels; ++m) {
      int first = filterbank_.cols, last = -1;
      for (int k = 0; k < filterbank_.cols; ++k) {
        if (filterbank_(m, k) > 0.0) {
          first = std::min(first, k);
          last = k;
        }
      }
      support_.push_back({first, last});
    }
  }

  const FeatureParams& params() const { return params_; }

  /// n_frames x n_mels matrix of log(power + floor).
  Matrix operator()(std::span<const double> signal) const {
    require(signal.size() >= static_cast<std::size_t>(params_.frame_len),
            "log_mel: signal shorter than one frame");
    const int frames = params_.frames_for(signal.size());
    const int n_bins = params_.n_fft / 2 + 1;
    Matrix out(frames, params_.n_mels);
    RealFft::Buffers buf(params_.n_fft);
    std::fill(buf.in, buf.in + params_.n_fft, 0.0);
    std::vector<double> power(n_bins);
    for (int f = 0; f < frames; ++f) {
      const std::size_t off = static_cast<std::size_t>(f) * params_.hop;
      for (int i = 0; i < params_.frame_len; ++i) buf.in[i] = signal[off + i] * window_[i];
      fft_.execute(buf);
      for (int k = 0; k < n_bins; ++k) power[k] = buf.out[k][0] * buf.out[k][0] + buf.out[k][1] * buf.out[k][1];
      for (int m = 0; m < params_.n_mels; ++m) {
        double e = 0.0;
        for (int k = support_[m].first; k <= support_[m].second; ++k) {
          e += filterbank_(m, k) * power[k];
        }
        out(f, m) = std::log(e + params_.log_floor);
      }
    }
    return out;
  }

 private:
  FeatureParams params_;
  double sr_;
  RealFft fft_;
  std::vector<double> window_;
  Matrix filterbank_;
  std::vector<std::pair<int, int>> support_;
};

inline Matrix log_mel(std::span<const double> signal, const FeatureParams& p = {},
                      double sr = kSampleRate) {
  return LogMelExtractor(p, sr)(signal);
}

/// Orthonormal DCT-II basis, n_out x n_in.
inline Matrix dct2_basis(int n_in, int n_out) {
  Matrix basis(n_out, n_in);
  for (int k = 0; k < n_out; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / n_in) : std::sqrt(2.0 / n_in);
    for (int n = 0; n < n_in; ++n) {
      basis(k, n) = scale * std::cos(kPi * k * (2.0 * n + 1.0) / (2.0 * n_in));
    }
  }
  return basis;
}

/// Cepstral coefficients: orthonormal DCT-II along the mel axis, first n_coeffs kept.
inline Matrix mfcc(const Matrix& log_mel_matrix, int n_coeffs = 13) {
  require(n_coeffs >= 1 && n_coeffs <= log_mel_matrix.cols, "mfcc: need 1 <= n_coeffs <= n_mels");
  const Matrix basis = dct2_basis(log_mel_matrix.cols, n_coeffs);
  Matrix out(log_mel_matrix.rows, n_coeffs);
  for (int f = 0; f < log_mel_matrix.rows; ++f) {
    const auto row = log_mel_matrix.row(f);
    for (int k = 0; k < n_coeffs; ++k) {
      double acc = 0.0;
      for (int n = 0; n < log_mel_matrix.cols; ++n) acc += basis(k, n) * row[n];
      out(f, k) = acc;
    }
  }
  return out;
}

/// Inverse of the orthonormal DCT-II (requires all coefficients).
inline Matrix inverse_mfcc(const Matrix& coeffs) {
  const Matrix basis = dct2_basis(coeffs.cols, coeffs.cols);
  Matrix out(coeffs.rows, coeffs.cols);
  for (int f = 0; f < coeffs.rows; ++f) {
    for (int n = 0; n < coeffs.cols; ++n) {
      double acc = 0.0;
      for (int k = 0; k < coeffs.cols; ++k) acc += basis(k, n) * coeffs(f, k);
      out(f, n) = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Window featurization
// ---------------------------------------------------------------------------

struct SpectralFeatures {
  std::vector<Matrix> log_mel;  // one n_frames x n_mels matrix per channel
  std::vector<Matrix> mfcc;     // one n_frames x n_mfcc matrix per channel
  int frame_len = 0;
  int hop = 0;

  friend bool operator==(const SpectralFeatures&, const SpectralFeatures&) = default;
};

/// Band-passed waveform plus spectral features for one multi-channel window.
struct FeaturizedWindow {
  std::vector<std::vector<double>> waveform;  // channels x samples
  SpectralFeatures features;

  friend bool operator==(const FeaturizedWindow&, const FeaturizedWindow&) = default;
};

/// Reusable featurizer. Each channel is filtered independently from zero state.
class Featurizer {
 public:
  Featurizer(FilterSpec filter, FeatureParams features, double sr = kSampleRate)
      : filter_(filter), sections_(design_bandpass(filter, sr)), log_mel_(features, sr),
        dct_(dct2_basis(features.n_mels, features.n_mfcc)) {}

  const FilterSpec& filter() const { return filter_; }
  const FeatureParams& feature_params() const { return log_mel_.params(); }

  std::vector<double> filter_channel(std::span<const double> x) const {
    for (double v : x) require(std::isfinite(v), "bandpass: non-finite sample");
    return apply_sos(sections_, x);
  }

  std::vector<std::vector<double>> filter_channels(std::span<const std::vector<double>> channels) const {
    for (const auto& ch : channels) {
      require(ch.size() == channels.front().size(), "featurize: ragged channels");
      for (double v : ch) require(std::isfinite(v), "bandpass: non-finite sample");
    }
    return apply_sos(std::span<const Biquad>(sections_), channels);
  }

  FeaturizedWindow operator()(std::span<const std::vector<double>> channels) const {
    require(!channels.empty(), "featurize: no channels");
    FeaturizedWindow out;
    const auto& p = log_mel_.params();
    out.features.frame_len = p.frame_len;
    out.features.hop = p.hop;
    out.waveform = filter_channels(channels);
    for (const auto& ch : out.waveform) {
      Matrix lm = log_mel_(ch);
      Matrix cc(lm.rows, p.n_mfcc);
      for (int f = 0; f < lm.rows; ++f) {
        for (int k = 0; k < p.n_mfcc; ++k) {
          double acc = 0.0;
          for (int n = 0; n < lm.cols; ++n) acc += dct_(k, n) * lm(f, n);
          cc(f, k) = acc;
        }
      }
      out.features.log_mel.push_back(std::move(lm));
      out.features.mfcc.push_back(std::move(cc));
    }
    return out;
  }

 private:
  FilterSpec filter_;
  std::vector<Biquad> sections_;
  LogMelExtractor log_mel_;
  Matrix dct_;
};

// ---------------------------------------------------------------------------
// Feature dump container
//
//   bytes 0..7   magic "SLFEAT01"
//   u32          dtype (1 = float64)
//   u32          ndim
//   u64 x ndim   dims
//   payload      prod(dims) little-endian values, row-major
// ---------------------------------------------------------------------------

inline constexpr char kFeatureMagic[8] = {'S', 'L', 'F', 'E', 'A', 'T', '0', '1'};

struct ArrayFile {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
  friend bool operator==(const ArrayFile&, const ArrayFile&) = default;
};

namespace detail {
template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw RuntimeFailure("truncated binary file");
  return v;
}
}  // namespace detail

inline void write_array_file(const std::string& path, const ArrayFile& a) {
  std::uint64_t count = 1;
  for (auto d : a.dims) count *= d;
  require(count == a.values.size(), "write_array_file: dims do not match payload");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot open " + path + " for writing");
  os.write(kFeatureMagic, 8);
  detail::put_le<std::uint32_t>(os, 1);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.dims.size()));
  for (auto d : a.dims) detail::put_le<std::uint64_t>(os, d);
  for (double v : a.values) detail::put_le<double>(os, v);
  if (!os) throw RuntimeFailure("write failed: " + path);
}

inline ArrayFile read_array_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, kFeatureMagic)) {
    throw RuntimeFailure(path + ": not a feature dump");
  }
  if (detail::get_le<std::uint32_t>(is) != 1) throw RuntimeFailure(path + ": unsupported dtype");
  ArrayFile a;
  a.dims.resize(detail::get_le<std::uint32_t>(is));
  std::uint64_t count = 1;
  for (auto& d : a.dims) {
    d = detail::get_le<std::uint64_t>(is);
    count *= d;
  }
  a.values.resize(count);
  for (auto& v : a.values) v = detail::get_le<double>(is);
  return a;
}

/// Packs one featurized window as [channel][frame][mfcc..., log_mel...].
inline ArrayFile pack_features(const SpectralFeatures& f) {
  ArrayFile a;
  const auto channels = f.log_mel.size();
  const int frames = channels ? f.log_mel[0].rows : 0;
  const int width = channels ? f.mfcc[0].cols + f.log_mel[0].cols : 0;
  a.dims = {channels, static_cast<std::uint64_t>(frames), static_cast<std::uint64_t>(width)};
  for (std::size_t c = 0; c < channels; ++c) {
    for (int t = 0; t < frames; ++t) {
      for (double v : f.mfcc[c].row(t)) a.values.push_back(v);
      for (double v : f.log_mel[c].row(t)) a.values.push_back(v);
    }
  }
  return a;
}

}  // namespace sirenloc::dsp
