#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <vector>

#include "calldet/audio.hpp"
#include "calldet/errors.hpp"

namespace calldet {

constexpr double kPi = 3.14159265358979323846;

// Front-end constants. The feature dimension (40 cepstra) is the one fixed
// choice; everything else is a recorded default and travels with the model.
struct MfccConfig {
  int sample_rate_hz = 16000;
  double frame_len_sec = 0.025;
  double hop_sec = 0.010;
  int n_fft = 512;
  int n_mels = 64;
  int n_mfcc = 40;
  double fmin_hz = 50.0;
  double fmax_hz = 8000.0;  // Nyquist at the default rate
  double log_floor = 1e-10;

  int frame_len_samples() const {
    return static_cast<int>(std::llround(frame_len_sec * sample_rate_hz));
  }
  int hop_samples() const {
    return static_cast<int>(std::llround(hop_sec * sample_rate_hz));
  }

  static MfccConfig defaults_for_rate(int rate) {
    MfccConfig c;
    c.sample_rate_hz = rate;
    c.fmax_hz = rate / 2.0;
    int nfft = 1;
    while (nfft < c.frame_len_samples()) nfft <<= 1;
    c.n_fft = std::max(nfft, 512);
    return c;
  }

  void validate() const {
    if (sample_rate_hz <= 0 || frame_len_sec <= 0 || hop_sec <= 0)
      throw Error(ErrorCode::BadArgument, "non-positive framing parameter");
    if (!(fmin_hz > 0 && fmin_hz < fmax_hz && fmax_hz <= sample_rate_hz / 2.0))
      throw Error(ErrorCode::BadArgument, "need 0 < fmin < fmax <= Nyquist");
    if (n_mfcc > n_mels)
      throw Error(ErrorCode::BadArgument, "n_mfcc must not exceed n_mels");
    if (n_fft < frame_len_samples() || (n_fft & (n_fft - 1)) != 0)
      throw Error(ErrorCode::BadArgument, "n_fft must be a power of two >= frame length");
  }
};

// T x n_mfcc coefficient grid plus frame-center timestamps.
struct FeatureMatrix {
  Eigen::MatrixXd frames;               // T x n_mfcc
  std::vector<double> frame_times_sec;  // frame centers

  Eigen::Index num_frames() const { return frames.rows(); }
};

// Per-coefficient normalization statistics, stored inside models.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters with peaks equally spaced on the mel scale. Rows are
// not area-normalized; a row with no positive bin means the FFT cannot
// resolve that band.
inline Eigen::MatrixXd mel_filterbank(const MfccConfig& cfg) {
  cfg.validate();
  const int bins = cfg.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  std::vector<double> edges(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));

  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.n_mels, bins);
  const double bin_hz = static_cast<double>(cfg.sample_rate_hz) / cfg.n_fft;
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    bool any = false;
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > left && f < center)
        w = (f - left) / (center - left);
      else if (f >= center && f < right)
        w = (right - f) / (right - center);
      if (w > 0.0) {
        fb(m, k) = w;
        any = true;
      }
    }
    if (!any)
      throw Error(ErrorCode::DegenerateFilter,
                  "mel filter " + std::to_string(m) + " covers no FFT bin");
  }
  return fb;
}

// Orthonormal DCT-II rows (n_mfcc x n_mels): M * M^T = I.
inline Eigen::MatrixXd dct2_rows(int n_mfcc, int n_mels) {
  Eigen::MatrixXd m(n_mfcc, n_mels);
  for (int k = 0; k < n_mfcc; ++k) {
    const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / n_mels);
    for (int n = 0; n < n_mels; ++n)
      m(k, n) = scale * std::cos(kPi * (n + 0.5) * k / n_mels);
  }
  return m;
}

namespace detail {

// In-place iterative radix-2 FFT.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

}  // namespace detail

// Reusable extraction plan: Hann window, filterbank and DCT are built once.
class MfccExtractor {
 public:
  explicit MfccExtractor(const MfccConfig& cfg)
      : cfg_(cfg),
        filterbank_(mel_filterbank(cfg)),
        dct_(dct2_rows(cfg.n_mfcc, cfg.n_mels)),
        hann_(cfg.frame_len_samples()) {
    const int n = cfg.frame_len_samples();
    for (int i = 0; i < n; ++i)
      hann_[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
  }

  const MfccConfig& config() const { return cfg_; }

  // One-sided power spectrum of one frame starting at sample `start`.
  Eigen::VectorXd frame_power(const AudioClip& clip, std::size_t start) const {
    const int flen = cfg_.frame_len_samples();
    std::vector<std::complex<double>> buf(cfg_.n_fft, {0.0, 0.0});
    for (int i = 0; i < flen; ++i)
      buf[i] = clip.samples[start + i] * hann_[i];
    detail::fft_radix2(buf);
    Eigen::VectorXd power(cfg_.n_fft / 2 + 1);
    for (int k = 0; k <= cfg_.n_fft / 2; ++k)
      power[k] = std::norm(buf[k]);
    return power;
  }

  FeatureMatrix extract(const AudioClip& clip) const {
    if (clip.sample_rate_hz != cfg_.sample_rate_hz)
      throw Error(ErrorCode::RateMismatch,
                  "clip rate " + std::to_string(clip.sample_rate_hz) +
                      " != configured " + std::to_string(cfg_.sample_rate_hz));
    const int flen = cfg_.frame_len_samples();
    const int hop = cfg_.hop_samples();
    if (static_cast<int>(clip.samples.size()) < flen)
      throw Error(ErrorCode::TooShort, "clip shorter than one frame");
    const Eigen::Index t_count =
        1 + static_cast<Eigen::Index>((clip.samples.size() - flen) / hop);

    FeatureMatrix out;
    out.frames.resize(t_count, cfg_.n_mfcc);
    out.frame_times_sec.resize(t_count);
    for (Eigen::Index t = 0; t < t_count; ++t) {
      const std::size_t start = static_cast<std::size_t>(t) * hop;
      Eigen::VectorXd mel = filterbank_ * frame_power(clip, start);
      for (int m = 0; m < cfg_.n_mels; ++m)
        mel[m] = std::log(std::max(mel[m], cfg_.log_floor));
      out.frames.row(t) = (dct_ * mel).transpose();
      out.frame_times_sec[t] =
          (start + flen / 2.0) / cfg_.sample_rate_hz;
    }
    return out;
  }

  // Band energy series used by the spectrogram baseline: per frame, the sum
  // of power bins whose center frequency lies in [lo, hi].
  std::vector<double> band_energy(const AudioClip& clip, double lo_hz,
                                  double hi_hz) const {
    if (!(lo_hz >= 0.0 && lo_hz < hi_hz && hi_hz <= cfg_.sample_rate_hz / 2.0))
      throw Error(ErrorCode::BadBand, "need 0 <= lo < hi <= Nyquist");
    const int flen = cfg_.frame_len_samples();
    const int hop = cfg_.hop_samples();
    if (static_cast<int>(clip.samples.size()) < flen)
      throw Error(ErrorCode::TooShort, "clip shorter than one frame");
    const std::size_t t_count = 1 + (clip.samples.size() - flen) / hop;
    const double bin_hz = static_cast<double>(cfg_.sample_rate_hz) / cfg_.n_fft;
    std::vector<double> series(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
      const Eigen::VectorXd power = frame_power(clip, t * hop);
      double e = 0.0;
      for (int k = 0; k <= cfg_.n_fft / 2; ++k) {
        const double f = k * bin_hz;
        if (f >= lo_hz && f <= hi_hz) e += power[k];
      }
      series[t] = e;
    }
    return series;
  }

  std::vector<double> frame_times(std::size_t t_count) const {
    std::vector<double> times(t_count);
    for (std::size_t t = 0; t < t_count; ++t)
      times[t] = (t * cfg_.hop_samples() + cfg_.frame_len_samples() / 2.0) /
                 cfg_.sample_rate_hz;
    return times;
  }

 private:
  MfccConfig cfg_;
  Eigen::MatrixXd filterbank_;
  Eigen::MatrixXd dct_;
  std::vector<double> hann_;
};

inline FeatureMatrix compute_mfcc(const AudioClip& clip, const MfccConfig& cfg) {
  return MfccExtractor(cfg).extract(clip);
}

// Population mean/std per coefficient over every frame; std floored so
// standardization never divides by zero.
inline FeatureStats fit_stats(const std::vector<FeatureMatrix>& features) {
  constexpr double kStdFloor = 1e-6;
  if (features.empty()) throw Error(ErrorCode::Empty, "no feature matrices");
  const Eigen::Index dim = features.front().frames.cols();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(dim);
  double count = 0.0;
  for (const auto& f : features) {
    if (f.frames.cols() != dim)
      throw Error(ErrorCode::DimMismatch, "mixed feature dimensions");
    sum += f.frames.colwise().sum().transpose();
    sumsq += f.frames.array().square().matrix().colwise().sum().transpose();
    count += static_cast<double>(f.frames.rows());
  }
  if (count == 0.0) throw Error(ErrorCode::Empty, "no frames");
  FeatureStats stats;
  stats.mean = sum / count;
  stats.std = (sumsq / count - stats.mean.array().square().matrix())
                  .array()
                  .max(0.0)
                  .sqrt()
                  .max(kStdFloor)
                  .matrix();
  return stats;
}

inline FeatureMatrix standardize(const FeatureMatrix& features,
                                 const FeatureStats& stats) {
  if (features.frames.cols() != stats.mean.size() ||
      stats.mean.size() != stats.std.size())
    throw Error(ErrorCode::DimMismatch, "stats dimension mismatch");
  FeatureMatrix out;
  out.frame_times_sec = features.frame_times_sec;
  out.frames = (features.frames.rowwise() - stats.mean.transpose()).array().rowwise() /
               stats.std.transpose().array();
  return out;
}

}  // namespace calldet
