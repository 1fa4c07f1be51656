#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <vector>

#include "calldet/features.hpp"
#include "calldet/rng.hpp"
#include "helpers.hpp"

using namespace calldet;

namespace {

AudioClip noise_clip(std::size_t n, std::uint64_t seed, int rate = 16000) {
  AudioClip c;
  c.sample_rate_hz = rate;
  c.samples.resize(n);
  Rng rng(seed);
  for (double& s : c.samples) s = 0.3 * rng.normal();
  return c;
}

AudioClip tone_clip(double freq, double sec, int rate = 16000) {
  AudioClip c;
  c.sample_rate_hz = rate;
  c.samples.resize(static_cast<std::size_t>(sec * rate));
  for (std::size_t i = 0; i < c.samples.size(); ++i)
    c.samples[i] = 0.5 * std::sin(2.0 * kPi * freq * i / rate);
  return c;
}

// quadratic-time reference transform, written independently of the fft
std::vector<std::complex<double>> naive_dft(
    const std::vector<std::complex<double>>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<long double> acc{0.0L, 0.0L};
    for (std::size_t j = 0; j < n; ++j) {
      const long double ang = -2.0L * static_cast<long double>(kPi) *
                              static_cast<long double>(k) *
                              static_cast<long double>(j) /
                              static_cast<long double>(n);
      acc += std::complex<long double>(x[j].real(), x[j].imag()) *
             std::complex<long double>(std::cos(ang), std::sin(ang));
    }
    out[k] = {static_cast<double>(acc.real()), static_cast<double>(acc.imag())};
  }
  return out;
}

}  // namespace

TEST_CASE("fft matches the quadratic-time transform", "[features]") {
  Rng rng(101);
  for (std::size_t n : {8u, 64u, 256u}) {
    std::vector<std::complex<double>> x(n);
    for (auto& v : x) v = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    auto ref = naive_dft(x);
    auto fast = x;
    detail::fft_radix2(fast);
    double max_err = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      max_err = std::max(max_err, std::abs(fast[k] - ref[k]));
    CHECK(max_err < 1e-9);
  }
}

TEST_CASE("frame_power matches a windowed reference spectrum", "[features]") {
  MfccConfig cfg;
  MfccExtractor ex(cfg);
  AudioClip clip = noise_clip(2048, 7);
  const int flen = cfg.frame_len_samples();
  std::vector<std::complex<double>> buf(cfg.n_fft, {0.0, 0.0});
  for (int i = 0; i < flen; ++i) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * kPi * i / flen);
    buf[i] = clip.samples[160 + i] * w;
  }
  auto ref = naive_dft(buf);
  const Eigen::VectorXd power = ex.frame_power(clip, 160);
  REQUIRE(power.size() == cfg.n_fft / 2 + 1);
  for (int k = 0; k <= cfg.n_fft / 2; ++k)
    CHECK(power[k] == Catch::Approx(std::norm(ref[k])).margin(1e-9));
}

TEST_CASE("dct rows are orthonormal", "[features]") {
  for (auto [n_mfcc, n_mels] : {std::pair{40, 64}, {13, 26}, {8, 8}}) {
    const Eigen::MatrixXd m = dct2_rows(n_mfcc, n_mels);
    const Eigen::MatrixXd gram = m * m.transpose();
    const double err =
        (gram - Eigen::MatrixXd::Identity(n_mfcc, n_mfcc)).cwiseAbs().maxCoeff();
    CHECK(err < 1e-12);
  }
}

TEST_CASE("mel filterbank shape and coverage", "[features]") {
  MfccConfig cfg;
  const Eigen::MatrixXd fb = mel_filterbank(cfg);
  REQUIRE(fb.rows() == cfg.n_mels);
  REQUIRE(fb.cols() == cfg.n_fft / 2 + 1);
  CHECK(fb.minCoeff() >= 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) CHECK(fb.row(m).sum() > 0.0);

  // peaks move up in frequency with the filter index
  int prev_peak = -1;
  for (int m = 0; m < cfg.n_mels; ++m) {
    int peak = 0;
    fb.row(m).maxCoeff(&peak);
    CHECK(peak >= prev_peak);
    prev_peak = peak;
  }
}

TEST_CASE("degenerate filterbank is rejected", "[features]") {
  // 200 filters over [50, 8000] leave low-frequency triangles narrower than
  // one 31.25 Hz bin
  MfccConfig cfg;
  cfg.n_mels = 200;
  cfg.n_mfcc = 13;
  CHECK_THROWS_MATCHES(mel_filterbank(cfg), Error,
                       ErrorHasCode(ErrorCode::DegenerateFilter));
}

TEST_CASE("config validation", "[features]") {
  MfccConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  SECTION("n_mfcc above n_mels") {
    cfg.n_mfcc = cfg.n_mels + 1;
    CHECK_THROWS_MATCHES(cfg.validate(), Error,
                         ErrorHasCode(ErrorCode::BadArgument));
  }
  SECTION("fmax above nyquist") {
    cfg.fmax_hz = 9000.0;
    CHECK_THROWS_MATCHES(cfg.validate(), Error,
                         ErrorHasCode(ErrorCode::BadArgument));
  }
  SECTION("n_fft not a power of two") {
    cfg.n_fft = 500;
    CHECK_THROWS_MATCHES(cfg.validate(), Error,
                         ErrorHasCode(ErrorCode::BadArgument));
  }
}

TEST_CASE("frame times and counts", "[features]") {
  MfccConfig cfg;  // 25 ms frames, 10 ms hop at 16 kHz
  REQUIRE(cfg.frame_len_samples() == 400);
  REQUIRE(cfg.hop_samples() == 160);
  AudioClip clip = noise_clip(16000, 3);  // one second
  const FeatureMatrix f = compute_mfcc(clip, cfg);
  // 1 + floor((16000 - 400) / 160) frames
  REQUIRE(f.frames.rows() == 98);
  REQUIRE(f.frames.cols() == cfg.n_mfcc);
  REQUIRE(f.frame_times_sec.size() == 98);
  for (Eigen::Index t = 0; t < 98; ++t)
    CHECK(f.frame_times_sec[t] ==
          Catch::Approx(0.0125 + 0.010 * static_cast<double>(t)).margin(1e-12));

  MfccExtractor ex(cfg);
  auto times = ex.frame_times(98);
  for (std::size_t t = 0; t < times.size(); ++t)
    CHECK(times[t] == f.frame_times_sec[t]);
}

TEST_CASE("extract errors", "[features]") {
  MfccConfig cfg;
  MfccExtractor ex(cfg);
  SECTION("rate mismatch") {
    AudioClip clip = noise_clip(16000, 1, 8000);
    CHECK_THROWS_MATCHES(ex.extract(clip), Error,
                         ErrorHasCode(ErrorCode::RateMismatch));
  }
  SECTION("shorter than one frame") {
    AudioClip clip = noise_clip(399, 1);
    CHECK_THROWS_MATCHES(ex.extract(clip), Error,
                         ErrorHasCode(ErrorCode::TooShort));
  }
}

TEST_CASE("silence yields finite features at the log floor", "[features]") {
  MfccConfig cfg;
  AudioClip clip;
  clip.sample_rate_hz = 16000;
  clip.samples.assign(16000, 0.0);
  const FeatureMatrix f = compute_mfcc(clip, cfg);
  CHECK(f.frames.allFinite());
  // all mel channels sit at log(log_floor), so only the dc coefficient is
  // nonzero
  for (Eigen::Index t = 0; t < f.frames.rows(); ++t)
    for (int k = 1; k < cfg.n_mfcc; ++k)
      CHECK(std::abs(f.frames(t, k)) < 1e-9);
}

TEST_CASE("band energy concentrates around a pure tone", "[features]") {
  MfccConfig cfg;
  MfccExtractor ex(cfg);
  AudioClip clip = tone_clip(1000.0, 0.5);
  auto in_band = ex.band_energy(clip, 900.0, 1100.0);
  auto total = ex.band_energy(clip, 0.0, 8000.0);
  REQUIRE(in_band.size() == total.size());
  double sum_in = 0.0, sum_total = 0.0;
  for (std::size_t t = 0; t < in_band.size(); ++t) {
    sum_in += in_band[t];
    sum_total += total[t];
  }
  CHECK(sum_in > 0.9 * sum_total);

  auto off_band = ex.band_energy(clip, 3000.0, 5000.0);
  double sum_off = 0.0;
  for (double e : off_band) sum_off += e;
  CHECK(sum_off < 0.01 * sum_total);
}

TEST_CASE("band energy rejects bad bands", "[features]") {
  MfccConfig cfg;
  MfccExtractor ex(cfg);
  AudioClip clip = noise_clip(16000, 2);
  CHECK_THROWS_MATCHES(ex.band_energy(clip, 500.0, 400.0), Error,
                       ErrorHasCode(ErrorCode::BadBand));
  CHECK_THROWS_MATCHES(ex.band_energy(clip, -1.0, 400.0), Error,
                       ErrorHasCode(ErrorCode::BadBand));
  CHECK_THROWS_MATCHES(ex.band_energy(clip, 500.0, 8001.0), Error,
                       ErrorHasCode(ErrorCode::BadBand));
}

TEST_CASE("fit_stats matches a long double reference", "[features]") {
  Rng rng(17);
  std::vector<FeatureMatrix> mats;
  for (int i = 0; i < 3; ++i) {
    FeatureMatrix f;
    f.frames.resize(50 + 10 * i, 6);
    for (Eigen::Index r = 0; r < f.frames.rows(); ++r)
      for (Eigen::Index c = 0; c < 6; ++c)
        f.frames(r, c) = rng.uniform(-5.0, 5.0) + 10.0 * static_cast<double>(c);
    mats.push_back(std::move(f));
  }
  const FeatureStats st = fit_stats(mats);
  REQUIRE(st.mean.size() == 6);
  REQUIRE(st.std.size() == 6);

  for (int c = 0; c < 6; ++c) {
    long double sum = 0.0L;
    long long n = 0;
    for (const auto& f : mats)
      for (Eigen::Index r = 0; r < f.frames.rows(); ++r) {
        sum += f.frames(r, c);
        ++n;
      }
    const long double mean = sum / n;
    long double ss = 0.0L;
    for (const auto& f : mats)
      for (Eigen::Index r = 0; r < f.frames.rows(); ++r) {
        const long double d = f.frames(r, c) - mean;
        ss += d * d;
      }
    const long double sd = std::sqrt(ss / n);
    CHECK(st.mean[c] == Catch::Approx(static_cast<double>(mean)).margin(1e-9));
    CHECK(st.std[c] == Catch::Approx(static_cast<double>(sd)).margin(1e-9));
  }

  // standardizing the fitted data recenters and rescales it
  FeatureMatrix all;
  all.frames.resize(mats[0].frames.rows() + mats[1].frames.rows() +
                        mats[2].frames.rows(),
                    6);
  Eigen::Index row = 0;
  for (const auto& f : mats) {
    all.frames.middleRows(row, f.frames.rows()) = f.frames;
    row += f.frames.rows();
  }
  const FeatureMatrix z = standardize(all, st);
  for (int c = 0; c < 6; ++c) {
    CHECK(z.frames.col(c).mean() == Catch::Approx(0.0).margin(1e-10));
    const double var =
        z.frames.col(c).squaredNorm() / static_cast<double>(z.frames.rows());
    CHECK(var == Catch::Approx(1.0).margin(1e-10));
  }
}

TEST_CASE("fit_stats guards degenerate input", "[features]") {
  CHECK_THROWS_MATCHES(fit_stats({}), Error, ErrorHasCode(ErrorCode::Empty));
}

TEST_CASE("standardize dimension check", "[features]") {
  FeatureMatrix f;
  f.frames.resize(4, 3);
  f.frames.setZero();
  f.frame_times_sec = {0.0, 0.1, 0.2, 0.3};
  FeatureStats st;
  st.mean = Eigen::VectorXd::Zero(5);
  st.std = Eigen::VectorXd::Ones(5);
  CHECK_THROWS_MATCHES(standardize(f, st), Error,
                       ErrorHasCode(ErrorCode::DimMismatch));
}

TEST_CASE("extraction is deterministic", "[features]") {
  MfccConfig cfg;
  AudioClip clip = noise_clip(8000, 11);
  const FeatureMatrix a = compute_mfcc(clip, cfg);
  const FeatureMatrix b = compute_mfcc(clip, cfg);
  CHECK((a.frames - b.frames).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mel scale formula", "[features]") {
  CHECK(hz_to_mel(700.0) == Catch::Approx(2595.0 * std::log10(2.0)).margin(1e-12));
  CHECK(hz_to_mel(700.0) == Catch::Approx(781.17).margin(0.01));
  CHECK(hz_to_mel(0.0) == 0.0);
  for (double f : {50.0, 313.7, 1000.0, 4000.0, 7999.0})
    CHECK(mel_to_hz(hz_to_mel(f)) == Catch::Approx(f).margin(1e-9));
}

TEST_CASE("one mel band per fft bin is impossible at 512 bands", "[features]") {
  MfccConfig cfg;
  cfg.n_mels = 512;
  cfg.n_mfcc = 40;
  CHECK_THROWS_MATCHES(mel_filterbank(cfg), Error,
                       ErrorHasCode(ErrorCode::DegenerateFilter));
}

TEST_CASE("sine at a filter center dominates distant filters", "[features]") {
  const MfccConfig cfg;
  const int m = 20;
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  const double center_hz =
      mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (cfg.n_mels + 1));
  const AudioClip clip = tone_clip(center_hz, 0.5);

  const Eigen::MatrixXd fb = mel_filterbank(cfg);
  const MfccExtractor ex(cfg);
  const int flen = cfg.frame_len_samples();

  // reference spectrum from the quadratic-time transform
  std::vector<std::complex<double>> buf(cfg.n_fft, {0.0, 0.0});
  for (int i = 0; i < flen; ++i) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * kPi * i / flen);
    buf[i] = clip.samples[i] * w;
  }
  const auto ref = naive_dft(buf);
  Eigen::VectorXd ref_power(cfg.n_fft / 2 + 1);
  for (int k = 0; k <= cfg.n_fft / 2; ++k) ref_power[k] = std::norm(ref[k]);

  const Eigen::VectorXd power = ex.frame_power(clip, 0);
  for (const Eigen::VectorXd* spec :
       std::initializer_list<const Eigen::VectorXd*>{&power, &ref_power}) {
    Eigen::VectorXd mel = fb * *spec;
    for (int j = 0; j < cfg.n_mels; ++j)
      mel[j] = std::log(std::max(mel[j], cfg.log_floor));
    for (int j = 0; j < cfg.n_mels; ++j) {
      if (std::abs(j - m) < 2) continue;
      CHECK(mel[m] > mel[j]);
    }
  }
}

TEST_CASE("scaling the waveform moves only the first coefficient",
          "[features]") {
  const MfccConfig cfg;
  AudioClip clip = noise_clip(8000, 23);
  AudioClip scaled = clip;
  const double k = 3.7;
  for (double& s : scaled.samples) s *= k;

  const FeatureMatrix a = compute_mfcc(clip, cfg);
  const FeatureMatrix b = compute_mfcc(scaled, cfg);
  REQUIRE(a.frames.rows() == b.frames.rows());

  // orthonormal DCT row 0 is 1/sqrt(n_mels) * ones, so a uniform log shift
  // of log(k^2) lands entirely on coefficient 0
  const double expected_shift =
      std::sqrt(1.0 / cfg.n_mels) * cfg.n_mels * 2.0 * std::log(k);
  for (Eigen::Index t = 0; t < a.frames.rows(); ++t) {
    CHECK(b.frames(t, 0) - a.frames(t, 0) ==
          Catch::Approx(expected_shift).margin(1e-9));
    for (Eigen::Index c = 1; c < a.frames.cols(); ++c)
      CHECK(std::abs(b.frames(t, c) - a.frames(t, c)) < 1e-9);
  }
}

TEST_CASE("windowed frame obeys parseval", "[features]") {
  const MfccConfig cfg;
  const MfccExtractor ex(cfg);
  const AudioClip clip = noise_clip(2048, 31);
  const int flen = cfg.frame_len_samples();

  for (std::size_t start : {std::size_t{0}, std::size_t{480}}) {
    const Eigen::VectorXd power = ex.frame_power(clip, start);
    long double full = power[0] + power[cfg.n_fft / 2];
    for (int k = 1; k < cfg.n_fft / 2; ++k) full += 2.0L * power[k];

    long double energy = 0.0L;
    for (int i = 0; i < flen; ++i) {
      const long double w = 0.5L - 0.5L * std::cos(2.0L * static_cast<long double>(kPi) * i / flen);
      const long double s = clip.samples[start + i] * w;
      energy += s * s;
    }
    const long double expected = static_cast<long double>(cfg.n_fft) * energy;
    CHECK(static_cast<double>(std::abs(full - expected) / expected) < 1e-9);
  }
}
