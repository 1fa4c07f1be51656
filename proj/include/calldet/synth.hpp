#pragma once

// Seeded synthetic soundscapes: pink/white noise beds, linear-FM down-sweep
// calls with Hann envelopes at a configured SNR, optional non-linear variants
// (subharmonic plus a phase-continuous mid-call frequency jump), and
// unlabeled distractors (broadband clicks, out-of-band tones). Every file is
// a pure function of (config, file index).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "calldet/audio.hpp"
#include "calldet/classes.hpp"
#include "calldet/errors.hpp"
#include "calldet/rng.hpp"

namespace calldet {

enum class NoiseKind { White, Pink };

struct SynthConfig {
  int sample_rate_hz = 16000;
  double file_duration_sec = 60.0;
  int n_files = 1;
  double calls_per_minute = 4.0;  // Poisson mean
  double call_duration_lo_sec = 0.3;
  double call_duration_hi_sec = 1.5;
  double call_f0_lo_hz = 800.0;
  double call_f0_hi_hz = 1300.0;
  double snr_db = 10.0;
  double nlp_fraction = 0.3;
  double distractor_rate_per_minute = 2.0;
  NoiseKind noise_kind = NoiseKind::Pink;
  std::uint64_t seed = 0;
  bool keep_clean_track = false;

  void validate() const {
    if (sample_rate_hz <= 0 || file_duration_sec <= 0.0 || n_files < 0)
      throw Error(ErrorCode::BadConfig, "non-positive size parameter");
    if (!(call_duration_lo_sec > 0.0 &&
          call_duration_lo_sec < call_duration_hi_sec))
      throw Error(ErrorCode::BadConfig, "degenerate call duration range");
    if (!(call_f0_lo_hz > 0.0 && call_f0_lo_hz < call_f0_hi_hz &&
          call_f0_hi_hz < sample_rate_hz / 2.0))
      throw Error(ErrorCode::BadConfig, "degenerate or out-of-range f0 range");
    if (calls_per_minute < 0.0 || distractor_rate_per_minute < 0.0)
      throw Error(ErrorCode::BadConfig, "negative event rate");
    if (!std::isfinite(snr_db))
      throw Error(ErrorCode::BadConfig, "snr must be finite");
    if (!(nlp_fraction >= 0.0 && nlp_fraction <= 1.0))
      throw Error(ErrorCode::BadConfig, "nlp_fraction outside [0, 1]");
  }
};

struct SynthLabelRow {
  std::string file;
  double start_sec = 0.0;
  double end_sec = 0.0;
  CallClass cls = CallClass::CleanCall;
};

struct SynthFile {
  std::string name;
  AudioClip clip;
  std::vector<SynthLabelRow> labels;
  std::vector<double> clean_track;  // call events only, when requested
};

namespace synth_detail {

constexpr double kNoiseRms = 0.05;
constexpr double kEdgeMarginSec = 0.4;
constexpr double kEventGapSec = 0.4;
constexpr double kSweepFraction = 0.2;   // f_end = 0.8 * f0
constexpr double kNlpJumpFactor = 1.3;   // instantaneous frequency jump
constexpr double kSubharmonicGain = 0.5;
constexpr double kTwoPi = 6.283185307179586476925;

inline void scale_to_rms(std::vector<double>& v, double target) {
  double sum = 0.0;
  for (double s : v) sum += s * s;
  const double rms = std::sqrt(sum / static_cast<double>(v.size()));
  if (rms > 0.0) {
    const double g = target / rms;
    for (double& s : v) s *= g;
  }
}

// Paul Kellet's pink-noise filter over white normals.
inline std::vector<double> noise_track(std::size_t n, NoiseKind kind, Rng& rng) {
  std::vector<double> out(n);
  if (kind == NoiseKind::White) {
    for (double& s : out) s = rng.normal();
  } else {
    double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
    for (double& s : out) {
      const double w = rng.normal();
      b0 = 0.99886 * b0 + w * 0.0555179;
      b1 = 0.99332 * b1 + w * 0.0750759;
      b2 = 0.96900 * b2 + w * 0.1538520;
      b3 = 0.86650 * b3 + w * 0.3104856;
      b4 = 0.55000 * b4 + w * 0.5329522;
      b5 = -0.7616 * b5 - w * 0.0168980;
      s = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
      b6 = w * 0.115926;
    }
  }
  scale_to_rms(out, kNoiseRms);
  return out;
}

inline std::vector<double> call_samples(double dur_sec, double f0_hz, bool nlp,
                                        int rate, double target_rms) {
  const std::size_t n = static_cast<std::size_t>(std::llround(dur_sec * rate));
  std::vector<double> out(n);
  const double f1_hz = f0_hz * (1.0 - kSweepFraction);
  double phase = 0.0, sub_phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n);
    double f = f0_hz + (f1_hz - f0_hz) * u;
    if (nlp && u >= 0.5) f *= kNlpJumpFactor;
    phase += kTwoPi * f / rate;
    const double env = 0.5 - 0.5 * std::cos(kTwoPi * u);
    double s = std::sin(phase);
    if (nlp) {
      sub_phase += kTwoPi * (f / 2.0) / rate;
      s += kSubharmonicGain * std::sin(sub_phase);
    }
    out[i] = env * s;
  }
  scale_to_rms(out, target_rms);
  return out;
}

inline std::vector<double> click_samples(double dur_sec, int rate,
                                         double target_rms, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(std::llround(dur_sec * rate));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n);
    out[i] = (0.5 - 0.5 * std::cos(kTwoPi * u)) * rng.normal();
  }
  scale_to_rms(out, target_rms);
  return out;
}

inline std::vector<double> tone_samples(double dur_sec, double freq_hz,
                                        int rate, double target_rms) {
  const std::size_t n = static_cast<std::size_t>(std::llround(dur_sec * rate));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n);
    out[i] = (0.5 - 0.5 * std::cos(kTwoPi * u)) *
             std::sin(kTwoPi * freq_hz * i / rate);
  }
  scale_to_rms(out, target_rms);
  return out;
}

struct Placement {
  double start = 0.0, dur = 0.0;
};

// Rejection placement keeping events inside the edge margins and separated
// by at least kEventGapSec; failures after 200 attempts drop the event.
inline bool place_event(double dur, double file_dur,
                        const std::vector<Placement>& taken, Rng& rng,
                        Placement& out) {
  const double lo = kEdgeMarginSec;
  const double hi = file_dur - kEdgeMarginSec - dur;
  if (hi <= lo) return false;
  for (int attempt = 0; attempt < 200; ++attempt) {
    const double start = rng.uniform(lo, hi);
    bool clear = true;
    for (const Placement& p : taken) {
      if (start < p.start + p.dur + kEventGapSec &&
          p.start < start + dur + kEventGapSec) {
        clear = false;
        break;
      }
    }
    if (clear) {
      out = {start, dur};
      return true;
    }
  }
  return false;
}

}  // namespace synth_detail

inline std::string synth_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%04zu.wav", index);
  return buf;
}

inline SynthFile generate_file(const SynthConfig& cfg, std::size_t index) {
  namespace sd = synth_detail;
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, index));
  const int rate = cfg.sample_rate_hz;
  const std::size_t n =
      static_cast<std::size_t>(std::llround(cfg.file_duration_sec * rate));

  SynthFile out;
  out.name = synth_file_name(index);
  out.clip.sample_rate_hz = rate;
  out.clip.samples = sd::noise_track(n, cfg.noise_kind, rng);
  if (cfg.keep_clean_track) out.clean_track.assign(n, 0.0);

  const double event_rms =
      sd::kNoiseRms * std::pow(10.0, cfg.snr_db / 20.0);
  const double minutes = cfg.file_duration_sec / 60.0;
  std::vector<sd::Placement> taken;

  const auto mix = [&](const std::vector<double>& ev, double start_sec,
                       bool labeled_call) {
    const std::size_t s0 =
        static_cast<std::size_t>(std::llround(start_sec * rate));
    for (std::size_t i = 0; i < ev.size() && s0 + i < n; ++i) {
      out.clip.samples[s0 + i] += ev[i];
      if (labeled_call && cfg.keep_clean_track) out.clean_track[s0 + i] += ev[i];
    }
  };

  const int n_calls = rng.poisson(cfg.calls_per_minute * minutes);
  for (int c = 0; c < n_calls; ++c) {
    const double f0 = rng.uniform(cfg.call_f0_lo_hz, cfg.call_f0_hi_hz);
    const bool nlp = rng.uniform() < cfg.nlp_fraction;
    const double dur =
        rng.uniform(cfg.call_duration_lo_sec, cfg.call_duration_hi_sec);
    sd::Placement p;
    if (!sd::place_event(dur, cfg.file_duration_sec, taken, rng, p)) continue;
    taken.push_back(p);
    mix(sd::call_samples(dur, f0, nlp, rate, event_rms), p.start, true);
    out.labels.push_back({out.name, p.start, p.start + dur,
                          nlp ? CallClass::NonlinearCall
                              : CallClass::CleanCall});
  }

  const int n_distractors =
      rng.poisson(cfg.distractor_rate_per_minute * minutes);
  for (int d = 0; d < n_distractors; ++d) {
    const bool click = rng.uniform() < 0.5;
    if (click) {
      const double dur = rng.uniform(0.005, 0.015);
      sd::Placement p;
      if (!sd::place_event(dur, cfg.file_duration_sec, taken, rng, p)) continue;
      taken.push_back(p);
      mix(sd::click_samples(dur, rate, event_rms, rng), p.start, false);
    } else {
      const double dur = rng.uniform(0.1, 0.4);
      const double freq =
          rng.uniform(3000.0, std::min(7000.0, 0.45 * rate));
      sd::Placement p;
      if (!sd::place_event(dur, cfg.file_duration_sec, taken, rng, p)) continue;
      taken.push_back(p);
      mix(sd::tone_samples(dur, freq, rate, event_rms), p.start, false);
    }
  }

  std::sort(out.labels.begin(), out.labels.end(),
            [](const SynthLabelRow& a, const SynthLabelRow& b) {
              return a.start_sec < b.start_sec;
            });
  return out;
}

inline void generate_dataset(const SynthConfig& cfg,
                             const std::function<void(SynthFile&&)>& sink) {
  cfg.validate();
  for (int i = 0; i < cfg.n_files; ++i)
    sink(generate_file(cfg, static_cast<std::size_t>(i)));
}

inline std::vector<SynthFile> generate_dataset(const SynthConfig& cfg) {
  std::vector<SynthFile> files;
  files.reserve(static_cast<std::size_t>(cfg.n_files));
  generate_dataset(cfg, [&](SynthFile&& f) { files.push_back(std::move(f)); });
  return files;
}

constexpr int kBenchmarkFiles = 50;
constexpr int kBenchmarkTrainFiles = 40;

// Canonical acceptance corpus: 50 one-minute files at defaults, first 40 for
// training and the last 10 for validation.
inline SynthConfig standard_benchmark(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n_files = kBenchmarkFiles;
  cfg.seed = seed;
  return cfg;
}

}  // namespace calldet
