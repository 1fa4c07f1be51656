#pragma once

// Posterior-to-segment decoding: plain thresholding, a bigram-Viterbi beam
// search over the binary state space, the band-energy baseline, and
// IoU-greedy event matching.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "calldet/errors.hpp"
#include "calldet/features.hpp"

namespace calldet {

// Per-frame activity posteriors for one window.
struct FramePosterior {
  std::vector<double> probs;            // strictly inside (0, 1)
  std::vector<double> frame_times_sec;  // frame centers, strictly increasing
};

struct CallSegment {
  double start_sec = 0.0;
  double end_sec = 0.0;
  double score = 0.0;  // mean posterior, or mean band energy for the baseline
};

struct DecodeConfig {
  double threshold = 0.5;
  double min_duration_sec = 0.10;
  double merge_gap_sec = 0.15;
  int beam_width = 8;
  // log A(prev, next) over {inactive, active}; sticky defaults
  std::array<std::array<double, 2>, 2> transition_logprob{
      {{std::log(0.99), std::log(0.01)}, {std::log(0.05), std::log(0.95)}}};

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0))
      throw Error(ErrorCode::BadArgument, "threshold outside [0, 1]");
    if (min_duration_sec < 0.0 || merge_gap_sec < 0.0)
      throw Error(ErrorCode::BadArgument, "negative duration filter");
    if (beam_width < 1)
      throw Error(ErrorCode::BadArgument, "beam_width must be >= 1");
    for (const auto& row : transition_logprob) {
      const double sum = std::exp(row[0]) + std::exp(row[1]);
      if (std::abs(sum - 1.0) > 1e-9)
        throw Error(ErrorCode::BadArgument,
                    "transition row sums to " + std::to_string(sum));
    }
  }
};

namespace decode_detail {

inline double half_step(const std::vector<double>& times) {
  return times.size() >= 2 ? (times[1] - times[0]) / 2.0 : 0.0;
}

// Maximal runs of active frames -> frame-edge segments; merge gaps shorter
// than merge_gap, drop segments shorter than min_duration, then score each
// survivor as the mean of `source` over its covered frames.
inline std::vector<CallSegment> runs_to_segments(
    const std::vector<char>& active, const std::vector<double>& source,
    const std::vector<double>& times, const DecodeConfig& cfg) {
  struct Run {
    std::size_t first, last;
    double start, end;
  };
  const double hs = half_step(times);
  std::vector<Run> runs;
  for (std::size_t t = 0; t < active.size(); ++t) {
    if (!active[t]) continue;
    if (!runs.empty() && runs.back().last + 1 == t) {
      runs.back().last = t;
      runs.back().end = times[t] + hs;
    } else {
      runs.push_back({t, t, times[t] - hs, times[t] + hs});
    }
  }
  std::vector<Run> merged;
  for (const Run& r : runs) {
    if (!merged.empty() && r.start - merged.back().end < cfg.merge_gap_sec) {
      merged.back().last = r.last;
      merged.back().end = r.end;
    } else {
      merged.push_back(r);
    }
  }
  std::vector<CallSegment> out;
  for (const Run& r : merged) {
    const double dur = r.end - r.start;
    if (dur <= 0.0 || dur < cfg.min_duration_sec) continue;
    double sum = 0.0;
    for (std::size_t t = r.first; t <= r.last; ++t) sum += source[t];
    out.push_back({r.start, r.end, sum / static_cast<double>(r.last - r.first + 1)});
  }
  return out;
}

inline void check_posterior(const FramePosterior& post) {
  if (post.probs.size() != post.frame_times_sec.size())
    throw Error(ErrorCode::LengthMismatch, "probs vs frame times");
}

}  // namespace decode_detail

inline std::vector<CallSegment> decode_threshold(const FramePosterior& post,
                                                 const DecodeConfig& cfg) {
  cfg.validate();
  decode_detail::check_posterior(post);
  std::vector<char> active(post.probs.size());
  for (std::size_t t = 0; t < post.probs.size(); ++t)
    active[t] = post.probs[t] >= cfg.threshold ? 1 : 0;
  return decode_detail::runs_to_segments(active, post.probs,
                                         post.frame_times_sec, cfg);
}

struct BeamResult {
  std::vector<int> states;
  std::vector<CallSegment> segments;
};

// Beam search for argmax_c sum_t [log p_t(c_t) + log A(c_{t-1}, c_t)] with a
// uniform prior at the first frame. Prefixes ending in the same state are
// recombined, so over the binary state space any beam_width >= 2 is exact
// Viterbi; beam_width 1 degrades to the greedy path. Ties prefer the active
// state, matching decode_threshold's >= convention when transitions cancel.
inline BeamResult decode_beam(const FramePosterior& post,
                              const DecodeConfig& cfg) {
  cfg.validate();
  decode_detail::check_posterior(post);
  const std::size_t T = post.probs.size();
  BeamResult result;
  if (T == 0) return result;

  const auto logp = [&](std::size_t t, int s) {
    const double p = s == 1 ? post.probs[t] : 1.0 - post.probs[t];
    return std::log(std::max(p, 1e-300));
  };
  constexpr double kDead = -std::numeric_limits<double>::infinity();
  std::vector<std::array<double, 2>> score(T);
  std::vector<std::array<int, 2>> back(T);
  std::array<bool, 2> alive{true, true};
  score[0] = {logp(0, 0) + std::log(0.5), logp(0, 1) + std::log(0.5)};
  back[0] = {-1, -1};
  const auto prune = [&](std::size_t t) {
    if (cfg.beam_width >= 2) return;
    const int keep = score[t][1] >= score[t][0] ? 1 : 0;
    alive = {keep == 0, keep == 1};
  };
  prune(0);
  for (std::size_t t = 1; t < T; ++t) {
    for (int s = 0; s < 2; ++s) {
      double best = kDead;
      int bp = -1;
      for (int prev = 0; prev < 2; ++prev) {
        if (!alive[prev]) continue;
        const double cand = score[t - 1][prev] + cfg.transition_logprob[prev][s];
        if (cand >= best) {
          best = cand;
          bp = prev;
        }
      }
      score[t][s] = best + logp(t, s);
      back[t][s] = bp;
    }
    alive = {true, true};
    prune(t);
  }
  int state = alive[1] && (!alive[0] || score[T - 1][1] >= score[T - 1][0]) ? 1 : 0;
  result.states.resize(T);
  for (std::size_t t = T; t-- > 0;) {
    result.states[t] = state;
    state = back[t][state];
  }
  std::vector<char> active(T);
  for (std::size_t t = 0; t < T; ++t) active[t] = result.states[t] ? 1 : 0;
  result.segments = decode_detail::runs_to_segments(active, post.probs,
                                                    post.frame_times_sec, cfg);
  return result;
}

// Spectrogram-energy baseline: threshold the in-band power series at
// mean + k_sigma * std of the clip itself, then apply the same post-filters.
inline std::vector<CallSegment> energy_band_detect(const AudioClip& clip,
                                                   double band_lo_hz,
                                                   double band_hi_hz,
                                                   double k_sigma,
                                                   const DecodeConfig& cfg) {
  cfg.validate();
  const MfccExtractor ex(MfccConfig::defaults_for_rate(clip.sample_rate_hz));
  const std::vector<double> energy = ex.band_energy(clip, band_lo_hz, band_hi_hz);
  const std::vector<double> times = ex.frame_times(energy.size());
  double mean = 0.0;
  for (double e : energy) mean += e;
  mean /= static_cast<double>(energy.size());
  double var = 0.0;
  for (double e : energy) var += (e - mean) * (e - mean);
  var /= static_cast<double>(energy.size());
  const double thr = mean + k_sigma * std::sqrt(var);
  std::vector<char> active(energy.size());
  for (std::size_t t = 0; t < energy.size(); ++t)
    active[t] = energy[t] > thr ? 1 : 0;
  return decode_detail::runs_to_segments(active, energy, times, cfg);
}

struct MatchCounts {
  std::size_t hits = 0;
  std::size_t misses = 0;
  std::size_t false_alarms = 0;
};

namespace decode_detail {

inline void check_sorted(const std::vector<CallSegment>& segs,
                         const char* which) {
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (segs[i].end_sec <= segs[i].start_sec)
      throw Error(ErrorCode::UnsortedInput,
                  std::string(which) + ": empty or inverted segment");
    if (i > 0 && segs[i].start_sec < segs[i - 1].end_sec)
      throw Error(ErrorCode::UnsortedInput,
                  std::string(which) + ": overlapping or unsorted segments");
  }
}

inline double interval_iou(const CallSegment& a, const CallSegment& b) {
  const double inter = std::min(a.end_sec, b.end_sec) -
                       std::max(a.start_sec, b.start_sec);
  if (inter <= 0.0) return 0.0;
  const double uni = std::max(a.end_sec, b.end_sec) -
                     std::min(a.start_sec, b.start_sec);
  return inter / uni;
}

}  // namespace decode_detail

struct MatchDetail {
  std::vector<char> predicted_matched;
  std::vector<char> reference_matched;
};

// Greedy one-to-one matching by descending IoU; deterministic tie-break on
// (predicted index, reference index).
inline MatchDetail match_events_detail(const std::vector<CallSegment>& predicted,
                                       const std::vector<CallSegment>& reference,
                                       double iou_min = 0.3) {
  decode_detail::check_sorted(predicted, "predicted");
  decode_detail::check_sorted(reference, "reference");
  struct Pair {
    double iou;
    std::size_t p, r;
  };
  std::vector<Pair> pairs;
  for (std::size_t p = 0; p < predicted.size(); ++p)
    for (std::size_t r = 0; r < reference.size(); ++r) {
      const double iou = decode_detail::interval_iou(predicted[p], reference[r]);
      if (iou > 0.0 && iou >= iou_min) pairs.push_back({iou, p, r});
    }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.r < b.r;
  });
  MatchDetail detail;
  detail.predicted_matched.assign(predicted.size(), 0);
  detail.reference_matched.assign(reference.size(), 0);
  for (const Pair& pr : pairs) {
    if (detail.predicted_matched[pr.p] || detail.reference_matched[pr.r])
      continue;
    detail.predicted_matched[pr.p] = detail.reference_matched[pr.r] = 1;
  }
  return detail;
}

inline MatchCounts match_events(const std::vector<CallSegment>& predicted,
                                const std::vector<CallSegment>& reference,
                                double iou_min = 0.3) {
  const MatchDetail detail = match_events_detail(predicted, reference, iou_min);
  MatchCounts counts;
  for (char m : detail.predicted_matched)
    if (m) ++counts.hits;
  counts.misses = reference.size() - counts.hits;
  counts.false_alarms = predicted.size() - counts.hits;
  return counts;
}

}  // namespace calldet
