#pragma once

// Evaluation quantities. Statistics that can be undefined (empty
// conditioning set, zero variance, vacuous precision) come back as optionals
// or carry explicit flags; nothing is silently reported as 0.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "calldet/decoder.hpp"
#include "calldet/errors.hpp"

namespace calldet {

inline double instance_accuracy(const std::vector<int>& pred,
                                const std::vector<int>& labels) {
  if (pred.size() != labels.size())
    throw Error(ErrorCode::LengthMismatch, "pred vs labels");
  if (pred.empty()) throw Error(ErrorCode::Empty, "no frames");
  std::size_t matches = 0;
  for (std::size_t t = 0; t < pred.size(); ++t)
    if ((pred[t] != 0) == (labels[t] != 0)) ++matches;
  return static_cast<double>(matches) / static_cast<double>(pred.size());
}

// Recall on positive frames; empty when no frame is labeled positive.
inline std::optional<double> conditional_accuracy(
    const std::vector<int>& pred, const std::vector<int>& labels) {
  if (pred.size() != labels.size())
    throw Error(ErrorCode::LengthMismatch, "pred vs labels");
  std::size_t positives = 0, hits = 0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] == 0) continue;
    ++positives;
    if (pred[t] != 0) ++hits;
  }
  if (positives == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(positives);
}

enum class CorrKind { Pearson, Spearman };

namespace metric_detail {

inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> pearson(const std::vector<double>& x,
                                     const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace metric_detail

// Correlation between predicted and labeled call counts per audio unit;
// empty when either side is constant.
inline std::optional<double> hits_correlation(
    const std::vector<std::pair<double, double>>& per_unit_counts,
    CorrKind kind = CorrKind::Pearson) {
  if (per_unit_counts.size() < 2)
    throw Error(ErrorCode::TooFew, "need at least 2 units");
  std::vector<double> x, y;
  x.reserve(per_unit_counts.size());
  y.reserve(per_unit_counts.size());
  for (const auto& [p, l] : per_unit_counts) {
    x.push_back(p);
    y.push_back(l);
  }
  if (kind == CorrKind::Spearman) {
    x = metric_detail::ranks(x);
    y = metric_detail::ranks(y);
  }
  return metric_detail::pearson(x, y);
}

inline double smoothness(const FramePosterior& post) {
  if (post.probs.size() < 2)
    throw Error(ErrorCode::TooShort, "need at least 2 frames");
  double sum = 0.0;
  for (std::size_t t = 1; t < post.probs.size(); ++t)
    sum += std::abs(post.probs[t] - post.probs[t - 1]);
  return sum / static_cast<double>(post.probs.size() - 1);
}

struct EventScores {
  double precision = 1.0;
  double recall = 1.0;
  bool precision_vacuous = false;  // no predictions to be wrong about
  bool recall_vacuous = false;     // no reference events to find
};

inline EventScores event_scores(const std::vector<CallSegment>& predicted,
                                const std::vector<CallSegment>& reference,
                                double iou_min = 0.3) {
  const MatchCounts m = match_events(predicted, reference, iou_min);
  EventScores s;
  if (m.hits + m.false_alarms == 0)
    s.precision_vacuous = true;
  else
    s.precision = static_cast<double>(m.hits) /
                  static_cast<double>(m.hits + m.false_alarms);
  if (m.hits + m.misses == 0)
    s.recall_vacuous = true;
  else
    s.recall = static_cast<double>(m.hits) /
               static_cast<double>(m.hits + m.misses);
  return s;
}

// Per-file detail row plus the aggregate quantities the CLI reports.
struct FileEvalRow {
  std::string file;
  double instance_accuracy = 0.0;
  std::optional<double> conditional_accuracy;
  std::size_t predicted_events = 0;
  std::size_t labeled_events = 0;
  std::size_t hits = 0;
};

struct EvalReport {
  double instance_accuracy = 0.0;
  std::optional<double> conditional_accuracy;
  std::optional<double> hits_corr;
  double smoothness = 0.0;
  EventScores events;
  std::vector<FileEvalRow> per_file;
};

}  // namespace calldet
