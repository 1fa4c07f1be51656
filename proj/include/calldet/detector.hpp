#pragma once

// Stage-1 activity model: MFCC -> standardize -> BiLSTM -> linear -> sigmoid
// per frame, plus the training loop (minibatch Adam on BCE, file-level
// validation split, best-validation checkpoint) and the frame-independent
// logistic baseline used for comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "calldet/decoder.hpp"
#include "calldet/errors.hpp"
#include "calldet/features.hpp"
#include "calldet/nnet.hpp"

namespace calldet {

constexpr double kPosteriorClamp = 1e-12;
constexpr double kTrainWindowSec = 5.0;

struct DetectorModel {
  MfccConfig mfcc;
  FeatureStats stats;
  BiLstmStack stack;
  LinearHead head;  // out = 1
  double decision_threshold = 0.5;
};

struct LabeledWindow {
  std::string file;  // source identity, used for the validation split
  Window window;
  std::vector<int> frame_labels;
};

struct TrainConfig {
  int epochs = 1000;
  int batch_size = 8;
  std::uint64_t seed = 0;
  bool positive_only = true;
  double validation_fraction = 0.2;

  void validate() const {
    if (epochs < 1) throw Error(ErrorCode::BadArgument, "epochs must be >= 1");
    if (batch_size < 1)
      throw Error(ErrorCode::BadArgument, "batch_size must be >= 1");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
      throw Error(ErrorCode::BadArgument,
                  "validation_fraction outside [0, 1)");
  }
};

inline FramePosterior detector_posteriors(const DetectorModel& model,
                                          const AudioClip& clip) {
  const MfccExtractor ex(model.mfcc);
  const FeatureMatrix feats = standardize(ex.extract(clip), model.stats);
  const MatrixXd latents = bilstm_stack_forward(model.stack, feats.frames);
  const MatrixXd logits = linear_forward(model.head, latents);  // T x 1
  FramePosterior post;
  post.frame_times_sec = feats.frame_times_sec;
  post.probs.resize(static_cast<std::size_t>(logits.rows()));
  for (Index t = 0; t < logits.rows(); ++t)
    post.probs[static_cast<std::size_t>(t)] =
        std::clamp(sigmoid(logits(t, 0)), kPosteriorClamp,
                   1.0 - kPosteriorClamp);
  return post;
}

inline std::vector<int> predict_frames(const DetectorModel& model,
                                       const AudioClip& clip) {
  const FramePosterior post = detector_posteriors(model, clip);
  std::vector<int> pred(post.probs.size());
  for (std::size_t t = 0; t < post.probs.size(); ++t)
    pred[t] = post.probs[t] >= model.decision_threshold ? 1 : 0;
  return pred;
}

// Frame labeled active iff at least half of its [center - len/2,
// center + len/2] span overlaps some segment.
inline std::vector<int> frame_labels_from_segments(
    const std::vector<CallSegment>& segments,
    const std::vector<double>& frame_times, double frame_len_sec) {
  std::vector<CallSegment> sorted = segments;
  std::sort(sorted.begin(), sorted.end(),
            [](const CallSegment& a, const CallSegment& b) {
              return a.start_sec < b.start_sec;
            });
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i].start_sec < sorted[i - 1].end_sec)
      throw Error(ErrorCode::OverlappingSegments,
                  "segments overlap near " + std::to_string(sorted[i].start_sec));
  std::vector<int> labels(frame_times.size(), 0);
  const double half = frame_len_sec / 2.0;
  for (std::size_t t = 0; t < frame_times.size(); ++t) {
    const double lo = frame_times[t] - half, hi = frame_times[t] + half;
    double covered = 0.0;
    for (const CallSegment& s : sorted) {
      const double inter = std::min(hi, s.end_sec) - std::max(lo, s.start_sec);
      if (inter > 0.0) covered += inter;
    }
    labels[t] = covered >= 0.5 * frame_len_sec ? 1 : 0;
  }
  return labels;
}

// Slice one labeled file into training windows, rasterizing its events onto
// each window's frame grid. Events are shifted into window-local time and
// clipped to the window before rasterization.
inline std::vector<LabeledWindow> make_labeled_windows(
    const std::string& file, const AudioClip& clip,
    const std::vector<CallSegment>& events, const MfccConfig& mfcc,
    double window_sec = kTrainWindowSec) {
  const MfccExtractor ex(mfcc);
  std::vector<LabeledWindow> out;
  for (Window& w : window_segments(clip, window_sec)) {
    const double off = w.source_offset_sec;
    const double dur = w.clip.duration_sec();
    std::vector<CallSegment> local;
    for (const CallSegment& e : events) {
      const double s = std::max(e.start_sec - off, 0.0);
      const double t = std::min(e.end_sec - off, dur);
      if (t > s) local.push_back({s, t, e.score});
    }
    const FeatureMatrix feats = ex.extract(w.clip);
    LabeledWindow lw;
    lw.file = file;
    lw.frame_labels = frame_labels_from_segments(local, feats.frame_times_sec,
                                                 mfcc.frame_len_sec);
    lw.window = std::move(w);
    out.push_back(std::move(lw));
  }
  return out;
}

struct EpochStats {
  double loss = 0.0;  // validation BCE
  double instance_accuracy = 0.0;
  std::optional<double> conditional_accuracy;
};

struct DetectorTraining {
  DetectorModel model;
  std::vector<EpochStats> history;
};

namespace det_detail {

constexpr Index kValBatchCap = 32;

// Windows from the lexicographically last ceil(fraction * n_files) files
// form the validation set; fraction 0 validates on the training windows.
inline std::vector<char> validation_mask(
    const std::vector<LabeledWindow>& dataset, double fraction) {
  std::set<std::string> files;
  for (const LabeledWindow& w : dataset) files.insert(w.file);
  std::vector<char> is_val(dataset.size(), 0);
  if (fraction <= 0.0 || files.size() < 2) return is_val;
  const std::size_t n_val = std::min(
      files.size() - 1,
      static_cast<std::size_t>(
          std::ceil(fraction * static_cast<double>(files.size()))));
  std::set<std::string> val_files;
  for (auto it = files.rbegin(); val_files.size() < n_val; ++it)
    val_files.insert(*it);
  for (std::size_t i = 0; i < dataset.size(); ++i)
    is_val[i] = val_files.count(dataset[i].file) ? 1 : 0;
  return is_val;
}

struct EvalAccum {
  double loss_sum = 0.0;
  std::size_t frames = 0, matches = 0, positives = 0, hits = 0;
};

inline void eval_batch(const BiLstmStack& stack, const LinearHead& head,
                       const std::vector<const MatrixXd*>& feats,
                       const std::vector<const std::vector<int>*>& labels,
                       double threshold, EvalAccum& acc) {
  const SeqBatch batch = make_seq_batch(feats);
  std::vector<std::vector<int>> label_copies;
  label_copies.reserve(labels.size());
  for (const auto* l : labels) label_copies.push_back(*l);
  const BinarySeqResult res =
      binary_sequence_loss(stack, head, batch, label_copies, nullptr);
  const std::size_t real = static_cast<std::size_t>(batch.total_real_frames());
  acc.loss_sum += res.loss * static_cast<double>(real);
  acc.frames += real;
  for (Index b = 0; b < batch.batch; ++b) {
    for (Index t = 0; t < batch.lengths[static_cast<std::size_t>(b)]; ++t) {
      const int y = label_copies[static_cast<std::size_t>(b)]
                                [static_cast<std::size_t>(t)];
      const int p =
          res.probs(0, t * batch.batch + b) >= threshold ? 1 : 0;
      if (p == y) ++acc.matches;
      if (y == 1) {
        ++acc.positives;
        if (p == 1) ++acc.hits;
      }
    }
  }
}

inline DetectorTraining train_impl(const std::vector<LabeledWindow>& dataset,
                                   const TrainConfig& cfg, int layers,
                                   int hidden) {
  cfg.validate();
  if (dataset.empty()) throw Error(ErrorCode::EmptyDataset, "no windows");

  const MfccConfig mfcc =
      MfccConfig::defaults_for_rate(dataset[0].window.clip.sample_rate_hz);
  const MfccExtractor ex(mfcc);

  std::vector<FeatureMatrix> raw(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    raw[i] = ex.extract(dataset[i].window.clip);
    if (static_cast<Index>(dataset[i].frame_labels.size()) !=
        raw[i].num_frames())
      throw Error(ErrorCode::LengthMismatch,
                  "frame labels vs feature frames in " + dataset[i].file);
  }

  const std::vector<char> is_val =
      validation_mask(dataset, cfg.validation_fraction);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (is_val[i]) {
      val_idx.push_back(i);
      continue;
    }
    const auto& lab = dataset[i].frame_labels;
    const bool has_positive =
        std::find(lab.begin(), lab.end(), 1) != lab.end();
    if (!cfg.positive_only || has_positive) train_idx.push_back(i);
  }
  if (train_idx.empty())
    throw Error(cfg.positive_only ? ErrorCode::NoPositives
                                  : ErrorCode::EmptyDataset,
                "no training windows");
  if (val_idx.empty()) val_idx = train_idx;

  std::vector<FeatureMatrix> train_feats;
  train_feats.reserve(train_idx.size());
  for (std::size_t i : train_idx) train_feats.push_back(raw[i]);
  const FeatureStats stats = fit_stats(train_feats);
  std::vector<MatrixXd> feats(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i)
    feats[i] = standardize(raw[i], stats).frames;

  Rng rng(cfg.seed);
  BiLstmStack stack = init_bilstm_stack(layers, hidden, mfcc.n_mfcc, rng);
  LinearHead head = init_linear_head(1, stack.output_size(), rng);
  AdamState adam;

  DetectorTraining result;
  result.model.mfcc = mfcc;
  result.model.stats = stats;
  BiLstmStack best_stack = stack;
  LinearHead best_head = head;
  double best_acc = -1.0;

  std::vector<std::size_t> order = train_idx;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t pos = 0; pos < order.size();
         pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(
          order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const MatrixXd*> items;
      std::vector<std::vector<int>> labels;
      for (std::size_t k = pos; k < end; ++k) {
        items.push_back(&feats[order[k]]);
        labels.push_back(dataset[order[k]].frame_labels);
      }
      const SeqBatch batch = make_seq_batch(items);
      SequenceModelGrads grads{zeros_like(stack), zeros_like(head)};
      binary_sequence_loss(stack, head, batch, labels, &grads);
      auto params = param_views(stack, head);
      auto gviews = param_views(grads.stack, grads.head);
      adam_step(params, gviews, adam);
    }

    EvalAccum acc;
    for (std::size_t pos = 0; pos < val_idx.size();
         pos += static_cast<std::size_t>(kValBatchCap)) {
      const std::size_t end = std::min(
          val_idx.size(), pos + static_cast<std::size_t>(kValBatchCap));
      std::vector<const MatrixXd*> items;
      std::vector<const std::vector<int>*> labels;
      for (std::size_t k = pos; k < end; ++k) {
        items.push_back(&feats[val_idx[k]]);
        labels.push_back(&dataset[val_idx[k]].frame_labels);
      }
      eval_batch(stack, head, items, labels, result.model.decision_threshold,
                 acc);
    }
    EpochStats stats_row;
    stats_row.loss = acc.loss_sum / static_cast<double>(acc.frames);
    stats_row.instance_accuracy =
        static_cast<double>(acc.matches) / static_cast<double>(acc.frames);
    if (acc.positives > 0)
      stats_row.conditional_accuracy = static_cast<double>(acc.hits) /
                                       static_cast<double>(acc.positives);
    result.history.push_back(stats_row);
    if (stats_row.instance_accuracy > best_acc) {
      best_acc = stats_row.instance_accuracy;
      best_stack = stack;
      best_head = head;
    }
  }

  result.model.stack = std::move(best_stack);
  result.model.head = std::move(best_head);
  return result;
}

}  // namespace det_detail

inline DetectorTraining train_detector(const std::vector<LabeledWindow>& dataset,
                                       const TrainConfig& cfg) {
  return det_detail::train_impl(dataset, cfg, 3, 16);
}

// Frame-independent logistic regressor on the same MFCCs: an empty stack
// passes features straight to the head.
inline DetectorTraining train_logistic_baseline(
    const std::vector<LabeledWindow>& dataset, const TrainConfig& cfg) {
  return det_detail::train_impl(dataset, cfg, 0, 16);
}

}  // namespace calldet
