#pragma once

// Stage-2 call classifier: the stage-1 architecture with a mean-pooled
// latent, a 3-way head, and a training loop over variable-length call clips.
// FalseAlarm examples come from stage-1 decodings that match no reference.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "calldet/classes.hpp"
#include "calldet/decoder.hpp"
#include "calldet/detector.hpp"
#include "calldet/errors.hpp"
#include "calldet/features.hpp"
#include "calldet/nnet.hpp"

namespace calldet {

struct CallClassifierModel {
  MfccConfig mfcc;
  FeatureStats stats;
  BiLstmStack stack;
  LinearHead head;  // out = 3
};

struct LabeledCall {
  AudioClip clip;
  CallClass label = CallClass::CleanCall;
};

inline VectorXd pool_mean(const MatrixXd& latents) {
  if (latents.rows() == 0) throw Error(ErrorCode::Empty, "no latent frames");
  return latents.colwise().mean().transpose();
}

struct Classification {
  std::array<double, 3> probs{};
  CallClass cls = CallClass::CleanCall;
};

inline Classification classify_call(const CallClassifierModel& model,
                                    const AudioClip& clip) {
  const MfccExtractor ex(model.mfcc);
  const FeatureMatrix feats = standardize(ex.extract(clip), model.stats);
  const MatrixXd latents = bilstm_stack_forward(model.stack, feats.frames);
  const VectorXd pooled = pool_mean(latents);
  VectorXd logits = model.head.weights * pooled + model.head.bias;
  const double m = logits.maxCoeff();
  double sum = 0.0;
  for (Index k = 0; k < 3; ++k) sum += std::exp(logits[k] - m);
  Classification out;
  int arg = 0;
  for (Index k = 0; k < 3; ++k) {
    out.probs[static_cast<std::size_t>(k)] = std::exp(logits[k] - m) / sum;
    if (logits[k] > logits[arg]) arg = static_cast<int>(k);
  }
  out.cls = call_class_from_code(arg);
  return out;
}

// Time-average of the call's MFCC frames.
inline VectorXd extract_call_embedding(const AudioClip& clip,
                                       const MfccConfig& mfcc) {
  const MfccExtractor ex(mfcc);
  const FeatureMatrix feats = ex.extract(clip);
  return feats.frames.colwise().mean().transpose();
}

// Stage-1 decodings on one file that match no reference event, cut from the
// audio as FalseAlarm training material.
inline std::vector<AudioClip> mine_false_alarm_clips(
    const DetectorModel& det, const AudioClip& clip,
    const std::vector<CallSegment>& reference, const DecodeConfig& dcfg,
    double iou_min = 0.3) {
  std::vector<CallSegment> decoded;
  for (const Window& w : window_segments(clip, kTrainWindowSec)) {
    const FramePosterior post = detector_posteriors(det, w.clip);
    for (const CallSegment& s : decode_beam(post, dcfg).segments)
      decoded.push_back({s.start_sec + w.source_offset_sec,
                         s.end_sec + w.source_offset_sec, s.score});
  }
  const MatchDetail match = match_events_detail(decoded, reference, iou_min);
  std::vector<AudioClip> out;
  const double min_len =
      static_cast<double>(det.mfcc.frame_len_samples()) /
      det.mfcc.sample_rate_hz;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    if (match.predicted_matched[i]) continue;
    AudioClip cut = slice_clip(clip, decoded[i].start_sec, decoded[i].end_sec);
    if (cut.duration_sec() >= min_len) out.push_back(std::move(cut));
  }
  return out;
}

struct ClassifierEpochStats {
  double loss = 0.0;  // validation cross entropy
  double accuracy = 0.0;
  std::array<std::optional<double>, 3> recall;
};

struct ClassifierTraining {
  CallClassifierModel model;
  std::vector<ClassifierEpochStats> history;
};

inline ClassifierTraining train_call_classifier(
    const std::vector<LabeledCall>& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw Error(ErrorCode::EmptyDataset, "no calls");
  {
    std::array<bool, 3> seen{};
    for (const LabeledCall& c : dataset)
      seen[static_cast<std::size_t>(call_class_code(c.label))] = true;
    if (seen[0] + seen[1] + seen[2] < 2)
      throw Error(ErrorCode::SingleClass, "need at least 2 distinct labels");
  }

  const MfccConfig mfcc =
      MfccConfig::defaults_for_rate(dataset[0].clip.sample_rate_hz);
  const MfccExtractor ex(mfcc);
  std::vector<FeatureMatrix> raw(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i)
    raw[i] = ex.extract(dataset[i].clip);

  // Validation split over examples: the last ceil(fraction * n), keeping at
  // least one training example; fraction 0 validates on the training set.
  std::size_t n_val = 0;
  if (cfg.validation_fraction > 0.0 && dataset.size() >= 2)
    n_val = std::min(
        dataset.size() - 1,
        static_cast<std::size_t>(std::ceil(
            cfg.validation_fraction * static_cast<double>(dataset.size()))));
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    (i < dataset.size() - n_val ? train_idx : val_idx).push_back(i);
  if (val_idx.empty()) val_idx = train_idx;

  std::vector<FeatureMatrix> train_feats;
  train_feats.reserve(train_idx.size());
  for (std::size_t i : train_idx) train_feats.push_back(raw[i]);
  const FeatureStats stats = fit_stats(train_feats);
  std::vector<MatrixXd> feats(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i)
    feats[i] = standardize(raw[i], stats).frames;

  Rng rng(cfg.seed);
  BiLstmStack stack = init_bilstm_stack(3, 16, mfcc.n_mfcc, rng);
  LinearHead head = init_linear_head(3, stack.output_size(), rng);
  AdamState adam;

  ClassifierTraining result;
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
      std::vector<int> labels;
      for (std::size_t k = pos; k < end; ++k) {
        items.push_back(&feats[order[k]]);
        labels.push_back(call_class_code(dataset[order[k]].label));
      }
      const SeqBatch batch = make_seq_batch(items);
      SequenceModelGrads grads{zeros_like(stack), zeros_like(head)};
      pooled_class_loss(stack, head, batch, labels, &grads);
      auto params = param_views(stack, head);
      auto gviews = param_views(grads.stack, grads.head);
      adam_step(params, gviews, adam);
    }

    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::array<std::size_t, 3> class_total{}, class_hit{};
    for (std::size_t pos = 0; pos < val_idx.size(); pos += 32) {
      const std::size_t end = std::min(val_idx.size(), pos + 32);
      std::vector<const MatrixXd*> items;
      std::vector<int> labels;
      for (std::size_t k = pos; k < end; ++k) {
        items.push_back(&feats[val_idx[k]]);
        labels.push_back(call_class_code(dataset[val_idx[k]].label));
      }
      const SeqBatch batch = make_seq_batch(items);
      const PooledClassResult res =
          pooled_class_loss(stack, head, batch, labels, nullptr);
      loss_sum += res.loss * static_cast<double>(items.size());
      for (std::size_t b = 0; b < items.size(); ++b) {
        int arg = 0;
        for (Index k = 1; k < 3; ++k)
          if (res.probs(k, static_cast<Index>(b)) >
              res.probs(arg, static_cast<Index>(b)))
            arg = static_cast<int>(k);
        const int y = labels[b];
        ++class_total[static_cast<std::size_t>(y)];
        if (arg == y) {
          ++correct;
          ++class_hit[static_cast<std::size_t>(y)];
        }
      }
    }
    ClassifierEpochStats row;
    row.loss = loss_sum / static_cast<double>(val_idx.size());
    row.accuracy =
        static_cast<double>(correct) / static_cast<double>(val_idx.size());
    for (std::size_t k = 0; k < 3; ++k)
      if (class_total[k] > 0)
        row.recall[k] = static_cast<double>(class_hit[k]) /
                        static_cast<double>(class_total[k]);
    result.history.push_back(row);
    if (row.accuracy > best_acc) {
      best_acc = row.accuracy;
      best_stack = stack;
      best_head = head;
    }
  }

  result.model.stack = std::move(best_stack);
  result.model.head = std::move(best_head);
  return result;
}

}  // namespace calldet
