#pragma once

// Command-line surface: corpus synthesis, training, detection,
// classification, evaluation, and the data-scaling experiment. Progress goes
// to stderr, data to the requested output files; exit codes are 0 (success),
// 1 (usage), 2 (data or format), 3 (numeric failure).

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "calldet/calldet.hpp"

namespace calldet {

namespace cli_detail {

constexpr double kGradCheckTol = 1e-5;
constexpr double kEnergyBandLoHz = 500.0;
constexpr double kEnergyBandHiHz = 2000.0;
constexpr double kEnergyKSigma = 1.5;

struct GlobalOpts {
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
  bool quiet = false;
};

struct Log {
  bool quiet = false;
  std::mutex mu;

  void line(const std::string& s) {
    if (quiet) return;
    std::lock_guard<std::mutex> lock(mu);
    std::fprintf(stderr, "%s\n", s.c_str());
  }
};

class ConfigEcho {
 public:
  explicit ConfigEcho(const char* cmd) { line_ << "config: " << cmd; }

  template <typename T>
  ConfigEcho& kv(const char* key, const T& value) {
    line_ << ' ' << key << '=' << value;
    return *this;
  }

  void emit(const GlobalOpts& g) {
    line_ << " seed=" << g.seed << " threads=" << g.threads
          << " quiet=" << (g.quiet ? 1 : 0);
    std::fprintf(stderr, "%s\n", line_.str().c_str());
  }

 private:
  std::ostringstream line_;
};

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::BadArgument:
    case ErrorCode::BadConfig:
    case ErrorCode::BadBand:
      return 1;
    default:
      return 2;
  }
}

inline std::vector<std::string> list_wavs(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir))
    throw Error(ErrorCode::IoError, "not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".wav")
      names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw Error(ErrorCode::EmptyDataset, "no .wav files in " + dir);
  return names;
}

inline AudioClip load_rate_checked(const std::string& dir,
                                   const std::string& name,
                                   int expected_rate) {
  AudioClip clip = load_wav(dir + "/" + name);
  if (expected_rate > 0 && clip.sample_rate_hz != expected_rate)
    throw Error(ErrorCode::RateMismatch,
                "file " + name + ": expected " +
                    std::to_string(expected_rate) + " Hz, got " +
                    std::to_string(clip.sample_rate_hz) + " Hz");
  return clip;
}

inline std::map<std::string, std::vector<LabelRow>> labels_by_file(
    const std::vector<LabelRow>& rows) {
  std::map<std::string, std::vector<LabelRow>> by_file;
  for (const LabelRow& r : rows) by_file[r.file].push_back(r);
  return by_file;
}

inline std::vector<CallSegment> label_segments(
    const std::vector<LabelRow>& rows) {
  std::vector<CallSegment> segs;
  segs.reserve(rows.size());
  for (const LabelRow& r : rows) segs.push_back({r.start_sec, r.end_sec, 1.0});
  std::sort(segs.begin(), segs.end(),
            [](const CallSegment& a, const CallSegment& b) {
              return a.start_sec < b.start_sec;
            });
  return segs;
}

inline void check_labels_have_files(
    const std::map<std::string, std::vector<LabelRow>>& by_file,
    const std::vector<std::string>& names) {
  for (const auto& [file, rows] : by_file)
    if (!std::binary_search(names.begin(), names.end(), file))
      throw Error(ErrorCode::IoError,
                  "labels line " + std::to_string(rows.front().line) +
                      ": no such audio file " + file);
}

// Slice every labeled file in the corpus into training windows with
// rasterized frame labels; files without labels contribute negative windows.
inline std::vector<LabeledWindow> build_detector_windows(
    const std::string& data_dir, const std::string& labels_path, int threads,
    Log& log) {
  const auto by_file = labels_by_file(read_labels(labels_path));
  const std::vector<std::string> names = list_wavs(data_dir);
  check_labels_have_files(by_file, names);

  const AudioClip first = load_wav(data_dir + "/" + names.front());
  const int rate = first.sample_rate_hz;
  const MfccConfig mfcc = MfccConfig::defaults_for_rate(rate);

  std::vector<std::vector<LabeledWindow>> slots(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) {
    const AudioClip clip = load_rate_checked(data_dir, names[i], rate);
    const auto it = by_file.find(names[i]);
    const std::vector<CallSegment> events =
        it == by_file.end() ? std::vector<CallSegment>{}
                            : label_segments(it->second);
    slots[i] = make_labeled_windows(names[i], clip, events, mfcc);
    log.line("windows " + names[i] + ": " + std::to_string(slots[i].size()) +
             " windows, " + std::to_string(events.size()) + " events");
  });

  std::vector<LabeledWindow> out;
  for (auto& s : slots)
    for (auto& w : s) out.push_back(std::move(w));
  return out;
}

// Stage-2 training material: every labeled call cut from its file, plus
// detector false alarms mined per file. Order is by file, calls before
// mined clips, so the tail validation split sees a class mix.
inline std::vector<LabeledCall> build_classifier_dataset(
    const std::string& data_dir, const std::string& labels_path,
    const DetectorModel& det, const DecodeConfig& dcfg, int threads,
    Log& log) {
  const auto by_file = labels_by_file(read_labels(labels_path));
  const std::vector<std::string> names = list_wavs(data_dir);
  check_labels_have_files(by_file, names);

  std::vector<std::vector<LabeledCall>> slots(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) {
    const AudioClip clip =
        load_rate_checked(data_dir, names[i], det.mfcc.sample_rate_hz);
    std::vector<LabelRow> rows;
    if (const auto it = by_file.find(names[i]); it != by_file.end())
      rows = it->second;
    std::sort(rows.begin(), rows.end(),
              [](const LabelRow& a, const LabelRow& b) {
                return a.start_sec < b.start_sec;
              });
    for (const LabelRow& r : rows) {
      if (!r.cls)
        throw Error(ErrorCode::BadLabel,
                    "line " + std::to_string(r.line) + ": missing class");
      slots[i].push_back({slice_clip(clip, r.start_sec, r.end_sec),
                          call_class_from_code(*r.cls)});
    }
    const std::size_t n_calls = slots[i].size();
    for (AudioClip& fa :
         mine_false_alarm_clips(det, clip, label_segments(rows), dcfg))
      slots[i].push_back({std::move(fa), CallClass::FalseAlarm});
    log.line("mine " + names[i] + ": " + std::to_string(n_calls) + " calls, " +
             std::to_string(slots[i].size() - n_calls) + " false alarms");
  });

  std::vector<LabeledCall> out;
  for (auto& s : slots)
    for (auto& c : s) out.push_back(std::move(c));
  return out;
}

inline std::string csv_opt(const std::optional<double>& v) {
  return v ? persist_detail::fmt6(*v) : std::string();
}

inline void write_history_csv(const std::string& path,
                              const std::vector<EpochStats>& history) {
  std::ostringstream out;
  out << "epoch,loss,instance_accuracy,conditional_accuracy\n";
  for (std::size_t e = 0; e < history.size(); ++e)
    out << e + 1 << ',' << persist_detail::fmt6(history[e].loss) << ','
        << persist_detail::fmt6(history[e].instance_accuracy) << ','
        << csv_opt(history[e].conditional_accuracy) << '\n';
  persist_detail::write_text(path, out.str());
}

inline std::size_t best_epoch(const std::vector<EpochStats>& history) {
  std::size_t best = 0;
  for (std::size_t e = 1; e < history.size(); ++e)
    if (history[e].instance_accuracy > history[best].instance_accuracy)
      best = e;
  return best;
}

inline std::string default_history_path(const std::string& model_out) {
  const std::filesystem::path p(model_out);
  return (p.parent_path() / "history.csv").string();
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  std::string out;
  int files = 1;
  double duration = 60.0;
  double rate = 16000;
  double calls_per_minute = 4.0;
  double call_dur_lo = 0.3;
  double call_dur_hi = 1.5;
  double f0_lo = 800.0;
  double f0_hi = 1300.0;
  double snr_db = 10.0;
  double nlp_fraction = 0.3;
  double distractor_rate = 2.0;
  std::string noise = "pink";
};

inline int run_synth(const SynthOpts& o, const GlobalOpts& g, Log& log) {
  SynthConfig cfg;
  cfg.sample_rate_hz = static_cast<int>(o.rate);
  cfg.file_duration_sec = o.duration;
  cfg.n_files = o.files;
  cfg.calls_per_minute = o.calls_per_minute;
  cfg.call_duration_lo_sec = o.call_dur_lo;
  cfg.call_duration_hi_sec = o.call_dur_hi;
  cfg.call_f0_lo_hz = o.f0_lo;
  cfg.call_f0_hi_hz = o.f0_hi;
  cfg.snr_db = o.snr_db;
  cfg.nlp_fraction = o.nlp_fraction;
  cfg.distractor_rate_per_minute = o.distractor_rate;
  cfg.noise_kind = o.noise == "white" ? NoiseKind::White : NoiseKind::Pink;
  cfg.seed = g.seed;
  cfg.validate();

  ConfigEcho("synth")
      .kv("out", o.out)
      .kv("files", o.files)
      .kv("duration", o.duration)
      .kv("rate", cfg.sample_rate_hz)
      .kv("calls-per-minute", o.calls_per_minute)
      .kv("call-dur-lo", o.call_dur_lo)
      .kv("call-dur-hi", o.call_dur_hi)
      .kv("f0-lo", o.f0_lo)
      .kv("f0-hi", o.f0_hi)
      .kv("snr-db", o.snr_db)
      .kv("nlp-fraction", o.nlp_fraction)
      .kv("distractor-rate", o.distractor_rate)
      .kv("noise", o.noise)
      .emit(g);

  std::filesystem::create_directories(o.out);
  std::vector<std::vector<SynthLabelRow>> slots(
      static_cast<std::size_t>(cfg.n_files));
  parallel_for(slots.size(), g.threads, [&](std::size_t i) {
    SynthFile f = generate_file(cfg, i);
    write_wav(f.clip, o.out + "/" + f.name);
    log.line("synth " + f.name + ": " + std::to_string(f.labels.size()) +
             " calls");
    slots[i] = std::move(f.labels);
  });

  std::vector<LabelRow> rows;
  for (const auto& s : slots)
    for (const SynthLabelRow& r : s) {
      LabelRow row;
      row.file = r.file;
      row.start_sec = r.start_sec;
      row.end_sec = r.end_sec;
      row.cls = call_class_code(r.cls);
      rows.push_back(row);
    }
  write_labels(o.out + "/labels.csv", rows);
  log.line("wrote " + std::to_string(slots.size()) + " files and " +
           std::to_string(rows.size()) + " labels to " + o.out);
  return 0;
}

// ---------------------------------------------------------------------------
// train-detector

struct TrainDetOpts {
  std::string data, labels, out, history;
  int epochs = 1000;
  int batch = 8;
  double val_fraction = 0.2;
};

inline int run_train_detector(const TrainDetOpts& o, const GlobalOpts& g,
                              Log& log) {
  const std::string history_path =
      o.history.empty() ? default_history_path(o.out) : o.history;
  ConfigEcho("train-detector")
      .kv("data", o.data)
      .kv("labels", o.labels)
      .kv("out", o.out)
      .kv("history", history_path)
      .kv("epochs", o.epochs)
      .kv("batch", o.batch)
      .kv("val-fraction", o.val_fraction)
      .emit(g);

  const std::vector<LabeledWindow> windows =
      build_detector_windows(o.data, o.labels, g.threads, log);
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.seed = g.seed;
  tc.validation_fraction = o.val_fraction;
  log.line("training detector on " + std::to_string(windows.size()) +
           " windows");
  const DetectorTraining tr = train_detector(windows, tc);
  save_model(tr.model, o.out);
  write_history_csv(history_path, tr.history);

  const std::size_t be = best_epoch(tr.history);
  std::ostringstream done;
  done << "best validation instance accuracy "
       << persist_detail::fmt6(tr.history[be].instance_accuracy)
       << " at epoch " << be + 1;
  if (tr.history[be].conditional_accuracy)
    done << ", conditional "
         << persist_detail::fmt6(*tr.history[be].conditional_accuracy);
  log.line(done.str());
  return 0;
}

// ---------------------------------------------------------------------------
// detect

struct DetectOpts {
  std::string model, audio, out;
  std::string decoder;
  std::optional<double> threshold;
  double min_duration = 0.10;
  double merge_gap = 0.15;
  int beam_width = 8;
  double band_lo = kEnergyBandLoHz;
  double band_hi = kEnergyBandHiHz;
  double k_sigma = kEnergyKSigma;
};

inline int run_detect(const DetectOpts& o, const GlobalOpts& g, Log& log) {
  const DetectorModel model = load_detector_model(o.model);
  DecodeConfig dcfg;
  dcfg.threshold = o.threshold.value_or(model.decision_threshold);
  dcfg.min_duration_sec = o.min_duration;
  dcfg.merge_gap_sec = o.merge_gap;
  dcfg.beam_width = o.beam_width;
  dcfg.validate();

  ConfigEcho("detect")
      .kv("model", o.model)
      .kv("audio", o.audio)
      .kv("decoder", o.decoder)
      .kv("out", o.out)
      .kv("threshold", dcfg.threshold)
      .kv("min-duration", o.min_duration)
      .kv("merge-gap", o.merge_gap)
      .kv("beam-width", o.beam_width)
      .kv("band-lo", o.band_lo)
      .kv("band-hi", o.band_hi)
      .kv("k-sigma", o.k_sigma)
      .emit(g);

  const std::vector<std::string> names = list_wavs(o.audio);
  std::vector<std::vector<CallSegment>> slots(names.size());
  parallel_for(names.size(), g.threads, [&](std::size_t i) {
    const AudioClip clip =
        load_rate_checked(o.audio, names[i], model.mfcc.sample_rate_hz);
    if (o.decoder == "energy") {
      slots[i] = energy_band_detect(clip, o.band_lo, o.band_hi, o.k_sigma, dcfg);
    } else {
      const FramePosterior post = detector_posteriors(model, clip);
      slots[i] = o.decoder == "beam" ? decode_beam(post, dcfg).segments
                                     : decode_threshold(post, dcfg);
    }
    log.line("detect " + names[i] + ": " + std::to_string(slots[i].size()) +
             " segments");
  });

  std::vector<SegmentRow> rows;
  for (std::size_t i = 0; i < names.size(); ++i)
    for (const CallSegment& s : slots[i]) {
      SegmentRow r;
      r.file = names[i];
      r.start_sec = s.start_sec;
      r.end_sec = s.end_sec;
      r.score = s.score;
      rows.push_back(r);
    }
  write_segments(o.out, rows);
  log.line("wrote " + std::to_string(rows.size()) + " segments to " + o.out);
  return 0;
}

// ---------------------------------------------------------------------------
// train-classifier

struct TrainClsOpts {
  std::string data, labels, detector, out;
  int epochs = 1000;
  int batch = 8;
  double val_fraction = 0.2;
};

inline int run_train_classifier(const TrainClsOpts& o, const GlobalOpts& g,
                                Log& log) {
  ConfigEcho("train-classifier")
      .kv("data", o.data)
      .kv("labels", o.labels)
      .kv("detector", o.detector)
      .kv("out", o.out)
      .kv("epochs", o.epochs)
      .kv("batch", o.batch)
      .kv("val-fraction", o.val_fraction)
      .emit(g);

  const DetectorModel det = load_detector_model(o.detector);
  DecodeConfig dcfg;
  dcfg.threshold = det.decision_threshold;
  const std::vector<LabeledCall> dataset =
      build_classifier_dataset(o.data, o.labels, det, dcfg, g.threads, log);

  std::array<std::size_t, 3> counts{};
  for (const LabeledCall& c : dataset)
    ++counts[static_cast<std::size_t>(call_class_code(c.label))];
  log.line("dataset: " + std::to_string(counts[0]) + " CleanCall, " +
           std::to_string(counts[1]) + " NonlinearCall, " +
           std::to_string(counts[2]) + " FalseAlarm");

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.seed = g.seed;
  tc.validation_fraction = o.val_fraction;
  const ClassifierTraining tr = train_call_classifier(dataset, tc);
  save_model(tr.model, o.out);

  std::size_t be = 0;
  for (std::size_t e = 1; e < tr.history.size(); ++e)
    if (tr.history[e].accuracy > tr.history[be].accuracy) be = e;
  log.line("best held-out accuracy " +
           persist_detail::fmt6(tr.history[be].accuracy) + " at epoch " +
           std::to_string(be + 1));
  return 0;
}

// ---------------------------------------------------------------------------
// classify

struct ClassifyOpts {
  std::string model, segments, audio, out;
};

inline int run_classify(const ClassifyOpts& o, const GlobalOpts& g, Log& log) {
  ConfigEcho("classify")
      .kv("model", o.model)
      .kv("segments", o.segments)
      .kv("audio", o.audio)
      .kv("out", o.out)
      .emit(g);

  const CallClassifierModel model = load_call_classifier_model(o.model);
  std::vector<SegmentRow> rows = read_segments(o.segments);

  std::map<std::string, std::vector<std::size_t>> rows_of_file;
  for (std::size_t i = 0; i < rows.size(); ++i)
    rows_of_file[rows[i].file].push_back(i);
  std::vector<const std::pair<const std::string, std::vector<std::size_t>>*>
      groups;
  for (const auto& kv : rows_of_file) groups.push_back(&kv);

  parallel_for(groups.size(), g.threads, [&](std::size_t k) {
    const auto& [file, idxs] = *groups[k];
    const AudioClip clip =
        load_rate_checked(o.audio, file, model.mfcc.sample_rate_hz);
    for (std::size_t i : idxs) {
      const Classification c = classify_call(
          model, slice_clip(clip, rows[i].start_sec, rows[i].end_sec));
      rows[i].cls = call_class_code(c.cls);
      rows[i].prob = c.probs[static_cast<std::size_t>(call_class_code(c.cls))];
    }
    log.line("classify " + file + ": " + std::to_string(idxs.size()) +
             " segments");
  });

  write_segments(o.out, rows);
  log.line("wrote " + std::to_string(rows.size()) + " classified segments to " +
           o.out);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string segments, labels, report;
  std::string audio;  // optional: enables frame-level metrics
  std::string model;  // optional: enables posterior smoothness
  double iou_min = 0.3;
};

inline int run_eval(const EvalOpts& o, const GlobalOpts& g, Log& log) {
  ConfigEcho("eval")
      .kv("segments", o.segments)
      .kv("labels", o.labels)
      .kv("report", o.report)
      .kv("audio", o.audio.empty() ? "-" : o.audio)
      .kv("model", o.model.empty() ? "-" : o.model)
      .kv("iou-min", o.iou_min)
      .emit(g);

  const std::vector<SegmentRow> seg_rows = read_segments(o.segments);
  const auto labels = labels_by_file(read_labels(o.labels));

  std::map<std::string, std::vector<CallSegment>> pred;
  for (const SegmentRow& r : seg_rows)
    pred[r.file].push_back({r.start_sec, r.end_sec, r.score});
  for (auto& [file, segs] : pred)
    std::sort(segs.begin(), segs.end(),
              [](const CallSegment& a, const CallSegment& b) {
                return a.start_sec < b.start_sec;
              });

  std::vector<std::string> files;
  for (const auto& [f, unused] : pred) files.push_back(f);
  for (const auto& [f, unused] : labels)
    if (!pred.count(f)) files.push_back(f);
  std::sort(files.begin(), files.end());

  const bool with_audio = !o.audio.empty();
  std::optional<DetectorModel> model;
  if (!o.model.empty()) model = load_detector_model(o.model);

  EvalReport report;
  MatchCounts totals;
  std::vector<std::pair<double, double>> count_pairs;
  std::size_t frames = 0, matches = 0, positives = 0, frame_hits = 0;
  double smooth_sum = 0.0;
  std::size_t smooth_steps = 0;

  for (const std::string& file : files) {
    const std::vector<CallSegment> p =
        pred.count(file) ? pred[file] : std::vector<CallSegment>{};
    const std::vector<CallSegment> ref =
        labels.count(file) ? label_segments(labels.at(file))
                           : std::vector<CallSegment>{};
    const MatchCounts m = match_events(p, ref, o.iou_min);
    totals.hits += m.hits;
    totals.misses += m.misses;
    totals.false_alarms += m.false_alarms;
    count_pairs.push_back({static_cast<double>(p.size()),
                           static_cast<double>(ref.size())});

    FileEvalRow row;
    row.file = file;
    row.predicted_events = p.size();
    row.labeled_events = ref.size();
    row.hits = m.hits;

    if (with_audio) {
      const AudioClip clip = load_rate_checked(
          o.audio, file, model ? model->mfcc.sample_rate_hz : 0);
      const MfccConfig mfcc =
          model ? model->mfcc
                : MfccConfig::defaults_for_rate(clip.sample_rate_hz);
      const MfccExtractor ex(mfcc);
      const std::size_t flen =
          static_cast<std::size_t>(mfcc.frame_len_samples());
      const std::size_t hop = static_cast<std::size_t>(mfcc.hop_samples());
      if (clip.samples.size() < flen)
        throw Error(ErrorCode::TooShort, "file " + file + " shorter than one frame");
      const std::vector<double> times =
          ex.frame_times(1 + (clip.samples.size() - flen) / hop);
      const std::vector<int> pf =
          frame_labels_from_segments(p, times, mfcc.frame_len_sec);
      const std::vector<int> lf =
          frame_labels_from_segments(ref, times, mfcc.frame_len_sec);
      std::size_t file_matches = 0, file_pos = 0, file_hits = 0;
      for (std::size_t t = 0; t < pf.size(); ++t) {
        if (pf[t] == lf[t]) ++file_matches;
        if (lf[t]) {
          ++file_pos;
          if (pf[t]) ++file_hits;
        }
      }
      frames += pf.size();
      matches += file_matches;
      positives += file_pos;
      frame_hits += file_hits;
      row.instance_accuracy =
          static_cast<double>(file_matches) / static_cast<double>(pf.size());
      if (file_pos > 0)
        row.conditional_accuracy =
            static_cast<double>(file_hits) / static_cast<double>(file_pos);
      if (model) {
        const FramePosterior post = detector_posteriors(*model, clip);
        for (std::size_t t = 1; t < post.probs.size(); ++t)
          smooth_sum += std::abs(post.probs[t] - post.probs[t - 1]);
        smooth_steps += post.probs.size() - 1;
      }
    }
    report.per_file.push_back(std::move(row));
  }

  if (totals.hits + totals.false_alarms == 0)
    report.events.precision_vacuous = true;
  else
    report.events.precision =
        static_cast<double>(totals.hits) /
        static_cast<double>(totals.hits + totals.false_alarms);
  if (totals.hits + totals.misses == 0)
    report.events.recall_vacuous = true;
  else
    report.events.recall = static_cast<double>(totals.hits) /
                           static_cast<double>(totals.hits + totals.misses);
  if (count_pairs.size() >= 2) report.hits_corr = hits_correlation(count_pairs);
  if (with_audio && frames > 0) {
    report.instance_accuracy =
        static_cast<double>(matches) / static_cast<double>(frames);
    if (positives > 0)
      report.conditional_accuracy =
          static_cast<double>(frame_hits) / static_cast<double>(positives);
  }
  if (smooth_steps > 0)
    report.smoothness = smooth_sum / static_cast<double>(smooth_steps);

  nlohmann::json j;
  j["event_precision"] = report.events.precision;
  j["event_precision_vacuous"] = report.events.precision_vacuous;
  j["event_recall"] = report.events.recall;
  j["event_recall_vacuous"] = report.events.recall_vacuous;
  j["hits"] = totals.hits;
  j["misses"] = totals.misses;
  j["false_alarms"] = totals.false_alarms;
  j["hits_corr"] = nullptr;
  if (report.hits_corr) j["hits_corr"] = *report.hits_corr;
  j["instance_accuracy"] = nullptr;
  j["conditional_accuracy"] = nullptr;
  if (with_audio && frames > 0) {
    j["instance_accuracy"] = report.instance_accuracy;
    if (report.conditional_accuracy)
      j["conditional_accuracy"] = *report.conditional_accuracy;
  }
  j["smoothness"] = nullptr;
  if (smooth_steps > 0) j["smoothness"] = report.smoothness;
  j["per_file"] = nlohmann::json::array();
  for (const FileEvalRow& r : report.per_file) {
    nlohmann::json row;
    row["file"] = r.file;
    row["predicted_events"] = r.predicted_events;
    row["labeled_events"] = r.labeled_events;
    row["hits"] = r.hits;
    row["instance_accuracy"] = nullptr;
    row["conditional_accuracy"] = nullptr;
    if (with_audio) {
      row["instance_accuracy"] = r.instance_accuracy;
      if (r.conditional_accuracy)
        row["conditional_accuracy"] = *r.conditional_accuracy;
    }
    j["per_file"].push_back(std::move(row));
  }
  persist_detail::write_text(o.report, j.dump(2) + "\n");

  std::ostringstream sum;
  sum << "events: precision " << persist_detail::fmt6(report.events.precision)
      << ", recall " << persist_detail::fmt6(report.events.recall) << " ("
      << totals.hits << " hits, " << totals.misses << " misses, "
      << totals.false_alarms << " false alarms)";
  log.line(sum.str());
  return 0;
}

// ---------------------------------------------------------------------------
// scaling-exp

struct ScalingOpts {
  std::string data, labels, out;
  std::string fractions = "0.1,0.25,0.5,1.0";
  int epochs = 1000;
  int batch = 8;
  double val_fraction = 0.2;
};

inline std::vector<std::pair<std::string, double>> parse_fractions(
    const std::string& spec) {
  std::vector<std::pair<std::string, double>> out;
  std::stringstream ss(spec);
  std::string token;
  while (std::getline(ss, token, ',')) {
    char* end = nullptr;
    const double f = std::strtod(token.c_str(), &end);
    if (token.empty() || end != token.c_str() + token.size() || !(f > 0.0) ||
        f > 1.0)
      throw Error(ErrorCode::BadArgument, "bad fraction '" + token + "'");
    out.push_back({token, f});
  }
  if (out.empty()) throw Error(ErrorCode::BadArgument, "empty fraction list");
  return out;
}

inline int run_scaling_exp(const ScalingOpts& o, const GlobalOpts& g,
                           Log& log) {
  ConfigEcho("scaling-exp")
      .kv("data", o.data)
      .kv("labels", o.labels)
      .kv("fractions", o.fractions)
      .kv("epochs", o.epochs)
      .kv("batch", o.batch)
      .kv("val-fraction", o.val_fraction)
      .kv("out", o.out)
      .emit(g);

  const auto fractions = parse_fractions(o.fractions);
  if (!(o.val_fraction > 0.0))
    throw Error(ErrorCode::BadArgument,
                "scaling-exp needs a fixed validation split");

  const std::vector<LabeledWindow> all_windows =
      build_detector_windows(o.data, o.labels, g.threads, log);
  const std::vector<std::string> names = list_wavs(o.data);
  const auto by_file = labels_by_file(read_labels(o.labels));

  const std::size_t n_val = std::min(
      names.size() - 1,
      static_cast<std::size_t>(std::ceil(
          o.val_fraction * static_cast<double>(names.size()))));
  if (n_val == 0)
    throw Error(ErrorCode::BadArgument, "validation split is empty");
  const std::size_t n_pool = names.size() - n_val;
  if (n_pool == 0)
    throw Error(ErrorCode::BadArgument, "no training files left");

  std::map<std::string, std::vector<LabeledWindow>> windows_of;
  for (const LabeledWindow& w : all_windows) windows_of[w.file].push_back(w);

  // validation clips stay loaded so each fraction's model can be decoded
  // into per-file event counts
  std::vector<AudioClip> val_clips(n_val);
  parallel_for(n_val, g.threads, [&](std::size_t k) {
    val_clips[k] = load_wav(o.data + "/" + names[n_pool + k]);
  });

  std::ostringstream csv;
  csv << "fraction,train_files,best_epoch,instance_accuracy,"
         "conditional_accuracy,hits_corr\n";

  for (const auto& [token, f] : fractions) {
    const std::size_t n_tr = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::ceil(f * static_cast<double>(n_pool))));
    std::vector<LabeledWindow> dataset;
    for (std::size_t i = 0; i < n_tr; ++i)
      for (const LabeledWindow& w : windows_of[names[i]])
        dataset.push_back(w);
    for (std::size_t k = 0; k < n_val; ++k)
      for (const LabeledWindow& w : windows_of[names[n_pool + k]])
        dataset.push_back(w);

    TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch;
    tc.seed = g.seed;
    tc.validation_fraction = (static_cast<double>(n_val) - 0.5) /
                             static_cast<double>(n_tr + n_val);
    const DetectorTraining tr = train_detector(dataset, tc);
    const std::size_t be = best_epoch(tr.history);

    DecodeConfig dcfg;
    dcfg.threshold = tr.model.decision_threshold;
    std::vector<std::pair<double, double>> pairs(n_val);
    parallel_for(n_val, g.threads, [&](std::size_t k) {
      const FramePosterior post = detector_posteriors(tr.model, val_clips[k]);
      const auto segs = decode_beam(post, dcfg).segments;
      const auto it = by_file.find(names[n_pool + k]);
      const std::size_t labeled = it == by_file.end() ? 0 : it->second.size();
      pairs[k] = {static_cast<double>(segs.size()),
                  static_cast<double>(labeled)};
    });
    std::optional<double> corr;
    if (pairs.size() >= 2) corr = hits_correlation(pairs);

    csv << token << ',' << n_tr << ',' << be + 1 << ','
        << persist_detail::fmt6(tr.history[be].instance_accuracy) << ','
        << csv_opt(tr.history[be].conditional_accuracy) << ','
        << csv_opt(corr) << '\n';
    std::ostringstream done;
    done << "fraction " << token << ": " << n_tr
         << " train files, instance accuracy "
         << persist_detail::fmt6(tr.history[be].instance_accuracy);
    log.line(done.str());
  }

  persist_detail::write_text(o.out, csv.str());
  log.line("wrote curves to " + o.out);
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

inline int run_gradcheck(const GlobalOpts& g) {
  ConfigEcho("gradcheck").kv("tolerance", kGradCheckTol).emit(g);
  Rng rng(g.seed);
  const MfccConfig mfcc;
  const auto random_batch = [&](std::vector<Eigen::MatrixXd>& items) {
    for (int t : {6, 4}) {
      Eigen::MatrixXd x(t, mfcc.n_mfcc);
      for (Eigen::Index i = 0; i < x.size(); ++i)
        x.data()[i] = rng.uniform(-1.5, 1.5);
      items.push_back(std::move(x));
    }
    return make_seq_batch({&items[0], &items[1]});
  };

  BiLstmStack det_stack = init_bilstm_stack(3, 16, mfcc.n_mfcc, rng);
  LinearHead det_head = init_linear_head(1, det_stack.output_size(), rng);
  std::vector<Eigen::MatrixXd> det_items;
  const SeqBatch det_batch = random_batch(det_items);
  std::vector<std::vector<int>> frame_labels;
  for (const auto& m : det_items) {
    std::vector<int> l(static_cast<std::size_t>(m.rows()));
    for (int& v : l) v = rng.uniform() < 0.5 ? 1 : 0;
    frame_labels.push_back(std::move(l));
  }
  const double det_err =
      grad_check(det_stack, det_head, det_batch, frame_labels, 1e-4);

  BiLstmStack cls_stack = init_bilstm_stack(3, 16, mfcc.n_mfcc, rng);
  LinearHead cls_head = init_linear_head(3, cls_stack.output_size(), rng);
  std::vector<Eigen::MatrixXd> cls_items;
  const SeqBatch cls_batch = random_batch(cls_items);
  std::vector<int> class_labels;
  for (std::size_t b = 0; b < cls_items.size(); ++b)
    class_labels.push_back(rng.uniform_int(0, 2));
  const double cls_err =
      grad_check(cls_stack, cls_head, cls_batch, class_labels, 1e-4);

  const double max_err = std::max(det_err, cls_err);
  std::printf("gradcheck seed %" PRIu64
              ": detector %.3e, classifier %.3e, max relative error %.3e\n",
              static_cast<std::uint64_t>(g.seed), det_err, cls_err, max_err);
  std::fflush(stdout);
  return max_err < kGradCheckTol ? 0 : 3;
}

// ---------------------------------------------------------------------------
// export-features

struct ExportOpts {
  std::string segments, audio, out;
};

inline int run_export_features(const ExportOpts& o, const GlobalOpts& g,
                               Log& log) {
  ConfigEcho("export-features")
      .kv("segments", o.segments)
      .kv("audio", o.audio)
      .kv("out", o.out)
      .emit(g);

  const std::vector<SegmentRow> rows = read_segments(o.segments);
  std::map<std::string, std::vector<std::size_t>> rows_of_file;
  for (std::size_t i = 0; i < rows.size(); ++i)
    rows_of_file[rows[i].file].push_back(i);
  std::vector<const std::pair<const std::string, std::vector<std::size_t>>*>
      groups;
  for (const auto& kv : rows_of_file) groups.push_back(&kv);

  int n_mfcc = MfccConfig().n_mfcc;
  std::vector<VectorXd> embeddings(rows.size());
  parallel_for(groups.size(), g.threads, [&](std::size_t k) {
    const auto& [file, idxs] = *groups[k];
    const AudioClip clip = load_rate_checked(o.audio, file, 0);
    const MfccConfig mfcc = MfccConfig::defaults_for_rate(clip.sample_rate_hz);
    for (std::size_t i : idxs)
      embeddings[i] = extract_call_embedding(
          slice_clip(clip, rows[i].start_sec, rows[i].end_sec), mfcc);
    log.line("embed " + file + ": " + std::to_string(idxs.size()) + " calls");
  });

  std::ostringstream out;
  out << "file,start_sec,end_sec";
  for (int c = 0; c < n_mfcc; ++c) out << ",mfcc_" << c;
  out << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].file << ',' << persist_detail::fmt6(rows[i].start_sec)
        << ',' << persist_detail::fmt6(rows[i].end_sec);
    for (Eigen::Index c = 0; c < embeddings[i].size(); ++c)
      out << ',' << persist_detail::fmt6(embeddings[i][c]);
    out << '\n';
  }
  persist_detail::write_text(o.out, out.str());
  log.line("wrote " + std::to_string(rows.size()) + " embeddings to " + o.out);
  return 0;
}

}  // namespace cli_detail

inline int run_cli(std::vector<std::string> args) {
  using namespace cli_detail;
  CLI::App app{"vocalization detection and classification pipeline", "calldet"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--seed", g.seed, "RNG seed")->capture_default_str();
  app.add_option("--threads", g.threads,
                 "worker threads for per-file stages (0 = all cores)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  app.add_flag("--quiet", g.quiet, "suppress progress lines");

  Log log;
  int code = 0;
  // fallthrough globals are fully parsed before any subcommand callback runs
  const auto run = [&](auto fn) {
    return [&log, &g, &code, fn] {
      log.quiet = g.quiet;
      code = fn();
    };
  };

  SynthOpts syn;
  CLI::App* c_syn = app.add_subcommand("synth", "generate a labeled corpus");
  c_syn->fallthrough();
  c_syn->add_option("--out", syn.out, "output directory")->required();
  c_syn->add_option("--files", syn.files, "number of files")
      ->capture_default_str();
  c_syn->add_option("--duration", syn.duration, "file duration in seconds")
      ->capture_default_str();
  c_syn->add_option("--rate", syn.rate, "sample rate in Hz")
      ->capture_default_str();
  c_syn->add_option("--calls-per-minute", syn.calls_per_minute,
                    "mean call rate")
      ->capture_default_str();
  c_syn->add_option("--call-dur-lo", syn.call_dur_lo, "min call duration")
      ->capture_default_str();
  c_syn->add_option("--call-dur-hi", syn.call_dur_hi, "max call duration")
      ->capture_default_str();
  c_syn->add_option("--f0-lo", syn.f0_lo, "min fundamental in Hz")
      ->capture_default_str();
  c_syn->add_option("--f0-hi", syn.f0_hi, "max fundamental in Hz")
      ->capture_default_str();
  c_syn->add_option("--snr-db", syn.snr_db, "call SNR in dB")
      ->capture_default_str();
  c_syn->add_option("--nlp-fraction", syn.nlp_fraction,
                    "fraction of nonlinear calls")
      ->capture_default_str();
  c_syn->add_option("--distractor-rate", syn.distractor_rate,
                    "distractors per minute")
      ->capture_default_str();
  c_syn->add_option("--noise", syn.noise, "background noise kind")
      ->check(CLI::IsMember({"pink", "white"}))
      ->capture_default_str();
  c_syn->callback(run([&] { return run_synth(syn, g, log); }));

  TrainDetOpts td;
  CLI::App* c_td =
      app.add_subcommand("train-detector", "train the frame detector");
  c_td->fallthrough();
  c_td->add_option("--data", td.data, "audio directory")->required();
  c_td->add_option("--labels", td.labels, "labels csv")->required();
  c_td->add_option("--out", td.out, "model json path")->required();
  c_td->add_option("--history", td.history,
                   "training history csv (default: history.csv next to the model)");
  c_td->add_option("--epochs", td.epochs, "training epochs")
      ->capture_default_str();
  c_td->add_option("--batch", td.batch, "minibatch size")
      ->capture_default_str();
  c_td->add_option("--val-fraction", td.val_fraction,
                   "held-out fraction of files")
      ->capture_default_str();
  c_td->callback(run([&] { return run_train_detector(td, g, log); }));

  DetectOpts det;
  CLI::App* c_det = app.add_subcommand("detect", "decode call segments");
  c_det->fallthrough();
  c_det->add_option("--model", det.model, "detector model json")->required();
  c_det->add_option("--audio", det.audio, "audio directory")->required();
  c_det->add_option("--decoder", det.decoder, "decoding strategy")
      ->check(CLI::IsMember({"threshold", "beam", "energy"}))
      ->required();
  c_det->add_option("--out", det.out, "segments csv path")->required();
  c_det->add_option("--threshold", det.threshold,
                    "posterior threshold (default: model's)");
  c_det->add_option("--min-duration", det.min_duration,
                    "minimum segment duration in seconds")
      ->capture_default_str();
  c_det->add_option("--merge-gap", det.merge_gap,
                    "merge segments closer than this in seconds")
      ->capture_default_str();
  c_det->add_option("--beam-width", det.beam_width, "beam width")
      ->capture_default_str();
  c_det->add_option("--band-lo", det.band_lo, "energy baseline band low Hz")
      ->capture_default_str();
  c_det->add_option("--band-hi", det.band_hi, "energy baseline band high Hz")
      ->capture_default_str();
  c_det->add_option("--k-sigma", det.k_sigma,
                    "energy baseline threshold in std devs")
      ->capture_default_str();
  c_det->callback(run([&] { return run_detect(det, g, log); }));

  TrainClsOpts tcls;
  CLI::App* c_tc =
      app.add_subcommand("train-classifier", "train the 3-way call classifier");
  c_tc->fallthrough();
  c_tc->add_option("--data", tcls.data, "audio directory")->required();
  c_tc->add_option("--labels", tcls.labels, "labels csv with classes")
      ->required();
  c_tc->add_option("--detector", tcls.detector,
                   "detector model json used to mine false alarms")
      ->required();
  c_tc->add_option("--out", tcls.out, "classifier model json path")->required();
  c_tc->add_option("--epochs", tcls.epochs, "training epochs")
      ->capture_default_str();
  c_tc->add_option("--batch", tcls.batch, "minibatch size")
      ->capture_default_str();
  c_tc->add_option("--val-fraction", tcls.val_fraction,
                   "held-out fraction of examples")
      ->capture_default_str();
  c_tc->callback(run([&] { return run_train_classifier(tcls, g, log); }));

  ClassifyOpts cls;
  CLI::App* c_cls =
      app.add_subcommand("classify", "label decoded segments by call class");
  c_cls->fallthrough();
  c_cls->add_option("--model", cls.model, "classifier model json")->required();
  c_cls->add_option("--segments", cls.segments, "segments csv")->required();
  c_cls->add_option("--audio", cls.audio, "audio directory")->required();
  c_cls->add_option("--out", cls.out, "classified csv path")->required();
  c_cls->callback(run([&] { return run_classify(cls, g, log); }));

  EvalOpts ev;
  CLI::App* c_ev =
      app.add_subcommand("eval", "score segments against reference labels");
  c_ev->fallthrough();
  c_ev->add_option("--segments", ev.segments, "segments or classified csv")
      ->required();
  c_ev->add_option("--labels", ev.labels, "reference labels csv")->required();
  c_ev->add_option("--report", ev.report, "report json path")->required();
  c_ev->add_option("--audio", ev.audio,
                   "audio directory (enables frame-level metrics)");
  c_ev->add_option("--model", ev.model,
                   "detector model json (enables smoothness)");
  c_ev->add_option("--iou-min", ev.iou_min, "event match IoU floor")
      ->capture_default_str();
  c_ev->callback(run([&] { return run_eval(ev, g, log); }));

  ScalingOpts sc;
  CLI::App* c_sc = app.add_subcommand(
      "scaling-exp", "retrain on growing data fractions and emit curves");
  c_sc->fallthrough();
  c_sc->add_option("--data", sc.data, "audio directory")->required();
  c_sc->add_option("--labels", sc.labels, "labels csv")->required();
  c_sc->add_option("--fractions", sc.fractions, "comma-separated fractions")
      ->capture_default_str();
  c_sc->add_option("--epochs", sc.epochs, "training epochs per fraction")
      ->capture_default_str();
  c_sc->add_option("--batch", sc.batch, "minibatch size")
      ->capture_default_str();
  c_sc->add_option("--val-fraction", sc.val_fraction,
                   "held-out fraction of files, fixed across fractions")
      ->capture_default_str();
  c_sc->add_option("--out", sc.out, "curves csv path")->required();
  c_sc->callback(run([&] { return run_scaling_exp(sc, g, log); }));

  CLI::App* c_gc = app.add_subcommand(
      "gradcheck", "finite-difference check of the full models");
  c_gc->fallthrough();
  c_gc->callback(run([&] { return run_gradcheck(g); }));

  ExportOpts ex;
  CLI::App* c_ex = app.add_subcommand(
      "export-features", "per-call mean MFCC vectors for visualization");
  c_ex->fallthrough();
  c_ex->add_option("--segments", ex.segments, "segments csv")->required();
  c_ex->add_option("--audio", ex.audio, "audio directory")->required();
  c_ex->add_option("--out", ex.out, "embeddings csv path")->required();
  c_ex->callback(run([&] { return run_export_features(ex, g, log); }));

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return code;
}

}  // namespace calldet
