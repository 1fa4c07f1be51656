#pragma once

// On-disk contracts: JSON model files (format_version 1) whose parameter
// values are decimal strings with 17 significant digits (exact double
// round-trip, canonical sorted-key output), and the labels/segments CSVs.
// Parameter arrays are flattened column-major.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "calldet/classifier.hpp"
#include "calldet/detector.hpp"
#include "calldet/errors.hpp"
#include "calldet/util.hpp"

namespace calldet {

namespace persist_detail {

using nlohmann::json;

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline double parse_double(const std::string& s, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || s.empty())
    throw Error(ErrorCode::Corrupt, std::string("bad number in ") + what);
  return v;
}

inline json array17(const double* data, Index n) {
  json a = json::array();
  for (Index i = 0; i < n; ++i) a.push_back(fmt17(data[i]));
  return a;
}

inline void fill_from17(const json& a, double* data, Index n, const char* name) {
  if (!a.is_array() || static_cast<Index>(a.size()) != n)
    throw Error(ErrorCode::ShapeMismatch,
                std::string(name) + ": declared shape vs array length");
  for (Index i = 0; i < n; ++i)
    data[i] = parse_double(a[static_cast<std::size_t>(i)].get<std::string>(),
                           name);
}

inline json matrix_entry(const MatrixXd& m) {
  return json{{"shape", {m.rows(), m.cols()}},
              {"values", array17(m.data(), m.size())}};
}

inline json vector_entry(const VectorXd& v) {
  return json{{"shape", {v.size()}}, {"values", array17(v.data(), v.size())}};
}

inline void read_matrix(const json& e, MatrixXd& m, Index rows, Index cols,
                        const char* name) {
  if (!e.contains("shape") || !e.contains("values"))
    throw Error(ErrorCode::Corrupt, std::string(name) + ": missing fields");
  const auto& sh = e["shape"];
  if (sh.size() != 2 || sh[0].get<Index>() != rows || sh[1].get<Index>() != cols)
    throw Error(ErrorCode::ShapeMismatch, std::string(name) + ": shape");
  m.resize(rows, cols);
  fill_from17(e["values"], m.data(), m.size(), name);
}

inline void read_vector(const json& e, VectorXd& v, Index n, const char* name) {
  if (!e.contains("shape") || !e.contains("values"))
    throw Error(ErrorCode::Corrupt, std::string(name) + ": missing fields");
  const auto& sh = e["shape"];
  if (sh.size() != 1 || sh[0].get<Index>() != n)
    throw Error(ErrorCode::ShapeMismatch, std::string(name) + ": shape");
  v.resize(n);
  fill_from17(e["values"], v.data(), v.size(), name);
}

inline json mfcc_to_json(const MfccConfig& c) {
  return json{{"sample_rate_hz", c.sample_rate_hz},
              {"frame_len_sec", c.frame_len_sec},
              {"hop_sec", c.hop_sec},
              {"n_fft", c.n_fft},
              {"n_mels", c.n_mels},
              {"n_mfcc", c.n_mfcc},
              {"fmin_hz", c.fmin_hz},
              {"fmax_hz", c.fmax_hz},
              {"log_floor", c.log_floor}};
}

inline MfccConfig mfcc_from_json(const json& j) {
  MfccConfig c;
  c.sample_rate_hz = j.at("sample_rate_hz").get<int>();
  c.frame_len_sec = j.at("frame_len_sec").get<double>();
  c.hop_sec = j.at("hop_sec").get<double>();
  c.n_fft = j.at("n_fft").get<int>();
  c.n_mels = j.at("n_mels").get<int>();
  c.n_mfcc = j.at("n_mfcc").get<int>();
  c.fmin_hz = j.at("fmin_hz").get<double>();
  c.fmax_hz = j.at("fmax_hz").get<double>();
  c.log_floor = j.at("log_floor").get<double>();
  return c;
}

inline std::string layer_key(std::size_t li, bool fwd, const char* tensor) {
  return "layer" + std::to_string(li) + (fwd ? ".fwd." : ".bwd.") + tensor;
}

inline json model_to_json(const char* kind, const MfccConfig& mfcc,
                          const FeatureStats& stats, const BiLstmStack& stack,
                          const LinearHead& head) {
  json params;
  for (std::size_t li = 0; li < stack.layers.size(); ++li) {
    for (const bool fwd : {true, false}) {
      const LstmDirParams& p = fwd ? stack.layers[li].fwd : stack.layers[li].bwd;
      params[layer_key(li, fwd, "w_in")] = matrix_entry(p.w_in);
      params[layer_key(li, fwd, "w_rec")] = matrix_entry(p.w_rec);
      params[layer_key(li, fwd, "bias")] = vector_entry(p.bias);
    }
  }
  params["head.weights"] = matrix_entry(head.weights);
  params["head.bias"] = vector_entry(head.bias);
  return json{{"format_version", 1},
              {"kind", kind},
              {"mfcc", mfcc_to_json(mfcc)},
              {"stats",
               {{"mean", array17(stats.mean.data(), stats.mean.size())},
                {"std", array17(stats.std.data(), stats.std.size())}}},
              {"architecture",
               {{"layers", stack.layers.size()},
                {"hidden_per_direction", stack.hidden_size},
                {"directions", 2},
                {"input_size", stack.input_size},
                {"head_out", head.weights.rows()},
                {"head_in", head.weights.cols()}}},
              {"parameters", params}};
}

inline json load_json_checked(const std::string& path, const char* kind) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Corrupt, path + ": " + e.what());
  }
  if (!j.contains("format_version") || !j["format_version"].is_number_integer())
    throw Error(ErrorCode::Corrupt, path + ": missing format_version");
  if (j["format_version"].get<int>() != 1)
    throw Error(ErrorCode::BadVersion,
                "format_version " + j["format_version"].dump());
  if (j.value("kind", "") != kind)
    throw Error(ErrorCode::KindMismatch,
                path + ": kind '" + j.value("kind", "") + "', expected '" +
                    kind + "'");
  return j;
}

inline void json_to_model(const json& j, MfccConfig& mfcc, FeatureStats& stats,
                          BiLstmStack& stack, LinearHead& head,
                          Index expected_head_out) {
  try {
    mfcc = mfcc_from_json(j.at("mfcc"));
    const json& arch = j.at("architecture");
    const auto n_layers = arch.at("layers").get<std::size_t>();
    stack.hidden_size = arch.at("hidden_per_direction").get<int>();
    stack.input_size = arch.at("input_size").get<int>();
    const Index head_out = arch.at("head_out").get<Index>();
    const Index head_in = arch.at("head_in").get<Index>();
    if (head_out != expected_head_out)
      throw Error(ErrorCode::ShapeMismatch, "unexpected head output width");

    stats.mean.resize(mfcc.n_mfcc);
    stats.std.resize(mfcc.n_mfcc);
    fill_from17(j.at("stats").at("mean"), stats.mean.data(), mfcc.n_mfcc,
                "stats.mean");
    fill_from17(j.at("stats").at("std"), stats.std.data(), mfcc.n_mfcc,
                "stats.std");

    const json& params = j.at("parameters");
    const Index h = stack.hidden_size;
    stack.layers.resize(n_layers);
    for (std::size_t li = 0; li < n_layers; ++li) {
      const Index d = li == 0 ? stack.input_size : 2 * h;
      for (const bool fwd : {true, false}) {
        LstmDirParams& p = fwd ? stack.layers[li].fwd : stack.layers[li].bwd;
        read_matrix(params.at(layer_key(li, fwd, "w_in")), p.w_in, 4 * h, d,
                    "w_in");
        read_matrix(params.at(layer_key(li, fwd, "w_rec")), p.w_rec, 4 * h, h,
                    "w_rec");
        read_vector(params.at(layer_key(li, fwd, "bias")), p.bias, 4 * h,
                    "bias");
      }
    }
    read_matrix(params.at("head.weights"), head.weights, head_out, head_in,
                "head.weights");
    read_vector(params.at("head.bias"), head.bias, head_out, "head.bias");
    if (head_in != stack.output_size())
      throw Error(ErrorCode::ShapeMismatch, "head input vs stack output");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Corrupt, std::string("model json: ") + e.what());
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << text;
}

}  // namespace persist_detail

inline void save_model(const DetectorModel& model, const std::string& path) {
  using persist_detail::json;
  json j = persist_detail::model_to_json("detector", model.mfcc, model.stats,
                                         model.stack, model.head);
  j["decision_threshold"] = persist_detail::fmt17(model.decision_threshold);
  persist_detail::write_text(path, j.dump(2) + "\n");
}

inline DetectorModel load_detector_model(const std::string& path) {
  const auto j = persist_detail::load_json_checked(path, "detector");
  DetectorModel m;
  persist_detail::json_to_model(j, m.mfcc, m.stats, m.stack, m.head, 1);
  m.decision_threshold = persist_detail::parse_double(
      j.at("decision_threshold").get<std::string>(), "decision_threshold");
  if (!(m.decision_threshold > 0.0 && m.decision_threshold < 1.0))
    throw Error(ErrorCode::Corrupt, "decision_threshold outside (0, 1)");
  return m;
}

inline void save_model(const CallClassifierModel& model,
                       const std::string& path) {
  const auto j = persist_detail::model_to_json(
      "call_classifier", model.mfcc, model.stats, model.stack, model.head);
  persist_detail::write_text(path, j.dump(2) + "\n");
}

inline CallClassifierModel load_call_classifier_model(const std::string& path) {
  const auto j = persist_detail::load_json_checked(path, "call_classifier");
  CallClassifierModel m;
  persist_detail::json_to_model(j, m.mfcc, m.stats, m.stack, m.head, 3);
  return m;
}

// ---------------------------------------------------------------------------
// CSV formats

struct LabelRow {
  std::string file;
  double start_sec = 0.0;
  double end_sec = 0.0;
  std::optional<int> cls;  // empty for detection-only labels
  std::size_t line = 0;    // 1-based source line, set by read_labels
};

struct SegmentRow {
  std::string file;
  double start_sec = 0.0;
  double end_sec = 0.0;
  double score = 0.0;
  std::optional<int> cls;
  std::optional<double> prob;
};

namespace persist_detail {

inline double csv_double(const std::string& s, std::size_t line,
                         const char* col) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw Error(ErrorCode::ParseError, "line " + std::to_string(line) +
                                           ": bad " + col + " '" + s + "'");
  return v;
}

}  // namespace persist_detail

inline std::vector<LabelRow> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  std::vector<LabelRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != "file,start_sec,end_sec,class" &&
          line != "file,start_sec,end_sec,class\r")
        throw Error(ErrorCode::ParseError, "line 1: unexpected header");
      continue;
    }
    if (line.empty() || line == "\r") continue;
    const auto cols = split_csv_line(line);
    if (cols.size() != 4)
      throw Error(ErrorCode::ParseError,
                  "line " + std::to_string(lineno) + ": expected 4 columns");
    LabelRow r;
    r.file = cols[0];
    r.start_sec = persist_detail::csv_double(cols[1], lineno, "start_sec");
    r.end_sec = persist_detail::csv_double(cols[2], lineno, "end_sec");
    if (!cols[3].empty())
      r.cls = static_cast<int>(
          persist_detail::csv_double(cols[3], lineno, "class"));
    if (!(r.start_sec < r.end_sec))
      throw Error(ErrorCode::ParseError,
                  "line " + std::to_string(lineno) + ": start >= end");
    r.line = lineno;
    rows.push_back(std::move(r));
  }
  // overlap check within each file, reported by source line numbers
  std::vector<const LabelRow*> sorted;
  sorted.reserve(rows.size());
  for (const LabelRow& r : rows) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const LabelRow* a, const LabelRow* b) {
              if (a->file != b->file) return a->file < b->file;
              return a->start_sec < b->start_sec;
            });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->file == sorted[i - 1]->file &&
        sorted[i]->start_sec < sorted[i - 1]->end_sec)
      throw Error(ErrorCode::OverlapError,
                  "rows at lines " + std::to_string(sorted[i - 1]->line) +
                      " and " + std::to_string(sorted[i]->line) + " overlap");
  }
  return rows;
}

inline void write_labels(const std::string& path,
                         const std::vector<LabelRow>& rows) {
  std::ostringstream out;
  out << "file,start_sec,end_sec,class\n";
  for (const LabelRow& r : rows) {
    out << r.file << ',' << persist_detail::fmt6(r.start_sec) << ','
        << persist_detail::fmt6(r.end_sec) << ',';
    if (r.cls) out << *r.cls;
    out << '\n';
  }
  persist_detail::write_text(path, out.str());
}

inline void write_segments(const std::string& path,
                           const std::vector<SegmentRow>& rows) {
  std::ostringstream out;
  out << "file,start_sec,end_sec,score,class,prob\n";
  for (const SegmentRow& r : rows) {
    out << r.file << ',' << persist_detail::fmt6(r.start_sec) << ','
        << persist_detail::fmt6(r.end_sec) << ','
        << persist_detail::fmt6(r.score) << ',';
    if (r.cls) out << *r.cls;
    out << ',';
    if (r.prob) out << persist_detail::fmt6(*r.prob);
    out << '\n';
  }
  persist_detail::write_text(path, out.str());
}

inline std::vector<SegmentRow> read_segments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  std::vector<SegmentRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != "file,start_sec,end_sec,score,class,prob" &&
          line != "file,start_sec,end_sec,score,class,prob\r")
        throw Error(ErrorCode::ParseError, "line 1: unexpected header");
      continue;
    }
    if (line.empty() || line == "\r") continue;
    const auto cols = split_csv_line(line);
    if (cols.size() != 6)
      throw Error(ErrorCode::ParseError,
                  "line " + std::to_string(lineno) + ": expected 6 columns");
    SegmentRow r;
    r.file = cols[0];
    r.start_sec = persist_detail::csv_double(cols[1], lineno, "start_sec");
    r.end_sec = persist_detail::csv_double(cols[2], lineno, "end_sec");
    r.score = persist_detail::csv_double(cols[3], lineno, "score");
    if (!cols[4].empty())
      r.cls = static_cast<int>(
          persist_detail::csv_double(cols[4], lineno, "class"));
    if (!cols[5].empty())
      r.prob = persist_detail::csv_double(cols[5], lineno, "prob");
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace calldet
