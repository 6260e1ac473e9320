#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssmkt/rng.hpp"
#include "ssmkt/tensor.hpp"

// Dataset ingestion, windowing, splits, metrics, and the synthetic mastery
// generator used to make training claims testable at desk scale.

namespace ssmkt {

struct Interaction {
  i64 question = 0;
  i64 concept_id = 0;
  i64 response = 0;  // 0 or 1
};

struct InteractionSequence {
  i64 student = 0;
  std::vector<Interaction> items;
};

// Dense re-indexing of raw ids, persisted as "kind,raw_id,dense_id" lines.
struct VocabMaps {
  std::unordered_map<i64, i64> question, concept_id, student;

  i64 n_questions() const { return static_cast<i64>(question.size()); }
  i64 n_concepts() const { return static_cast<i64>(concept_id.size()); }
  i64 n_students() const { return static_cast<i64>(student.size()); }

  void save(const std::string& path) const;
  static VocabMaps load(const std::string& path);
};

struct LoadedData {
  std::vector<InteractionSequence> sequences;  // dense ids, per-student order preserved
  VocabMaps vocab;
};

// CSV with header exactly `student_id,question_id,concept_id,response`
// (optional trailing `timestamp`; when present rows are stably sorted per
// student by it). Malformed rows raise FormatError with the line number.
LoadedData load_interactions(const std::string& path);

// Fixed-length, mask-padded window of one student's sequence.
struct Window {
  i64 student = 0;
  i64 index = 0;  // window ordinal within the student
  std::vector<i64> q, c, r;  // length max_len, zero-padded past `valid`
  i64 valid = 0;
};

// Consecutive non-overlapping windows of max_len; shorter tails padded.
std::vector<Window> window_sequences(const std::vector<InteractionSequence>& seqs, i64 max_len);

struct SplitWindows {
  std::vector<Window> train, val, test;
};

// 70/10/20 by student with a seeded shuffle; no student spans splits.
SplitWindows split_by_student(const std::vector<Window>& windows, std::uint64_t seed);

// Area under the ROC curve, Mann-Whitney formulation; ties contribute 1/2.
// Undefined (nullopt) when labels are single-class or empty.
std::optional<double> auc(const std::vector<double>& preds, const std::vector<i64>& labels);

// Thresholded accuracy; p >= threshold counts as a positive prediction.
std::optional<double> acc(const std::vector<double>& preds, const std::vector<i64>& labels,
                          double threshold = 0.5);

// ---------------------------------------------------------------------------
// Synthetic mastery dataset. Per-student per-concept mastery m starts at 0;
// question difficulty delta_q ~ N(0,1); P(correct) = sigmoid(slope*(m -
// delta_q)); after each attempt m grows by gain_correct or gain_incorrect.
// The generator emits the Bayes probabilities, so an oracle AUC comes free.

struct SynthConfig {
  i64 n_students = 500;
  i64 n_concepts = 10;
  i64 n_questions = 50;
  i64 seq_len = 100;
  std::uint64_t seed = 7;
  double slope = 1.5;
  double gain_correct = 0.3;
  double gain_incorrect = 0.1;
  bool zero_difficulty = false;
};

struct SynthRow {
  i64 student, question, concept_id, response;
  double p_star;  // Bayes-optimal probability of a correct response
};

struct SynthResult {
  std::vector<SynthRow> rows;
  std::optional<double> oracle_auc;
};

SynthResult synth_mastery(const SynthConfig& cfg);

// Writes the generated rows in the input-CSV schema (plus a sidecar of
// Bayes probabilities when oracle_path is nonempty).
void write_synth_csv(const SynthResult& synth, const std::string& csv_path,
                     const std::string& oracle_path = "");

// Permutes responses across all valid positions of all windows: the
// label-permuted null for the learning-sanity check.
void shuffle_responses(std::vector<Window>& windows, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Padded batch view: (B, T_max) id arrays plus mask; masked-out positions
// are excluded from loss and metrics.

struct Batch {
  i64 batch = 0, t_max = 0;
  std::vector<i64> q, c, r;   // (B * T_max)
  std::vector<char> mask;     // (B * T_max)
};

Batch make_batch(const std::vector<Window>& windows, const std::vector<i64>& indices);

// ---------------------------------------------------------------------------
// Prepared-dataset directory: split CSVs with dense ids, the vocabulary
// map, and a key = value meta file. Everything the CLI writes here can be
// read back by the CLI.

struct PreparedMeta {
  i64 n_questions = 0, n_concepts = 0, n_students = 0;
  i64 max_len = 200;
  std::uint64_t seed = 0;
};

struct PreparedData {
  SplitWindows splits;
  PreparedMeta meta;
};

void save_prepared(const std::string& dir, const SplitWindows& splits, const VocabMaps& vocab,
                   const PreparedMeta& meta);
PreparedData load_prepared(const std::string& dir);

}  // namespace ssmkt
