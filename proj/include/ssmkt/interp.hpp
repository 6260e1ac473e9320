#pragma once

#include <string>
#include <vector>

#include "ssmkt/s6.hpp"

// Hidden-attention extraction: alpha[m,i,j] = C_i (prod_{k=j+1..i} Abar_k)
// Bbar_j materialized from a captured S6 trace, the sequence-level
// normalization gamma[m,i,j] = alpha / sum_{k<i} alpha, and the
// exercise-level softmax over channel-summed alphas.

namespace ssmkt {

// Lower-triangular (j <= i); entries above the diagonal are exact zeros.
struct InfluenceTensor {
  i64 channels = 0, T = 0;
  std::vector<double> alpha;  // (M, T, T) row-major

  double at(i64 m, i64 i, i64 j) const {
    return alpha[static_cast<std::size_t>((m * T + i) * T + j)];
  }
};

// Refuses to allocate more than 256 * 1024^2 scalars unless forced (the
// CLI surfaces this as --force).
InfluenceTensor materialize_alpha(const S6LayerTrace& trace, bool force = false);

// Single channel, (T, T) row-major; same suffix-product recurrence.
std::vector<double> alpha_channel(const S6LayerTrace& trace, i64 channel);

// gamma[m,i,j] = alpha[m,i,j] / sum_{k=0}^{i-1} alpha[m,i,k], defined over
// j < i. Row i=0 has no predecessors; rows whose denominator is below the
// threshold in absolute value are flagged undefined instead of divided.
struct SequenceWeights {
  i64 channels = 0, T = 0;
  std::vector<double> gamma;    // (M, T, T); zeros where undefined or j >= i
  std::vector<char> defined;    // (M, T) per-row flag

  double at(i64 m, i64 i, i64 j) const {
    return gamma[static_cast<std::size_t>((m * T + i) * T + j)];
  }
  bool row_defined(i64 m, i64 i) const { return defined[static_cast<std::size_t>(m * T + i)] != 0; }
};

inline constexpr double kDenomThreshold = 1e-12;

SequenceWeights sequence_weights(const InfluenceTensor& alpha);

// beta_j = sum_m alpha[m,i,j]; gamma = softmax(beta) over j < i with max
// subtraction. Requires i >= 1.
struct ExerciseWeights {
  i64 target = 0;
  std::vector<double> beta;   // (i)
  std::vector<double> gamma;  // (i), sums to 1
};

ExerciseWeights exercise_weights(const InfluenceTensor& alpha, i64 i);

// ---------------------------------------------------------------------------
// exports

// Grid CSV: header "j0..j{T-1}", one data row per i = 1..T-1 (row 0 has no
// predecessors and is omitted), entries %.6g, cells at j >= i left empty.
// An undefined row is written as "nan" in every defined cell.
void write_sequence_grid_csv(const std::string& path, const SequenceWeights& w, i64 channel);

// Self-contained SVG heatmap of the triangular grid on a diverging color
// scale (signed weights are rendered, not clamped). Labels follow the
// "concept(response)" convention.
void write_heatmap_svg(const std::string& path, const SequenceWeights& w, i64 channel,
                       const std::vector<std::string>& labels, const std::string& title);

// Exercise-level exports: top-k table (rank, j, label, beta, gamma) and a
// one-row strip heatmap of gamma over past positions.
void write_exercise_topk_csv(const std::string& path, const ExerciseWeights& w,
                             const std::vector<std::string>& labels, i64 top_k);
void write_exercise_strip_svg(const std::string& path, const ExerciseWeights& w,
                              const std::vector<std::string>& labels, const std::string& title);

}  // namespace ssmkt
