#include "ssmkt/interp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ssmkt/errors.hpp"

namespace ssmkt {

namespace {

// one channel row i: w starts as C_i, then w <- w * Abar_{j+1} walking j
// from i-1 down to 0; alpha[i][j] = <w, Bbar_j>. Empty product on j = i.
void fill_channel(const S6LayerTrace& tr, i64 m, double* out) {
  const i64 T = tr.T, n = tr.n_state, d = tr.d_inner;
  std::vector<double> w(static_cast<std::size_t>(n));
  std::fill(out, out + T * T, 0.0);
  for (i64 i = 0; i < T; ++i) {
    const double* c_i = tr.c.data() + i * n;
    for (i64 s = 0; s < n; ++s) w[static_cast<std::size_t>(s)] = c_i[s];
    {
      const double* bb = tr.bbar.data() + (i * d + m) * n;
      double acc = 0.0;
      for (i64 s = 0; s < n; ++s) acc += w[static_cast<std::size_t>(s)] * bb[s];
      if (!tr.skip.empty()) acc += tr.skip[static_cast<std::size_t>(m)];
      out[i * T + i] = acc;
    }
    for (i64 j = i - 1; j >= 0; --j) {
      const double* ab = tr.abar.data() + ((j + 1) * d + m) * n;
      for (i64 s = 0; s < n; ++s) w[static_cast<std::size_t>(s)] *= ab[s];
      const double* bb = tr.bbar.data() + (j * d + m) * n;
      double acc = 0.0;
      for (i64 s = 0; s < n; ++s) acc += w[static_cast<std::size_t>(s)] * bb[s];
      out[i * T + j] = acc;
    }
  }
}

}  // namespace

std::vector<double> alpha_channel(const S6LayerTrace& trace, i64 channel) {
  if (channel < 0 || channel >= trace.d_inner)
    throw FormatError("alpha_channel: channel " + std::to_string(channel) + " outside [0," +
                      std::to_string(trace.d_inner) + ")");
  std::vector<double> out(static_cast<std::size_t>(trace.T * trace.T));
  fill_channel(trace, channel, out.data());
  return out;
}

InfluenceTensor materialize_alpha(const S6LayerTrace& trace, bool force) {
  const i64 M = trace.d_inner, T = trace.T;
  const long long scalars = static_cast<long long>(M) * T * T;
  if (!force && scalars > 256LL * 1024 * 1024)
    throw NumericError("materialize_alpha: " + std::to_string(scalars) +
                       " scalars exceeds the memory guard (force to override)");
  InfluenceTensor out;
  out.channels = M;
  out.T = T;
  out.alpha.assign(static_cast<std::size_t>(scalars), 0.0);
  for (i64 m = 0; m < M; ++m) fill_channel(trace, m, out.alpha.data() + m * T * T);
  for (double v : out.alpha)
    if (!std::isfinite(v)) throw NumericError("materialize_alpha: non-finite influence value");
  return out;
}

SequenceWeights sequence_weights(const InfluenceTensor& alpha) {
  const i64 M = alpha.channels, T = alpha.T;
  SequenceWeights w;
  w.channels = M;
  w.T = T;
  w.gamma.assign(static_cast<std::size_t>(M * T * T), 0.0);
  w.defined.assign(static_cast<std::size_t>(M * T), 0);
  for (i64 m = 0; m < M; ++m)
    for (i64 i = 1; i < T; ++i) {
      double denom = 0.0;
      for (i64 k = 0; k < i; ++k) denom += alpha.at(m, i, k);
      if (std::abs(denom) < kDenomThreshold) continue;  // flagged undefined, not divided
      w.defined[static_cast<std::size_t>(m * T + i)] = 1;
      for (i64 j = 0; j < i; ++j)
        w.gamma[static_cast<std::size_t>((m * T + i) * T + j)] = alpha.at(m, i, j) / denom;
    }
  return w;
}

ExerciseWeights exercise_weights(const InfluenceTensor& alpha, i64 i) {
  if (i < 1 || i >= alpha.T)
    throw FormatError("exercise_weights: target position must be in [1," +
                      std::to_string(alpha.T) + "), got " + std::to_string(i));
  ExerciseWeights w;
  w.target = i;
  w.beta.assign(static_cast<std::size_t>(i), 0.0);
  for (i64 m = 0; m < alpha.channels; ++m)
    for (i64 j = 0; j < i; ++j) w.beta[static_cast<std::size_t>(j)] += alpha.at(m, i, j);
  const double mx = *std::max_element(w.beta.begin(), w.beta.end());
  w.gamma.resize(static_cast<std::size_t>(i));
  double denom = 0.0;
  for (i64 j = 0; j < i; ++j) {
    w.gamma[static_cast<std::size_t>(j)] = std::exp(w.beta[static_cast<std::size_t>(j)] - mx);
    denom += w.gamma[static_cast<std::size_t>(j)];
  }
  for (double& g : w.gamma) g /= denom;
  return w;
}

// ---------------------------------------------------------------------------
// exports

namespace {

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// diverging blue-white-red; x in [-1, 1]
std::string diverging_color(double x) {
  x = std::max(-1.0, std::min(1.0, x));
  int r, g, b;
  if (x >= 0) {
    r = 255;
    g = static_cast<int>(255 * (1.0 - x));
    b = static_cast<int>(255 * (1.0 - x));
  } else {
    r = static_cast<int>(255 * (1.0 + x));
    g = static_cast<int>(255 * (1.0 + x));
    b = 255;
  }
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

void xml_escape_into(std::string& out, const std::string& s) {
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += ch;
    }
  }
}

}  // namespace

void write_sequence_grid_csv(const std::string& path, const SequenceWeights& w, i64 channel) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  for (i64 j = 0; j < w.T; ++j) f << (j ? "," : "") << "j" << j;
  f << "\n";
  for (i64 i = 1; i < w.T; ++i) {
    const bool def = w.row_defined(channel, i);
    for (i64 j = 0; j < w.T; ++j) {
      if (j) f << ",";
      if (j < i) f << (def ? fmt6(w.at(channel, i, j)) : std::string("nan"));
    }
    f << "\n";
  }
}

void write_heatmap_svg(const std::string& path, const SequenceWeights& w, i64 channel,
                       const std::vector<std::string>& labels, const std::string& title) {
  const i64 T = w.T;
  double peak = 0.0;
  for (i64 i = 1; i < T; ++i)
    if (w.row_defined(channel, i))
      for (i64 j = 0; j < i; ++j) peak = std::max(peak, std::abs(w.at(channel, i, j)));
  if (peak == 0.0) peak = 1.0;

  const int cell = std::max(4, static_cast<int>(720 / std::max<i64>(T, 1)));
  const int margin = 90;
  const int size = margin + static_cast<int>(T)*cell + 20;
  const bool show_labels = T <= 64;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(size + 60) +
         "\" height=\"" + std::to_string(size + 40) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(margin) + "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">";
  xml_escape_into(svg, title);
  svg += "</text>\n";
  for (i64 i = 1; i < T; ++i) {
    if (!w.row_defined(channel, i)) continue;
    for (i64 j = 0; j < i; ++j) {
      const double v = w.at(channel, i, j) / peak;
      svg += "<rect x=\"" + std::to_string(margin + static_cast<int>(j) * cell) + "\" y=\"" +
             std::to_string(40 + static_cast<int>(i) * cell) + "\" width=\"" + std::to_string(cell) +
             "\" height=\"" + std::to_string(cell) + "\" fill=\"" + diverging_color(v) + "\"/>\n";
    }
  }
  if (show_labels && !labels.empty()) {
    for (i64 t = 0; t < T && t < static_cast<i64>(labels.size()); ++t) {
      svg += "<text x=\"" + std::to_string(margin - 6) + "\" y=\"" +
             std::to_string(40 + static_cast<int>(t) * cell + cell) +
             "\" font-family=\"sans-serif\" font-size=\"" + std::to_string(std::min(cell, 11)) +
             "\" text-anchor=\"end\">";
      xml_escape_into(svg, labels[static_cast<std::size_t>(t)]);
      svg += "</text>\n";
      svg += "<text x=\"" + std::to_string(margin + static_cast<int>(t) * cell + cell / 2) + "\" y=\"" +
             std::to_string(40 + static_cast<int>(T) * cell + 14) +
             "\" font-family=\"sans-serif\" font-size=\"" + std::to_string(std::min(cell, 11)) +
             "\" text-anchor=\"middle\" transform=\"rotate(90 " +
             std::to_string(margin + static_cast<int>(t) * cell + cell / 2) + " " +
             std::to_string(40 + static_cast<int>(T) * cell + 14) + ")\">";
      xml_escape_into(svg, labels[static_cast<std::size_t>(t)]);
      svg += "</text>\n";
    }
  }
  // scale legend
  svg += "<text x=\"" + std::to_string(margin) + "\" y=\"" + std::to_string(size + 24) +
         "\" font-family=\"sans-serif\" font-size=\"11\">-" + fmt6(peak) +
         " (blue) .. 0 (white) .. +" + fmt6(peak) + " (red); rows = target i, cols = source j</text>\n";
  svg += "</svg>\n";

  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << svg;
}

void write_exercise_topk_csv(const std::string& path, const ExerciseWeights& w,
                             const std::vector<std::string>& labels, i64 top_k) {
  std::vector<i64> order(w.beta.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](i64 a, i64 b) { return w.gamma[static_cast<std::size_t>(a)] > w.gamma[static_cast<std::size_t>(b)]; });
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << "rank,j,label,beta,gamma\n";
  const i64 k = std::min<i64>(top_k, static_cast<i64>(order.size()));
  for (i64 r = 0; r < k; ++r) {
    const i64 j = order[static_cast<std::size_t>(r)];
    f << (r + 1) << "," << j << ","
      << (j < static_cast<i64>(labels.size()) ? labels[static_cast<std::size_t>(j)] : "") << ","
      << fmt6(w.beta[static_cast<std::size_t>(j)]) << "," << fmt6(w.gamma[static_cast<std::size_t>(j)]) << "\n";
  }
}

void write_exercise_strip_svg(const std::string& path, const ExerciseWeights& w,
                              const std::vector<std::string>& labels, const std::string& title) {
  const i64 n = static_cast<i64>(w.gamma.size());
  double peak = 0.0;
  for (double g : w.gamma) peak = std::max(peak, std::abs(g));
  if (peak == 0.0) peak = 1.0;
  const int cell = std::max(6, static_cast<int>(720 / std::max<i64>(n, 1)));
  const int width = 40 + static_cast<int>(n) * cell + 40;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"140\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"40\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">";
  xml_escape_into(svg, title);
  svg += "</text>\n";
  for (i64 j = 0; j < n; ++j) {
    svg += "<rect x=\"" + std::to_string(40 + static_cast<int>(j) * cell) +
           "\" y=\"40\" width=\"" + std::to_string(cell) + "\" height=\"" + std::to_string(cell) +
           "\" fill=\"" + diverging_color(w.gamma[static_cast<std::size_t>(j)] / peak) + "\"/>\n";
    if (n <= 64) {
      svg += "<text x=\"" + std::to_string(40 + static_cast<int>(j) * cell + cell / 2) + "\" y=\"" +
             std::to_string(40 + cell + 14) + "\" font-family=\"sans-serif\" font-size=\"10\" " +
             "text-anchor=\"middle\">";
      xml_escape_into(svg, j < static_cast<i64>(labels.size()) ? labels[static_cast<std::size_t>(j)] : std::to_string(j));
      svg += "</text>\n";
    }
  }
  svg += "</svg>\n";
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << svg;
}

}  // namespace ssmkt
