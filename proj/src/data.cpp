#include "ssmkt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssmkt/errors.hpp"

namespace ssmkt {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

i64 parse_i64(const std::string& s, i64 line_no, const char* field) {
  try {
    std::size_t pos = 0;
    i64 v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("line " + std::to_string(line_no) + ": bad " + field + " value '" + s + "'");
  }
}

double parse_double(const std::string& s, i64 line_no, const char* field) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("line " + std::to_string(line_no) + ": bad " + field + " value '" + s + "'");
  }
}

}  // namespace

void VocabMaps::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write vocabulary map: " + path);
  auto dump = [&](const char* kind, const std::unordered_map<i64, i64>& m) {
    std::vector<std::pair<i64, i64>> rows(m.begin(), m.end());
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    for (const auto& [raw, dense] : rows) f << kind << "," << raw << "," << dense << "\n";
  };
  dump("question", question);
  dump("concept", concept_id);
  dump("student", student);
}

VocabMaps VocabMaps::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read vocabulary map: " + path);
  VocabMaps v;
  std::string line;
  i64 line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto parts = split_csv_line(line);
    if (parts.size() != 3)
      throw FormatError("vocab line " + std::to_string(line_no) + ": expected kind,raw_id,dense_id");
    i64 raw = parse_i64(parts[1], line_no, "raw_id");
    i64 dense = parse_i64(parts[2], line_no, "dense_id");
    if (parts[0] == "question")
      v.question[raw] = dense;
    else if (parts[0] == "concept")
      v.concept_id[raw] = dense;
    else if (parts[0] == "student")
      v.student[raw] = dense;
    else
      throw FormatError("vocab line " + std::to_string(line_no) + ": unknown kind '" + parts[0] + "'");
  }
  return v;
}

LoadedData load_interactions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open input CSV: " + path);
  std::string line;
  if (!std::getline(f, line)) throw FormatError(path + ": empty file");
  auto header = split_csv_line(line);
  bool has_ts = false;
  const std::vector<std::string> base = {"student_id", "question_id", "concept_id", "response"};
  if (header.size() == 5 && header[4] == "timestamp")
    has_ts = true;
  else if (header.size() != 4)
    throw FormatError(path + ": bad header '" + line +
                      "', expected student_id,question_id,concept_id,response[,timestamp]");
  for (std::size_t i = 0; i < 4; ++i)
    if (header[i] != base[i])
      throw FormatError(path + ": bad header '" + line +
                        "', expected student_id,question_id,concept_id,response[,timestamp]");

  struct RawRow {
    i64 student, question, concept_id, response;
    double ts;
    i64 order;
  };
  std::vector<RawRow> rows;
  i64 line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto parts = split_csv_line(line);
    if (parts.size() != (has_ts ? 5u : 4u))
      throw FormatError("line " + std::to_string(line_no) + ": expected " +
                        std::to_string(has_ts ? 5 : 4) + " fields, got " + std::to_string(parts.size()));
    RawRow r;
    r.student = parse_i64(parts[0], line_no, "student_id");
    r.question = parse_i64(parts[1], line_no, "question_id");
    r.concept_id = parse_i64(parts[2], line_no, "concept_id");
    if (parts[3] != "0" && parts[3] != "1")
      throw FormatError("line " + std::to_string(line_no) + ": response must be 0 or 1, got '" +
                        parts[3] + "'");
    r.response = parts[3] == "1" ? 1 : 0;
    r.ts = has_ts ? parse_double(parts[4], line_no, "timestamp") : 0.0;
    r.order = line_no;
    rows.push_back(r);
  }

  LoadedData out;
  std::unordered_map<i64, std::size_t> seq_of_student;
  for (const RawRow& r : rows) {
    auto [it, fresh] = out.vocab.student.try_emplace(r.student, out.vocab.n_students());
    if (fresh) {
      seq_of_student[r.student] = out.sequences.size();
      out.sequences.push_back(InteractionSequence{it->second, {}});
    }
  }
  // per-student stable sort by timestamp; without timestamps input order holds
  std::stable_sort(rows.begin(), rows.end(), [&](const RawRow& a, const RawRow& b) {
    if (a.student != b.student)
      return seq_of_student.at(a.student) < seq_of_student.at(b.student);
    return a.ts < b.ts;
  });
  for (const RawRow& r : rows) {
    auto qit = out.vocab.question.try_emplace(r.question, out.vocab.n_questions()).first;
    auto cit = out.vocab.concept_id.try_emplace(r.concept_id, out.vocab.n_concepts()).first;
    out.sequences[seq_of_student.at(r.student)].items.push_back(
        Interaction{qit->second, cit->second, r.response});
  }
  return out;
}

std::vector<Window> window_sequences(const std::vector<InteractionSequence>& seqs, i64 max_len) {
  if (max_len <= 0) throw FormatError("window: max_len must be positive");
  std::vector<Window> out;
  for (const auto& s : seqs) {
    const i64 n = static_cast<i64>(s.items.size());
    i64 index = 0;
    for (i64 start = 0; start < n; start += max_len, ++index) {
      Window w;
      w.student = s.student;
      w.index = index;
      w.valid = std::min(max_len, n - start);
      w.q.assign(static_cast<std::size_t>(max_len), 0);
      w.c.assign(static_cast<std::size_t>(max_len), 0);
      w.r.assign(static_cast<std::size_t>(max_len), 0);
      for (i64 t = 0; t < w.valid; ++t) {
        const Interaction& it = s.items[static_cast<std::size_t>(start + t)];
        w.q[static_cast<std::size_t>(t)] = it.question;
        w.c[static_cast<std::size_t>(t)] = it.concept_id;
        w.r[static_cast<std::size_t>(t)] = it.response;
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

SplitWindows split_by_student(const std::vector<Window>& windows, std::uint64_t seed) {
  std::vector<i64> students;
  for (const Window& w : windows)
    if (std::find(students.begin(), students.end(), w.student) == students.end())
      students.push_back(w.student);
  std::sort(students.begin(), students.end());
  Rng rng(seed);
  rng.shuffle(students);
  const i64 n = static_cast<i64>(students.size());
  const i64 n_train = static_cast<i64>(0.7 * static_cast<double>(n));
  const i64 n_val = static_cast<i64>(0.1 * static_cast<double>(n));
  std::unordered_map<i64, int> bucket;  // 0 train, 1 val, 2 test
  for (i64 i = 0; i < n; ++i) bucket[students[static_cast<std::size_t>(i)]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
  SplitWindows out;
  for (const Window& w : windows) {
    switch (bucket.at(w.student)) {
      case 0: out.train.push_back(w); break;
      case 1: out.val.push_back(w); break;
      default: out.test.push_back(w); break;
    }
  }
  return out;
}

std::optional<double> auc(const std::vector<double>& preds, const std::vector<i64>& labels) {
  if (preds.size() != labels.size()) throw FormatError("auc: preds/labels length mismatch");
  const std::size_t n = preds.size();
  std::size_t n_pos = 0;
  for (i64 l : labels) n_pos += l > 0 ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return preds[a] < preds[b]; });

  // average ranks over tie groups (1-based)
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && preds[order[j + 1]] == preds[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    if (labels[k] > 0) rank_sum_pos += rank[k];
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::optional<double> acc(const std::vector<double>& preds, const std::vector<i64>& labels,
                          double threshold) {
  if (preds.size() != labels.size()) throw FormatError("acc: preds/labels length mismatch");
  if (preds.empty()) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const i64 guess = preds[i] >= threshold ? 1 : 0;
    hits += guess == labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

SynthResult synth_mastery(const SynthConfig& cfg) {
  if (cfg.n_questions < cfg.n_concepts)
    throw FormatError("synth_mastery: need at least one question per concept");
  Rng rng(cfg.seed);
  std::vector<double> difficulty(static_cast<std::size_t>(cfg.n_questions), 0.0);
  if (!cfg.zero_difficulty)
    for (double& d : difficulty) d = rng.normal();

  // question q belongs to concept q % n_concepts
  std::vector<i64> pool_size(static_cast<std::size_t>(cfg.n_concepts), 0);
  for (i64 q = 0; q < cfg.n_questions; ++q) pool_size[static_cast<std::size_t>(q % cfg.n_concepts)]++;

  SynthResult out;
  out.rows.reserve(static_cast<std::size_t>(cfg.n_students * cfg.seq_len));
  std::vector<double> preds;
  std::vector<i64> labels;
  for (i64 s = 0; s < cfg.n_students; ++s) {
    std::vector<double> mastery(static_cast<std::size_t>(cfg.n_concepts), 0.0);
    for (i64 t = 0; t < cfg.seq_len; ++t) {
      const i64 c = static_cast<i64>(rng.below(static_cast<std::uint64_t>(cfg.n_concepts)));
      const i64 k = static_cast<i64>(rng.below(static_cast<std::uint64_t>(pool_size[static_cast<std::size_t>(c)])));
      const i64 q = c + k * cfg.n_concepts;
      const double m = mastery[static_cast<std::size_t>(c)];
      const double z = cfg.slope * (m - difficulty[static_cast<std::size_t>(q)]);
      const double p = 1.0 / (1.0 + std::exp(-z));
      const i64 r = rng.uniform() < p ? 1 : 0;
      mastery[static_cast<std::size_t>(c)] += r ? cfg.gain_correct : cfg.gain_incorrect;
      out.rows.push_back(SynthRow{s, q, c, r, p});
      preds.push_back(p);
      labels.push_back(r);
    }
  }
  out.oracle_auc = auc(preds, labels);
  return out;
}

void write_synth_csv(const SynthResult& synth, const std::string& csv_path,
                     const std::string& oracle_path) {
  std::ofstream f(csv_path);
  if (!f) throw FormatError("cannot write " + csv_path);
  f << "student_id,question_id,concept_id,response\n";
  for (const SynthRow& r : synth.rows)
    f << r.student << "," << r.question << "," << r.concept_id << "," << r.response << "\n";
  if (!oracle_path.empty()) {
    std::ofstream g(oracle_path);
    if (!g) throw FormatError("cannot write " + oracle_path);
    g << "p_star\n";
    char buf[32];
    for (const SynthRow& r : synth.rows) {
      std::snprintf(buf, sizeof(buf), "%.9g", r.p_star);
      g << buf << "\n";
    }
  }
}

void shuffle_responses(std::vector<Window>& windows, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, i64>> slots;  // (window, position)
  for (std::size_t wi = 0; wi < windows.size(); ++wi)
    for (i64 t = 0; t < windows[wi].valid; ++t) slots.emplace_back(wi, t);
  std::vector<i64> values;
  values.reserve(slots.size());
  for (const auto& [wi, t] : slots) values.push_back(windows[wi].r[static_cast<std::size_t>(t)]);
  Rng rng(seed);
  rng.shuffle(values);
  for (std::size_t i = 0; i < slots.size(); ++i)
    windows[slots[i].first].r[static_cast<std::size_t>(slots[i].second)] = values[i];
}

Batch make_batch(const std::vector<Window>& windows, const std::vector<i64>& indices) {
  Batch b;
  b.batch = static_cast<i64>(indices.size());
  for (i64 idx : indices) b.t_max = std::max(b.t_max, windows[static_cast<std::size_t>(idx)].valid);
  b.q.assign(static_cast<std::size_t>(b.batch * b.t_max), 0);
  b.c.assign(static_cast<std::size_t>(b.batch * b.t_max), 0);
  b.r.assign(static_cast<std::size_t>(b.batch * b.t_max), 0);
  b.mask.assign(static_cast<std::size_t>(b.batch * b.t_max), 0);
  for (i64 i = 0; i < b.batch; ++i) {
    const Window& w = windows[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
    for (i64 t = 0; t < w.valid; ++t) {
      const std::size_t at = static_cast<std::size_t>(i * b.t_max + t);
      b.q[at] = w.q[static_cast<std::size_t>(t)];
      b.c[at] = w.c[static_cast<std::size_t>(t)];
      b.r[at] = w.r[static_cast<std::size_t>(t)];
      b.mask[at] = 1;
    }
  }
  return b;
}

namespace {

void write_split_csv(const std::string& path, const std::vector<Window>& ws) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << "seq_id,student_id,question_id,concept_id,response\n";
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const Window& w = ws[i];
    for (i64 t = 0; t < w.valid; ++t)
      f << i << "," << w.student << "," << w.q[static_cast<std::size_t>(t)] << ","
        << w.c[static_cast<std::size_t>(t)] << "," << w.r[static_cast<std::size_t>(t)] << "\n";
  }
}

std::vector<Window> read_split_csv(const std::string& path, i64 max_len) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path);
  std::string line;
  if (!std::getline(f, line) ||
      split_csv_line(line) != std::vector<std::string>{"seq_id", "student_id", "question_id",
                                                       "concept_id", "response"})
    throw FormatError(path + ": bad prepared-split header");
  std::vector<Window> out;
  i64 line_no = 1;
  i64 cur_seq = -1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto parts = split_csv_line(line);
    if (parts.size() != 5)
      throw FormatError("line " + std::to_string(line_no) + ": expected 5 fields");
    const i64 seq = parse_i64(parts[0], line_no, "seq_id");
    if (seq != cur_seq) {
      if (seq != static_cast<i64>(out.size()))
        throw FormatError("line " + std::to_string(line_no) + ": seq_id out of order");
      cur_seq = seq;
      Window w;
      w.student = parse_i64(parts[1], line_no, "student_id");
      w.q.assign(static_cast<std::size_t>(max_len), 0);
      w.c.assign(static_cast<std::size_t>(max_len), 0);
      w.r.assign(static_cast<std::size_t>(max_len), 0);
      out.push_back(std::move(w));
    }
    Window& w = out.back();
    if (w.valid >= max_len)
      throw FormatError("line " + std::to_string(line_no) + ": window longer than max_len");
    w.q[static_cast<std::size_t>(w.valid)] = parse_i64(parts[2], line_no, "question_id");
    w.c[static_cast<std::size_t>(w.valid)] = parse_i64(parts[3], line_no, "concept_id");
    const i64 resp = parse_i64(parts[4], line_no, "response");
    if (resp != 0 && resp != 1)
      throw FormatError("line " + std::to_string(line_no) + ": response must be 0 or 1");
    w.r[static_cast<std::size_t>(w.valid)] = resp;
    w.valid += 1;
  }
  return out;
}

}  // namespace

void save_prepared(const std::string& dir, const SplitWindows& splits, const VocabMaps& vocab,
                   const PreparedMeta& meta) {
  std::filesystem::create_directories(dir);
  vocab.save(dir + "/vocab.txt");
  write_split_csv(dir + "/train.csv", splits.train);
  write_split_csv(dir + "/val.csv", splits.val);
  write_split_csv(dir + "/test.csv", splits.test);
  std::ofstream f(dir + "/meta.txt");
  if (!f) throw FormatError("cannot write " + dir + "/meta.txt");
  f << "n_questions = " << meta.n_questions << "\n";
  f << "n_concepts = " << meta.n_concepts << "\n";
  f << "n_students = " << meta.n_students << "\n";
  f << "max_len = " << meta.max_len << "\n";
  f << "seed = " << meta.seed << "\n";
}

PreparedData load_prepared(const std::string& dir) {
  std::ifstream f(dir + "/meta.txt");
  if (!f) throw FormatError("cannot read " + dir + "/meta.txt (not a prepared dataset?)");
  PreparedData out;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream is(line);
    std::string key, eq;
    long long value;
    if (is >> key >> eq >> value && eq == "=") {
      if (key == "n_questions") out.meta.n_questions = value;
      else if (key == "n_concepts") out.meta.n_concepts = value;
      else if (key == "n_students") out.meta.n_students = value;
      else if (key == "max_len") out.meta.max_len = value;
      else if (key == "seed") out.meta.seed = static_cast<std::uint64_t>(value);
    }
  }
  if (out.meta.n_questions <= 0 || out.meta.n_concepts <= 0)
    throw FormatError(dir + "/meta.txt: missing vocabulary sizes");
  out.splits.train = read_split_csv(dir + "/train.csv", out.meta.max_len);
  out.splits.val = read_split_csv(dir + "/val.csv", out.meta.max_len);
  out.splits.test = read_split_csv(dir + "/test.csv", out.meta.max_len);
  return out;
}

}  // namespace ssmkt
