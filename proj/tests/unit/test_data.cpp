#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "test_helpers.hpp"

using namespace ssmkt;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& contents) {
  const std::string path = (fs::temp_directory_path() / name).string();
  std::ofstream f(path);
  f << contents;
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("loader: three rows, one student, order preserved") {
  const std::string path = write_temp("ssmkt_load1.csv",
                                      "student_id,question_id,concept_id,response\n"
                                      "10,100,5,1\n10,101,5,0\n10,100,6,1\n");
  LoadedData d = load_interactions(path);
  REQUIRE(d.sequences.size() == 1);
  REQUIRE(d.sequences[0].items.size() == 3);
  CHECK(d.vocab.n_questions() == 2);
  CHECK(d.vocab.n_concepts() == 2);
  CHECK(d.sequences[0].items[0].response == 1);
  CHECK(d.sequences[0].items[1].response == 0);
  // duplicate content rows are kept
  CHECK(d.sequences[0].items[2].question == d.sequences[0].items[0].question);
}

TEST_CASE("loader: interleaved students keep their own order") {
  const std::string path = write_temp("ssmkt_load2.csv",
                                      "student_id,question_id,concept_id,response\n"
                                      "1,10,0,1\n2,20,0,0\n1,11,0,0\n2,21,0,1\n");
  LoadedData d = load_interactions(path);
  REQUIRE(d.sequences.size() == 2);
  CHECK(d.sequences[0].items.size() == 2);
  CHECK(d.sequences[1].items.size() == 2);
  CHECK(d.sequences[0].items[0].response == 1);
  CHECK(d.sequences[0].items[1].response == 0);
  CHECK(d.sequences[1].items[0].response == 0);
  CHECK(d.sequences[1].items[1].response == 1);
}

TEST_CASE("loader: timestamps sort rows per student, stably") {
  const std::string path = write_temp("ssmkt_load_ts.csv",
                                      "student_id,question_id,concept_id,response,timestamp\n"
                                      "1,10,0,1,50\n1,11,0,0,10\n1,12,0,1,50\n");
  LoadedData d = load_interactions(path);
  REQUIRE(d.sequences[0].items.size() == 3);
  CHECK(d.sequences[0].items[0].response == 0);   // ts 10 first
  CHECK(d.sequences[0].items[1].question != d.sequences[0].items[2].question);  // stable tie
}

TEST_CASE("loader errors carry line numbers; bad responses are rejected") {
  const std::string bad_header = write_temp("ssmkt_badh.csv", "sid,question_id,concept_id,response\n");
  CHECK_THROWS_AS(load_interactions(bad_header), FormatError);
  const std::string bad_row = write_temp("ssmkt_badr.csv",
                                         "student_id,question_id,concept_id,response\n"
                                         "1,2,3,1\n1,2,x,1\n");
  CHECK_THROWS_WITH_AS(load_interactions(bad_row), doctest::Contains("line 3"), FormatError);
  const std::string bad_resp = write_temp("ssmkt_badresp.csv",
                                          "student_id,question_id,concept_id,response\n1,2,3,2\n");
  CHECK_THROWS_WITH_AS(load_interactions(bad_resp), doctest::Contains("response"), FormatError);
}

TEST_CASE("vocab map round-trips through its file form") {
  const std::string path = write_temp("ssmkt_vocab_rt.csv",
                                      "student_id,question_id,concept_id,response\n"
                                      "7,100,3,1\n8,200,4,0\n");
  LoadedData d = load_interactions(path);
  const std::string vpath = (fs::temp_directory_path() / "ssmkt_vocab.txt").string();
  d.vocab.save(vpath);
  VocabMaps v = VocabMaps::load(vpath);
  CHECK(v.question == d.vocab.question);
  CHECK(v.concept_id == d.vocab.concept_id);
  CHECK(v.student == d.vocab.student);
}

TEST_CASE("window: 450 -> 200/200/50, short sequences padded, positions conserved") {
  InteractionSequence s;
  s.student = 0;
  for (int i = 0; i < 450; ++i) s.items.push_back({0, 0, i % 2});
  auto ws = window_sequences({s}, 200);
  REQUIRE(ws.size() == 3);
  CHECK(ws[0].valid == 200);
  CHECK(ws[1].valid == 200);
  CHECK(ws[2].valid == 50);
  CHECK(ws[2].q.size() == 200);  // padded storage with mask boundary at `valid`

  InteractionSequence s2;
  s2.student = 1;
  for (int i = 0; i < 10; ++i) s2.items.push_back({0, 0, 1});
  auto ws2 = window_sequences({s2}, 200);
  REQUIRE(ws2.size() == 1);
  CHECK(ws2[0].valid == 10);

  i64 total = 0;
  for (const auto& w : window_sequences({s, s2}, 200)) total += w.valid;
  CHECK(total == 460);
}

TEST_CASE("split: 10 students give 7/1/2, disjoint, seed-stable") {
  std::vector<InteractionSequence> seqs;
  for (i64 st = 0; st < 10; ++st) {
    InteractionSequence s;
    s.student = st;
    s.items.push_back({0, 0, 1});
    seqs.push_back(s);
  }
  auto ws = window_sequences(seqs, 16);
  SplitWindows sp = split_by_student(ws, 99);
  CHECK(sp.train.size() == 7);
  CHECK(sp.val.size() == 1);
  CHECK(sp.test.size() == 2);
  auto students_of = [](const std::vector<Window>& v) {
    std::vector<i64> out;
    for (const auto& w : v) out.push_back(w.student);
    return out;
  };
  auto tr = students_of(sp.train), va = students_of(sp.val), te = students_of(sp.test);
  for (i64 s : tr) {
    CHECK(std::find(va.begin(), va.end(), s) == va.end());
    CHECK(std::find(te.begin(), te.end(), s) == te.end());
  }
  SplitWindows sp2 = split_by_student(ws, 99);
  CHECK(students_of(sp2.train) == tr);
}

TEST_CASE("auc: pairwise oracle example, perfect separation, all ties, single class") {
  // labels [0,0,1,1], preds [0.1,0.4,0.35,0.8]: 3 of 4 cross pairs ordered
  auto v = auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
  REQUIRE(v.has_value());
  CHECK(*v == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(*auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == doctest::Approx(1.0));
  CHECK(*auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == doctest::Approx(0.5));
  CHECK_FALSE(auc({0.2, 0.4}, {1, 1}).has_value());
  CHECK_FALSE(auc({}, {}).has_value());
}

TEST_CASE("auc is invariant under strictly monotone transforms of the predictions") {
  Rng rng(4);
  std::vector<double> preds;
  std::vector<i64> labels;
  for (int i = 0; i < 200; ++i) {
    preds.push_back(rng.uniform());
    labels.push_back(rng.below(2));
  }
  const double base = *auc(preds, labels);
  std::vector<double> warped = preds;
  for (double& p : warped) p = std::exp(3.0 * p) - 0.5;
  CHECK(*auc(warped, labels) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("acc: exact matches, threshold boundary counts as positive, empty undefined") {
  CHECK(*acc({0.9, 0.1}, {1, 0}) == doctest::Approx(1.0));
  CHECK(*acc({0.5}, {1}) == doctest::Approx(1.0));  // p = 0.5 predicts positive
  CHECK(*acc({0.5}, {0}) == doctest::Approx(0.0));
  CHECK_FALSE(acc({}, {}).has_value());
}

TEST_CASE("metrics ignore masked padding by construction of the batch view") {
  std::vector<Window> ws;
  Window w;
  w.student = 0;
  w.valid = 3;
  w.q = {0, 1, 2, 0, 0};
  w.c = {0, 0, 0, 0, 0};
  w.r = {1, 0, 1, 0, 0};
  ws.push_back(w);
  Batch b = make_batch(ws, {0});
  CHECK(b.t_max == 3);
  i64 valid = 0;
  for (char m : b.mask) valid += m;
  CHECK(valid == 3);
}

TEST_CASE("synthetic mastery: no signal at zero gain and zero difficulty; seeded bytes stable") {
  SynthConfig flat;
  flat.n_students = 50;
  flat.seq_len = 30;
  flat.gain_correct = 0.0;
  flat.gain_incorrect = 0.0;
  flat.zero_difficulty = true;
  SynthResult r = synth_mastery(flat);
  for (const SynthRow& row : r.rows) CHECK(row.p_star == 0.5);
  REQUIRE(r.oracle_auc.has_value());
  CHECK(*r.oracle_auc == doctest::Approx(0.5));

  SynthConfig cfg;
  cfg.n_students = 40;
  cfg.seq_len = 50;
  SynthResult a = synth_mastery(cfg), b = synth_mastery(cfg);
  const std::string pa = (fs::temp_directory_path() / "ssmkt_synth_a.csv").string();
  const std::string pb = (fs::temp_directory_path() / "ssmkt_synth_b.csv").string();
  write_synth_csv(a, pa);
  write_synth_csv(b, pb);
  CHECK(slurp(pa) == slurp(pb));
  REQUIRE(a.oracle_auc.has_value());
  CHECK(*a.oracle_auc > 0.65);  // learning + difficulty signal present
}

TEST_CASE("prepared dataset round-trips through its directory form") {
  SynthConfig cfg;
  cfg.n_students = 12;
  cfg.seq_len = 25;
  SynthResult synth = synth_mastery(cfg);
  const std::string csv = (fs::temp_directory_path() / "ssmkt_prep_in.csv").string();
  write_synth_csv(synth, csv);
  LoadedData data = load_interactions(csv);
  auto windows = window_sequences(data.sequences, 16);
  SplitWindows splits = split_by_student(windows, 5);
  PreparedMeta meta;
  meta.n_questions = data.vocab.n_questions();
  meta.n_concepts = data.vocab.n_concepts();
  meta.n_students = data.vocab.n_students();
  meta.max_len = 16;
  meta.seed = 5;
  const std::string dir = (fs::temp_directory_path() / "ssmkt_prep_dir").string();
  save_prepared(dir, splits, data.vocab, meta);
  PreparedData back = load_prepared(dir);
  CHECK(back.meta.n_questions == meta.n_questions);
  REQUIRE(back.splits.train.size() == splits.train.size());
  for (std::size_t i = 0; i < splits.train.size(); ++i) {
    CHECK(back.splits.train[i].valid == splits.train[i].valid);
    CHECK(back.splits.train[i].q == splits.train[i].q);
    CHECK(back.splits.train[i].r == splits.train[i].r);
  }
}

TEST_CASE("label shuffle preserves the response multiset but breaks alignment") {
  SynthConfig cfg;
  cfg.n_students = 20;
  cfg.seq_len = 40;
  SynthResult synth = synth_mastery(cfg);
  const std::string csv = (fs::temp_directory_path() / "ssmkt_shuf.csv").string();
  write_synth_csv(synth, csv);
  LoadedData data = load_interactions(csv);
  auto windows = window_sequences(data.sequences, 40);
  i64 ones_before = 0, total = 0;
  for (const auto& w : windows)
    for (i64 t = 0; t < w.valid; ++t) {
      ones_before += w.r[static_cast<std::size_t>(t)];
      ++total;
    }
  auto shuffled = windows;
  shuffle_responses(shuffled, 3);
  i64 ones_after = 0, moved = 0;
  for (std::size_t i = 0; i < windows.size(); ++i)
    for (i64 t = 0; t < windows[i].valid; ++t) {
      ones_after += shuffled[i].r[static_cast<std::size_t>(t)];
      moved += shuffled[i].r[static_cast<std::size_t>(t)] != windows[i].r[static_cast<std::size_t>(t)];
    }
  CHECK(ones_before == ones_after);
  CHECK(moved > total / 10);
}
