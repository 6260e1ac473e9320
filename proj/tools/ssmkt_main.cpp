// ssmkt command line: prepare / synth / train / eval / explain / bench.
// Exit codes: 0 success, 2 usage or input-format errors, 1 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ssmkt/ssmkt.hpp"

namespace fs = std::filesystem;
using namespace ssmkt;

namespace {

struct ModelFlags {
  i64 d_model = 128;
  i64 layers = 5;
  i64 expand = 2;
  i64 n_state = 16;
  i64 dt_rank = 0;
  i64 conv_kernel = 4;
  bool no_ffn = false;
  bool no_rasch = false;
  bool use_skip = false;
  bool freeze_a = false;
  bool head_concat_question = false;
  std::string ffn_placement = "per-block";
  std::string arch = "mamba";
  double lambda_l2 = 1e-5;
  double dropout = 0.0;
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--d-model", mf.d_model, "hidden size")->capture_default_str();
  cmd->add_option("--layers", mf.layers, "number of blocks")->capture_default_str();
  cmd->add_option("--expand", mf.expand, "channel expansion factor")->capture_default_str();
  cmd->add_option("--n-state", mf.n_state, "state size per channel")->capture_default_str();
  cmd->add_option("--dt-rank", mf.dt_rank, "delta projection rank (0 = d_inner/16)")
      ->capture_default_str();
  cmd->add_option("--conv-kernel", mf.conv_kernel, "causal conv width")->capture_default_str();
  cmd->add_flag("--no-ffn", mf.no_ffn, "drop the feed-forward sublayers");
  cmd->add_flag("--no-rasch", mf.no_rasch, "drop the Rasch difficulty terms");
  cmd->add_flag("--use-skip", mf.use_skip, "enable the per-channel direct term d*x");
  cmd->add_flag("--freeze-a", mf.freeze_a, "keep the state matrix A fixed");
  cmd->add_flag("--head-concat-question", mf.head_concat_question,
                "condition the prediction head on the question embedding");
  cmd->add_option("--ffn-placement", mf.ffn_placement, "per-block | final")
      ->check(CLI::IsMember({"per-block", "final"}))
      ->capture_default_str();
  cmd->add_option("--arch", mf.arch, "mamba | attention")
      ->check(CLI::IsMember({"mamba", "attention"}))
      ->capture_default_str();
  cmd->add_option("--lambda", mf.lambda_l2, "L2 weight on question difficulties")
      ->capture_default_str();
  cmd->add_option("--dropout", mf.dropout, "dropout rate (default off)")->capture_default_str();
}

ModelConfig to_model_config(const ModelFlags& mf, const PreparedMeta& meta) {
  ModelConfig mc;
  mc.n_questions = meta.n_questions;
  mc.n_concepts = meta.n_concepts;
  mc.max_seq_len = meta.max_len;
  mc.d_model = mf.d_model;
  mc.n_layers = mf.layers;
  mc.expand = mf.expand;
  mc.n_state = mf.n_state;
  mc.dt_rank = mf.dt_rank;
  mc.conv_kernel = mf.conv_kernel;
  mc.use_ffn = !mf.no_ffn;
  mc.use_rasch = !mf.no_rasch;
  mc.use_skip = mf.use_skip;
  mc.freeze_a = mf.freeze_a;
  mc.head_concat_question = mf.head_concat_question;
  mc.ffn_placement =
      mf.ffn_placement == "final" ? FfnPlacement::final_only : FfnPlacement::per_block;
  mc.arch = mf.arch == "attention" ? ModelArch::attention : ModelArch::mamba;
  mc.lambda_l2 = mf.no_rasch ? 0.0 : mf.lambda_l2;
  mc.dropout = mf.dropout;
  return mc;
}

void write_run_config(const std::string& path, const ModelFlags& mf, const TrainConfig& tc,
                      const std::string& data_dir) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << "data = " << data_dir << "\n";
  f << "d-model = " << mf.d_model << "\n";
  f << "layers = " << mf.layers << "\n";
  f << "expand = " << mf.expand << "\n";
  f << "n-state = " << mf.n_state << "\n";
  f << "dt-rank = " << mf.dt_rank << "\n";
  f << "conv-kernel = " << mf.conv_kernel << "\n";
  f << "no-ffn = " << (mf.no_ffn ? "true" : "false") << "\n";
  f << "no-rasch = " << (mf.no_rasch ? "true" : "false") << "\n";
  f << "use-skip = " << (mf.use_skip ? "true" : "false") << "\n";
  f << "freeze-a = " << (mf.freeze_a ? "true" : "false") << "\n";
  f << "head-concat-question = " << (mf.head_concat_question ? "true" : "false") << "\n";
  f << "ffn-placement = " << mf.ffn_placement << "\n";
  f << "arch = " << mf.arch << "\n";
  f << "lambda = " << mf.lambda_l2 << "\n";
  f << "dropout = " << mf.dropout << "\n";
  f << "lr = " << tc.lr << "\n";
  f << "batch = " << tc.batch_size << "\n";
  f << "epochs = " << tc.max_epochs << "\n";
  f << "patience = " << tc.patience << "\n";
  f << "clip = " << tc.clip_norm << "\n";
  f << "seed = " << tc.seed << "\n";
}

ModelFlags read_run_config(const std::string& path, std::string* data_dir = nullptr,
                           std::uint64_t* seed = nullptr) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path + " (not a run directory?)");
  ModelFlags mf;
  std::string line;
  while (std::getline(f, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "data" && data_dir) *data_dir = val;
    else if (key == "d-model") mf.d_model = std::stoll(val);
    else if (key == "layers") mf.layers = std::stoll(val);
    else if (key == "expand") mf.expand = std::stoll(val);
    else if (key == "n-state") mf.n_state = std::stoll(val);
    else if (key == "dt-rank") mf.dt_rank = std::stoll(val);
    else if (key == "conv-kernel") mf.conv_kernel = std::stoll(val);
    else if (key == "no-ffn") mf.no_ffn = val == "true";
    else if (key == "no-rasch") mf.no_rasch = val == "true";
    else if (key == "use-skip") mf.use_skip = val == "true";
    else if (key == "freeze-a") mf.freeze_a = val == "true";
    else if (key == "head-concat-question") mf.head_concat_question = val == "true";
    else if (key == "ffn-placement") mf.ffn_placement = val;
    else if (key == "arch") mf.arch = val;
    else if (key == "lambda") mf.lambda_l2 = std::stod(val);
    else if (key == "dropout") mf.dropout = std::stod(val);
    else if (key == "seed" && seed) *seed = std::stoull(val);
  }
  return mf;
}

std::string metrics_line(const EpochStats& st) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "epoch=%lld train_loss=%.6f val_auc=%.6f val_acc=%.6f",
                static_cast<long long>(st.epoch), st.train_loss, st.val_auc, st.val_acc);
  return buf;
}

std::string label_of(const Window& w, i64 t) {
  return std::to_string(w.c[static_cast<std::size_t>(t)]) + "(" +
         std::to_string(w.r[static_cast<std::size_t>(t)]) + ")";
}

int cmd_prepare(const std::string& input, const std::string& out_dir, i64 max_len,
                std::uint64_t seed) {
  LoadedData data = load_interactions(input);
  std::vector<Window> windows = window_sequences(data.sequences, max_len);
  SplitWindows splits = split_by_student(windows, seed);
  PreparedMeta meta;
  meta.n_questions = data.vocab.n_questions();
  meta.n_concepts = data.vocab.n_concepts();
  meta.n_students = data.vocab.n_students();
  meta.max_len = max_len;
  meta.seed = seed;
  save_prepared(out_dir, splits, data.vocab, meta);
  std::cout << "prepared " << data.sequences.size() << " students, " << windows.size()
            << " windows (train/val/test = " << splits.train.size() << "/" << splits.val.size()
            << "/" << splits.test.size() << ") -> " << out_dir << "\n";
  std::cout << "vocab: " << meta.n_questions << " questions, " << meta.n_concepts
            << " concepts\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& run_dir, const ModelFlags& mf,
              TrainConfig tc, bool shuffle_labels) {
  PreparedData data = load_prepared(data_dir);
  if (data.splits.train.empty()) throw FormatError("training split is empty");
  if (shuffle_labels) {
    shuffle_responses(data.splits.train, tc.seed ^ 0xC0FFEE);
    shuffle_responses(data.splits.val, tc.seed ^ 0xC0FFEE + 1);
    shuffle_responses(data.splits.test, tc.seed ^ 0xC0FFEE + 2);
  }
  ModelConfig mc = to_model_config(mf, data.meta);
  KTModel<double> model(mc, tc.seed);
  fs::create_directories(run_dir);
  write_run_config(run_dir + "/config.txt", mf, tc, data_dir);

  std::ofstream metrics(run_dir + "/metrics.log", std::ios::trunc);
  std::ofstream timing(run_dir + "/timing.log", std::ios::trunc);
  if (!metrics || !timing) throw FormatError("cannot write logs in " + run_dir);

  std::vector<Param<double>*> params = model.params();
  TrainResult result = train_model<double>(
      model, data.splits.train, data.splits.val, tc,
      [&](const EpochStats& st) {
        metrics << metrics_line(st) << "\n";
        metrics.flush();
        char buf[96];
        std::snprintf(buf, sizeof(buf), "epoch=%lld wall_seconds=%.3f",
                      static_cast<long long>(st.epoch), st.wall_seconds);
        timing << buf << "\n";
        timing.flush();
        std::cout << metrics_line(st) << " wall_seconds=" << st.wall_seconds << "\n";
      },
      [&](const TrainResult&) { save_checkpoint(run_dir + "/ckpt", params); });
  if (result.best_epoch < 0)
    save_checkpoint(run_dir + "/ckpt", params);  // keep something loadable
  std::cout << "best val_auc=" << result.best_auc << " val_acc=" << result.best_acc
            << " at epoch " << result.best_epoch << " (" << result.epochs_run << " epochs run)\n";
  return 0;
}

struct LoadedRun {
  ModelFlags mf;
  std::string data_dir;
  std::uint64_t seed = 0;
  PreparedData data;
  std::unique_ptr<KTModel<double>> model;
};

LoadedRun load_run(const std::string& run_dir, const std::string& data_override) {
  LoadedRun lr;
  lr.mf = read_run_config(run_dir + "/config.txt", &lr.data_dir, &lr.seed);
  if (!data_override.empty()) lr.data_dir = data_override;
  lr.data = load_prepared(lr.data_dir);
  ModelConfig mc = to_model_config(lr.mf, lr.data.meta);
  lr.model = std::make_unique<KTModel<double>>(mc, lr.seed);
  std::vector<Param<double>*> params = lr.model->params();
  load_checkpoint(run_dir + "/ckpt", params);
  return lr;
}

int cmd_eval(const std::string& run_dir, const std::string& data_dir, const std::string& split) {
  LoadedRun lr = load_run(run_dir, data_dir);
  const std::vector<Window>* windows = nullptr;
  if (split == "train") windows = &lr.data.splits.train;
  else if (split == "val") windows = &lr.data.splits.val;
  else if (split == "test") windows = &lr.data.splits.test;
  else throw FormatError("unknown split '" + split + "'");

  EvalResult<double> ev = evaluate(*lr.model, *windows);
  std::ofstream f(run_dir + "/eval_" + split + ".txt");
  if (!f) throw FormatError("cannot write eval result in " + run_dir);
  auto show = [&](const char* name, const std::optional<double>& v) {
    if (v) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6f", *v);
      std::cout << name << " = " << buf << "\n";
      f << name << " = " << buf << "\n";
    } else {
      std::cout << name << " = undefined (single-class labels)\n";
      f << name << " = undefined\n";
    }
  };
  show("auc", ev.auc_value);
  show("acc", ev.acc_value);
  std::cout << "positions = " << ev.positions << "\n";
  f << "positions = " << ev.positions << "\n";
  return 0;
}

int cmd_explain(const std::string& run_dir, const std::string& data_dir, i64 student, i64 layer,
                const std::vector<i64>& channels, const std::string& level, i64 top_k,
                bool force) {
  LoadedRun lr = load_run(run_dir, data_dir);
  if (lr.mf.arch != "mamba") throw FormatError("explain requires a mamba run");

  const Window* chosen = nullptr;
  const char* from_split = "";
  for (auto [ws, name] : {std::pair{&lr.data.splits.test, "test"},
                          std::pair{&lr.data.splits.val, "val"},
                          std::pair{&lr.data.splits.train, "train"}}) {
    for (const Window& w : *ws)
      if (w.student == student && w.index == 0 && w.valid > 1) {
        chosen = &w;
        from_split = name;
        break;
      }
    if (chosen) break;
  }
  if (!chosen)
    throw FormatError("student " + std::to_string(student) +
                      " has no usable window in the prepared data");

  const i64 T = chosen->valid;
  std::vector<i64> q(chosen->q.begin(), chosen->q.begin() + T);
  std::vector<i64> c(chosen->c.begin(), chosen->c.begin() + T);
  std::vector<i64> r(chosen->r.begin(), chosen->r.begin() + T);

  ModelTrace trace;
  Pass<double> plain;
  lr.model->forward(q, c, r, plain, ScanMode::sequential, &trace);
  const i64 n_layers = lr.mf.layers;
  const i64 use_layer = layer < 0 ? n_layers - 1 : layer;
  if (use_layer < 0 || use_layer >= n_layers)
    throw FormatError("layer " + std::to_string(use_layer) + " outside [0," +
                      std::to_string(n_layers) + ")");
  const S6LayerTrace& lt = trace.layers[static_cast<std::size_t>(use_layer)];

  std::vector<std::string> labels;
  for (i64 t = 0; t < T; ++t) labels.push_back(label_of(*chosen, t));

  const std::string out_dir = run_dir + "/explain";
  fs::create_directories(out_dir);
  InfluenceTensor alpha = materialize_alpha(lt, force);
  std::cout << "student " << student << " (split " << from_split << "), T=" << T << ", layer "
            << use_layer << ", " << alpha.channels << " channels\n";
  std::cout << "note: row i=0 has no predecessors and is omitted from sequence grids\n";

  if (level == "sequence") {
    SequenceWeights w = sequence_weights(alpha);
    for (i64 m : channels) {
      if (m < 0 || m >= alpha.channels)
        throw FormatError("channel " + std::to_string(m) + " outside [0," +
                          std::to_string(alpha.channels) + "); pick channels below d_inner");
      const std::string base = out_dir + "/seq_student" + std::to_string(student) + "_layer" +
                               std::to_string(use_layer) + "_ch" + std::to_string(m);
      write_sequence_grid_csv(base + ".csv", w, m);
      write_heatmap_svg(base + ".svg", w, m, labels,
                        "sequence-level weights, channel " + std::to_string(m));
      std::cout << "wrote " << base << ".csv and .svg\n";
    }
  } else {
    ExerciseWeights w = exercise_weights(alpha, T - 1);
    const std::string base = out_dir + "/exercise_student" + std::to_string(student) + "_layer" +
                             std::to_string(use_layer);
    write_exercise_topk_csv(base + "_topk.csv", w, labels, top_k);
    write_exercise_strip_svg(base + ".svg", w, labels,
                             "influence on position " + std::to_string(T - 1) + " = " +
                                 labels[static_cast<std::size_t>(T - 1)]);
    std::cout << "wrote " << base << "_topk.csv and .svg\n";
  }
  return 0;
}

int cmd_bench(const std::vector<std::string>& models, const std::vector<i64>& seqlens, i64 d_model,
              i64 layers, i64 repeats, const std::string& out_csv, bool f32, std::uint64_t seed) {
  BenchConfig bc;
  bc.d_model = d_model;
  bc.n_layers = layers;
  bc.repeats = repeats;
  bc.seed = seed;
  std::vector<BenchRecord> records;
  for (const std::string& m : models) {
    const ModelArch arch = m == "attention" ? ModelArch::attention : ModelArch::mamba;
    for (i64 T : seqlens) {
      BenchRecord rec = f32 ? bench_model<float>(arch, T, bc) : bench_model<double>(arch, T, bc);
      records.push_back(rec);
      std::printf("%-9s T=%-5lld train_step=%.4fs infer=%.4fs tape_scalars=%lld params=%lld",
                  rec.model.c_str(), static_cast<long long>(rec.T), rec.train_step_s,
                  rec.infer_step_s, rec.tape_scalars, static_cast<long long>(rec.params));
      if (rec.model == "mamba")
        std::printf(" stream_state_scalars=%lld", rec.stream_state_scalars);
      std::printf("\n");
      std::fflush(stdout);
    }
  }
  std::ofstream f(out_csv);
  if (!f) throw FormatError("cannot write " + out_csv);
  f << "model,T,train_step_s,infer_step_s,tape_scalars,params\n";
  for (const BenchRecord& r : records) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%lld,%.6f,%.6f,%lld,%lld", r.model.c_str(),
                  static_cast<long long>(r.T), r.train_step_s, r.infer_step_s, r.tape_scalars,
                  static_cast<long long>(r.params));
    f << buf << "\n";
  }
  std::cout << "wrote " << out_csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selective state-space knowledge tracing"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value config file; flags take precedence");

  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "global random seed")
      ->envname("SSMKT_SEED")
      ->capture_default_str();

  // prepare
  auto* prep = app.add_subcommand("prepare", "window, split, and re-index a raw interactions CSV");
  std::string prep_input, prep_out;
  i64 prep_max_len = 200;
  prep->add_option("--input", prep_input, "raw CSV")->required();
  prep->add_option("--out", prep_out, "output dataset directory")->required();
  prep->add_option("--max-len", prep_max_len, "window length")->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "generate the synthetic mastery dataset");
  std::string synth_out, synth_oracle;
  SynthConfig sc;
  synth->add_option("--out", synth_out, "output CSV")->required();
  synth->add_option("--oracle", synth_oracle, "also write Bayes probabilities here");
  synth->add_option("--students", sc.n_students)->capture_default_str();
  synth->add_option("--concepts", sc.n_concepts)->capture_default_str();
  synth->add_option("--questions", sc.n_questions)->capture_default_str();
  synth->add_option("--seq-len", sc.seq_len)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "train a model on a prepared dataset");
  std::string train_data, train_run;
  ModelFlags train_mf;
  TrainConfig tc;
  bool train_shuffle_labels = false;
  train->add_option("--data", train_data, "prepared dataset directory")->required();
  train->add_option("--out", train_run, "run directory")->required();
  add_model_flags(train, train_mf);
  train->add_option("--lr", tc.lr, "learning rate")->capture_default_str();
  train->add_option("--batch", tc.batch_size, "batch size")->capture_default_str();
  train->add_option("--epochs", tc.max_epochs, "max epochs")->capture_default_str();
  train->add_option("--patience", tc.patience, "early-stopping patience")->capture_default_str();
  train->add_option("--clip", tc.clip_norm, "global grad-norm clip")->capture_default_str();
  train->add_option("--threads", tc.threads, "worker threads (0 = auto)")->capture_default_str();
  train->add_flag("--shuffle-labels", train_shuffle_labels,
                  "permute responses across the dataset (null control)");
  std::string train_scan = "parallel";
  train->add_option("--scan", train_scan, "parallel | sequential")
      ->check(CLI::IsMember({"parallel", "sequential"}))
      ->capture_default_str();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a run on a split");
  std::string eval_run, eval_data, eval_split = "test";
  eval->add_option("--run", eval_run, "run directory")->required();
  eval->add_option("--data", eval_data, "prepared dataset directory (defaults to the one trained on)");
  eval->add_option("--split", eval_split, "train | val | test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();

  // explain
  auto* explain = app.add_subcommand("explain", "export hidden-attention heatmaps for one student");
  std::string ex_run, ex_data, ex_level = "sequence";
  i64 ex_student = 0, ex_layer = -1, ex_topk = 10;
  std::vector<i64> ex_channels = {14, 145, 241};
  bool ex_force = false;
  explain->add_option("--run", ex_run)->required();
  explain->add_option("--data", ex_data, "prepared dataset directory");
  explain->add_option("--student", ex_student, "dense student id")->required();
  explain->add_option("--layer", ex_layer, "block to read (-1 = last)")->capture_default_str();
  explain->add_option("--channels", ex_channels, "channels to export")
      ->delimiter(',')
      ->capture_default_str();
  explain->add_option("--level", ex_level, "sequence | exercise")
      ->check(CLI::IsMember({"sequence", "exercise"}))
      ->capture_default_str();
  explain->add_option("--top-k", ex_topk)->capture_default_str();
  explain->add_flag("--force", ex_force, "override the alpha memory guard");

  // bench
  auto* bench = app.add_subcommand("bench", "sequence-length scaling study");
  std::vector<std::string> bench_models = {"mamba", "attention"};
  std::vector<i64> bench_seqlens = {128, 256, 512};
  i64 bench_d = 128, bench_layers = 5, bench_repeats = 5;
  std::string bench_out = "bench.csv";
  bool bench_f32 = false;
  bench->add_option("--models", bench_models, "mamba,attention")->delimiter(',');
  bench->add_option("--seqlens", bench_seqlens, "sequence lengths")->delimiter(',');
  bench->add_option("--d-model", bench_d)->capture_default_str();
  bench->add_option("--layers", bench_layers)->capture_default_str();
  bench->add_option("--repeats", bench_repeats)->capture_default_str();
  bench->add_option("--out", bench_out, "CSV output path")->capture_default_str();
  bench->add_flag("--f32", bench_f32, "32-bit scalars (counts are unchanged)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (prep->parsed()) return cmd_prepare(prep_input, prep_out, prep_max_len, seed);
    if (synth->parsed()) {
      sc.seed = seed ? seed : sc.seed;
      SynthResult res = synth_mastery(sc);
      write_synth_csv(res, synth_out, synth_oracle);
      std::cout << "wrote " << res.rows.size() << " interactions to " << synth_out;
      if (res.oracle_auc) std::cout << " (oracle AUC " << *res.oracle_auc << ")";
      std::cout << "\n";
      return 0;
    }
    if (train->parsed()) {
      tc.seed = seed;
      tc.scan = train_scan == "sequential" ? ScanMode::sequential : ScanMode::parallel;
      return cmd_train(train_data, train_run, train_mf, tc, train_shuffle_labels);
    }
    if (eval->parsed()) return cmd_eval(eval_run, eval_data, eval_split);
    if (explain->parsed())
      return cmd_explain(ex_run, ex_data, ex_student, ex_layer, ex_channels, ex_level, ex_topk,
                         ex_force);
    if (bench->parsed())
      return cmd_bench(bench_models, bench_seqlens, bench_d, bench_layers, bench_repeats,
                       bench_out, bench_f32, seed ? seed : 1);
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
