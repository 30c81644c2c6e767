#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "asrlab/harness.hpp"

namespace {

using namespace asrlab;

struct CommonArgs {
  std::string spec_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool need_spec = true) {
  auto* spec = cmd->add_option("--spec", args.spec_path, "experiment spec file");
  if (need_spec) spec->required();
  cmd->add_option("--out", args.out_dir, "output directory (overrides run.out)");
  cmd->add_option("--seed", args.seed, "master seed (overrides spec seeds)")
      ->each([&](const std::string&) { args.seed_given = true; });
  cmd->add_option("--threads", args.threads, "worker threads (overrides run.threads)");
}

ExperimentSpec load_with_overrides(const CommonArgs& args) {
  ExperimentSpec spec = load_spec(args.spec_path);
  if (!args.out_dir.empty()) spec.out_dir = args.out_dir;
  if (args.threads > 0) spec.threads = args.threads;
  if (args.seed_given) {
    spec.seed = args.seed;
    spec.train_corpus.seed = Rng::derive(args.seed, 1);
    spec.eval_seed = Rng::derive(args.seed, 2);
    spec.tokenizer.seed = Rng::derive(args.seed, 3);
    spec.tokenizer.profile.seed = spec.tokenizer.seed;
    spec.training.seed = Rng::derive(args.seed, 4);
    spec.topk_seed = Rng::derive(args.seed, 5);
  }
  return spec;
}

std::string lambda_tag(double lambda) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", lambda);
  return buf;
}

std::vector<Utterance> make_eval_corpus(const ExperimentSpec& spec, const Vocab& vocab) {
  if (!spec.corpus_path.empty()) return load_corpus(spec.corpus_path, vocab);
  CorpusConfig cfg = spec.train_corpus;
  cfg.count = spec.eval_count;
  cfg.seed = spec.eval_seed;
  return generate_corpus(cfg, vocab);
}

int cmd_gen_corpus(const CommonArgs& args) {
  const ExperimentSpec spec = load_with_overrides(args);
  try {
    const Vocab vocab = detail::spec_vocab(spec);
    std::filesystem::create_directories(spec.out_dir);
    const auto train_set = generate_corpus(spec.train_corpus, vocab);
    const auto eval_set = make_eval_corpus(spec, vocab);
    save_corpus(train_set, vocab, spec.out_dir + "/train");
    save_corpus(eval_set, vocab, spec.out_dir + "/eval");
    vocab.save(spec.out_dir + "/vocab.txt");
    std::cout << "wrote " << train_set.size() << " train / " << eval_set.size()
              << " eval utterances under " << spec.out_dir << "\n";
  } catch (const std::exception& e) {
    throw StageError(Stage::kCorpus, e.what());
  }
  return 0;
}

int cmd_train(const CommonArgs& args) {
  const ExperimentSpec spec = load_with_overrides(args);
  if (!spec.checkpoint.empty()) {
    throw StageError(Stage::kConfig, "train verb with a preloaded checkpoint");
  }
  const Vocab vocab = detail::spec_vocab(spec);
  std::vector<Utterance> corpus;
  try {
    corpus = generate_corpus(spec.train_corpus, vocab);
  } catch (const std::exception& e) {
    throw StageError(Stage::kCorpus, e.what());
  }
  std::vector<TokenSeq> prompts;
  try {
    for (const auto& u : corpus) prompts.push_back(detail::prompt_for(spec, vocab, u));
  } catch (const std::exception& e) {
    throw StageError(Stage::kTokenizer, e.what());
  }
  try {
    std::filesystem::create_directories(spec.out_dir);
    for (double lambda : spec.lambdas) {
      ModelConfig mc = spec.model;
      mc.feat_dim = spec.train_corpus.feat_dim;
      mc.vocab_size = vocab.size();
      ModelParams params = ModelParams::init(mc, spec.training.seed);
      TrainConfig tc = spec.training;
      tc.lambda = lambda;
      tc.threads = spec.threads;
      const TrainResult tr = train(params, corpus, prompts, tc);
      const std::string prefix = spec.out_dir + "/ckpt-l" + lambda_tag(lambda);
      params.save(prefix);
      std::cout << "lambda " << lambda_tag(lambda) << ": " << tc.steps << " steps, final loss "
                << (tr.loss_curve.empty() ? 0.0 : tr.loss_curve.back()) << ", saved " << prefix
                << "\n";
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(Stage::kModel, e.what());
  }
  return 0;
}

int cmd_decode(const CommonArgs& args) {
  const ExperimentSpec spec = load_with_overrides(args);
  const Vocab vocab = detail::spec_vocab(spec);
  std::vector<Utterance> eval_set;
  try {
    eval_set = make_eval_corpus(spec, vocab);
  } catch (const std::exception& e) {
    throw StageError(Stage::kCorpus, e.what());
  }
  std::vector<TokenSeq> prompts;
  try {
    for (const auto& u : eval_set) prompts.push_back(detail::prompt_for(spec, vocab, u));
  } catch (const std::exception& e) {
    throw StageError(Stage::kTokenizer, e.what());
  }
  try {
    std::filesystem::create_directories(spec.out_dir);
    std::ofstream records(spec.out_dir + "/records.tsv", std::ios::binary);
    if (!records) {
      throw StageError(Stage::kReport, "cannot open " + spec.out_dir + "/records.tsv");
    }
    for (double lambda : spec.lambdas) {
      ModelParams params = [&] {
        try {
          const std::string prefix = spec.checkpoint.empty()
                                         ? spec.out_dir + "/ckpt-l" + lambda_tag(lambda)
                                         : spec.checkpoint;
          return ModelParams::load(prefix);
        } catch (const std::exception& e) {
          throw StageError(Stage::kModel, e.what());
        }
      }();
      const TrainedSeqModel model(params);
      std::vector<SpeechRep> reps;
      for (const auto& u : eval_set) reps.push_back(encode_speech(params, u));
      for (DecodeStrategy strategy : spec.strategies) {
        const auto results = detail::decode_corpus(model, eval_set, reps, prompts, spec, strategy);
        for (const auto& r : results) {
          records << lambda_tag(lambda) << '\t' << strategy_name(strategy) << '\t'
                  << format_decode_record(r, vocab) << '\n';
        }
      }
    }
    std::cout << "wrote " << spec.out_dir << "/records.tsv\n";
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(Stage::kDecode, e.what());
  }
  return 0;
}

struct RecordLine {
  std::string lambda;
  std::string strategy;
  DecodeResult result;
};

std::vector<RecordLine> read_records(const std::string& path, const Vocab& vocab,
                                     const DecodeConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw StageError(Stage::kMetrics, "missing decode records " + path);
  std::vector<RecordLine> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, '\t')) cols.push_back(cur);
    if (cols.size() != 8) {
      throw StageError(Stage::kMetrics, "malformed record line: " + line);
    }
    RecordLine r;
    r.lambda = cols[0];
    r.strategy = cols[1];
    r.result.utterance_id = cols[2];
    if (cols[3] == "nar") r.result.mode = DecodeMode::kNar;
    else if (cols[3] == "hybrid_ar_path") r.result.mode = DecodeMode::kHybridArPath;
    else if (cols[3] == "hybrid_nar_fallback") r.result.mode = DecodeMode::kHybridNarFallback;
    else r.result.mode = DecodeMode::kAr;
    r.result.tokens.role = TokenRole::kHypothesis;
    for (char c : cols[4]) r.result.tokens.ids.push_back(vocab.id(std::string(1, c)));
    r.result.model_calls = std::stoll(cols[5]);
    r.result.generated_before_fallback = std::stoll(cols[6]);
    r.result.wall_seconds = std::stoll(cols[7]) * 1e-6;
    r.result.hit_max_limit =
        r.result.mode == DecodeMode::kAr && r.result.tokens.length() == cfg.max_tokens;
    lines.push_back(std::move(r));
  }
  return lines;
}

int cmd_eval(const CommonArgs& args) {
  const ExperimentSpec spec = load_with_overrides(args);
  const Vocab vocab = detail::spec_vocab(spec);
  std::vector<Utterance> eval_set;
  try {
    eval_set = make_eval_corpus(spec, vocab);
  } catch (const std::exception& e) {
    throw StageError(Stage::kCorpus, e.what());
  }
  std::map<std::string, const Utterance*> by_id;
  for (const auto& u : eval_set) by_id[u.id] = &u;

  const auto records = read_records(spec.out_dir + "/records.tsv", vocab, spec.decode);
  std::map<std::pair<std::string, std::string>, std::vector<const RecordLine*>> groups;
  for (const auto& r : records) groups[{r.lambda, r.strategy}].push_back(&r);

  try {
    std::cout << "lambda\tmode\tcer_pct\tins\tdel\tsub\tdrr_permille\trtf_measured\t"
                 "model_calls\n";
    for (const auto& [key, group] : groups) {
      ErrorCounts errors;
      std::vector<DecodeResult> results;
      std::map<std::string, double> durations;
      for (const auto* r : group) {
        auto it = by_id.find(r->result.utterance_id);
        if (it == by_id.end()) {
          throw std::invalid_argument("record for unknown utterance " + r->result.utterance_id);
        }
        errors += align(r->result.tokens, it->second->reference);
        results.push_back(r->result);
        durations[it->first] = it->second->duration();
      }
      const RtfSummary s = rtf(results, durations);
      const RepetitionParams rp;
      std::printf("%s\t%s\t%.2f\t%lld\t%lld\t%lld\t%.2f\t%.4f\t%lld\n", key.first.c_str(),
                  key.second.c_str(), 100.0 * cer(errors), errors.insertions, errors.deletions,
                  errors.substitutions, 1000.0 * drr(results, rp), s.rtf, s.total_model_calls);
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(Stage::kMetrics, e.what());
  }
  return 0;
}

int cmd_run(const CommonArgs& args) {
  const ExperimentSpec spec = load_with_overrides(args);
  const ExperimentOutput out = run_experiment(spec);
  std::cout << "wrote " << out.report_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transcription-prompt ASR lab"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  CommonArgs train_args;
  CommonArgs decode_args;
  CommonArgs eval_args;
  CommonArgs report_args;
  CommonArgs run_args;
  std::string baseline;
  std::vector<std::string> candidates;

  add_common(app.add_subcommand("gen-corpus", "generate and save train/eval corpora"), gen_args);
  add_common(app.add_subcommand("train", "train one model per lambda value"), train_args);
  add_common(app.add_subcommand("decode", "decode the eval corpus with saved checkpoints"),
             decode_args);
  add_common(app.add_subcommand("eval", "score saved decode records"), eval_args);
  add_common(app.add_subcommand("report", "full pipeline, deterministic report"), report_args);
  add_common(app.add_subcommand("run", "full pipeline, deterministic report"), run_args);
  auto* cmp = app.add_subcommand("compare", "diff candidate reports against a baseline");
  cmp->add_option("--baseline", baseline, "baseline report.tsv")->required();
  cmp->add_option("reports", candidates, "candidate report.tsv files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("gen-corpus")) return cmd_gen_corpus(gen_args);
    if (app.got_subcommand("train")) return cmd_train(train_args);
    if (app.got_subcommand("decode")) return cmd_decode(decode_args);
    if (app.got_subcommand("eval")) return cmd_eval(eval_args);
    if (app.got_subcommand("report")) return cmd_run(report_args);
    if (app.got_subcommand("run")) return cmd_run(run_args);
    if (app.got_subcommand("compare")) {
      std::cout << compare_runs(baseline, candidates);
      return 0;
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
