#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "asrlab/core.hpp"
#include "asrlab/corpus.hpp"
#include "asrlab/decoding.hpp"
#include "asrlab/metrics.hpp"
#include "asrlab/model.hpp"
#include "asrlab/tokenizer.hpp"

namespace asrlab {

// Pipeline stages, in execution order. Each maps to a distinct exit code.
enum class Stage {
  kConfig = 2,
  kCorpus = 3,
  kTokenizer = 4,
  kModel = 5,
  kDecode = 6,
  kMetrics = 7,
  kReport = 8,
};

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kConfig: return "config";
    case Stage::kCorpus: return "corpus";
    case Stage::kTokenizer: return "tokenizer";
    case Stage::kModel: return "model";
    case Stage::kDecode: return "decode";
    case Stage::kMetrics: return "metrics";
    case Stage::kReport: return "report";
  }
  return "?";
}

class StageError : public std::runtime_error {
 public:
  StageError(Stage stage, const std::string& what)
      : std::runtime_error(std::string(stage_name(stage)) + " stage: " + what),
        stage_(stage) {}
  Stage stage() const { return stage_; }
  int exit_code() const { return static_cast<int>(stage_); }

 private:
  Stage stage_;
};

enum class DecodeStrategy { kAr, kNar, kHybrid, kTopk };

inline const char* strategy_name(DecodeStrategy s) {
  switch (s) {
    case DecodeStrategy::kAr: return "ar";
    case DecodeStrategy::kNar: return "nar";
    case DecodeStrategy::kHybrid: return "hybrid";
    case DecodeStrategy::kTopk: return "topk";
  }
  return "?";
}

struct ExperimentSpec {
  // corpus
  std::string corpus_path;  // optional saved eval corpus prefix
  CorpusConfig train_corpus;
  int eval_count = 200;
  std::uint64_t eval_seed = 1;
  std::string vocab_symbols = "abcdefghijklmnop";

  // tokenizer
  TokenizerParams tokenizer;

  // model
  std::string checkpoint;  // optional; mutually exclusive with training
  std::vector<double> lambdas{0.5};
  ModelConfig model;
  TrainConfig training;

  // decode
  std::vector<DecodeStrategy> strategies{DecodeStrategy::kHybrid};
  DecodeConfig decode;
  int topk_k = 3;
  double topk_temperature = 1.0;
  std::uint64_t topk_seed = 0;

  // run
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out_dir = "out";
};

namespace detail {

inline std::map<std::string, std::string> parse_kv_sections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw StageError(Stage::kConfig, "cannot open spec " + path);
  std::map<std::string, std::string> kv;
  std::string section;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    if (line[first] == '#' || line[first] == ';') continue;
    if (line[first] == '[') {
      const auto close = line.find(']', first);
      if (close == std::string::npos) {
        throw StageError(Stage::kConfig, "unterminated section at line " + std::to_string(lineno));
      }
      section = line.substr(first + 1, close - first - 1);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw StageError(Stage::kConfig, "expected key = value at line " + std::to_string(lineno));
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[section + "." + trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::uint64_t corpus_fingerprint(const std::vector<Utterance>& corpus) {
  std::string all;
  for (const auto& u : corpus) {
    all += u.id;
    all += '\n';
  }
  return fnv1a(all);
}

inline std::string format2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string format4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace detail

inline ExperimentSpec load_spec(const std::string& path) {
  auto kv = detail::parse_kv_sections(path);
  ExperimentSpec spec;
  auto get = [&](const std::string& key, auto&& setter) {
    auto it = kv.find(key);
    if (it != kv.end()) setter(it->second);
  };
  auto to_i = [](const std::string& s) { return std::stoi(s); };
  auto to_ll = [](const std::string& s) { return std::stoll(s); };
  auto to_u64 = [](const std::string& s) { return static_cast<std::uint64_t>(std::stoull(s)); };
  auto to_d = [](const std::string& s) { return std::stod(s); };
  auto to_b = [](const std::string& s) { return s == "1" || s == "true" || s == "yes"; };

  get("corpus.path", [&](const std::string& v) { spec.corpus_path = v; });
  get("corpus.count", [&](const std::string& v) { spec.train_corpus.count = to_i(v); });
  get("corpus.min_len", [&](const std::string& v) { spec.train_corpus.min_len = to_i(v); });
  get("corpus.max_len", [&](const std::string& v) { spec.train_corpus.max_len = to_i(v); });
  get("corpus.frames_per_token",
      [&](const std::string& v) { spec.train_corpus.frames_per_token = to_i(v); });
  get("corpus.feat_dim", [&](const std::string& v) { spec.train_corpus.feat_dim = to_i(v); });
  get("corpus.noise_level",
      [&](const std::string& v) { spec.train_corpus.noise_level = to_d(v); });
  get("corpus.frame_us", [&](const std::string& v) { spec.train_corpus.frame_us = to_ll(v); });
  get("corpus.seed", [&](const std::string& v) { spec.train_corpus.seed = to_u64(v); });
  get("corpus.eval_count", [&](const std::string& v) { spec.eval_count = to_i(v); });
  get("corpus.eval_seed", [&](const std::string& v) { spec.eval_seed = to_u64(v); });
  get("corpus.vocab", [&](const std::string& v) { spec.vocab_symbols = v; });

  get("tokenizer.mode", [&](const std::string& v) {
    if (v == "ctc") spec.tokenizer.mode = TokenizerMode::kCtc;
    else if (v == "oracle") spec.tokenizer.mode = TokenizerMode::kOracle;
    else throw StageError(Stage::kConfig, "unknown tokenizer mode " + v);
  });
  get("tokenizer.peak", [&](const std::string& v) { spec.tokenizer.peak = to_d(v); });
  get("tokenizer.noise_temp", [&](const std::string& v) { spec.tokenizer.noise_temp = to_d(v); });
  get("tokenizer.seed", [&](const std::string& v) {
    spec.tokenizer.seed = to_u64(v);
    spec.tokenizer.profile.seed = to_u64(v);
  });
  get("tokenizer.sub_rate", [&](const std::string& v) { spec.tokenizer.profile.sub_rate = to_d(v); });
  get("tokenizer.ins_rate", [&](const std::string& v) { spec.tokenizer.profile.ins_rate = to_d(v); });
  get("tokenizer.del_rate", [&](const std::string& v) { spec.tokenizer.profile.del_rate = to_d(v); });

  get("model.checkpoint", [&](const std::string& v) { spec.checkpoint = v; });
  get("model.lambda", [&](const std::string& v) {
    spec.lambdas.clear();
    for (const auto& item : detail::split_list(v)) spec.lambdas.push_back(to_d(item));
  });
  get("model.d_enc", [&](const std::string& v) { spec.model.d_enc = to_i(v); });
  get("model.enc_blocks", [&](const std::string& v) { spec.model.enc_blocks = to_i(v); });
  get("model.d_model", [&](const std::string& v) { spec.model.d_model = to_i(v); });
  get("model.dec_blocks", [&](const std::string& v) { spec.model.dec_blocks = to_i(v); });
  get("model.heads", [&](const std::string& v) { spec.model.heads = to_i(v); });
  get("model.max_ctx", [&](const std::string& v) { spec.model.max_ctx = to_i(v); });
  get("model.learning_rate",
      [&](const std::string& v) { spec.training.learning_rate = to_d(v); });
  get("model.batch_size", [&](const std::string& v) { spec.training.batch_size = to_i(v); });
  get("model.steps", [&](const std::string& v) { spec.training.steps = to_i(v); });
  get("model.seed", [&](const std::string& v) { spec.training.seed = to_u64(v); });
  get("model.train_encoder", [&](const std::string& v) { spec.training.train_encoder = to_b(v); });
  get("model.train_adapter", [&](const std::string& v) { spec.training.train_adapter = to_b(v); });
  get("model.train_decoder", [&](const std::string& v) { spec.training.train_decoder = to_b(v); });

  get("decode.strategy", [&](const std::string& v) {
    spec.strategies.clear();
    for (const auto& item : detail::split_list(v)) {
      if (item == "ar") spec.strategies.push_back(DecodeStrategy::kAr);
      else if (item == "nar") spec.strategies.push_back(DecodeStrategy::kNar);
      else if (item == "hybrid") spec.strategies.push_back(DecodeStrategy::kHybrid);
      else if (item == "topk") spec.strategies.push_back(DecodeStrategy::kTopk);
      else throw StageError(Stage::kConfig, "unknown decode strategy " + item);
    }
  });
  get("decode.sigma", [&](const std::string& v) { spec.decode.sigma = to_d(v); });
  get("decode.max_tokens", [&](const std::string& v) { spec.decode.max_tokens = to_i(v); });
  get("decode.min_fallback_threshold",
      [&](const std::string& v) { spec.decode.min_fallback_threshold = to_i(v); });
  get("decode.use_prompt_in_context",
      [&](const std::string& v) { spec.decode.use_prompt_in_context = to_b(v); });
  get("decode.k", [&](const std::string& v) { spec.topk_k = to_i(v); });
  get("decode.temperature", [&](const std::string& v) { spec.topk_temperature = to_d(v); });
  get("decode.seed", [&](const std::string& v) { spec.topk_seed = to_u64(v); });

  get("run.seed", [&](const std::string& v) { spec.seed = to_u64(v); });
  get("run.threads", [&](const std::string& v) { spec.threads = to_i(v); });
  get("run.out", [&](const std::string& v) { spec.out_dir = v; });

  if (!spec.checkpoint.empty() && spec.lambdas.size() > 1) {
    throw StageError(Stage::kConfig, "checkpoint given together with a lambda sweep");
  }
  if (spec.lambdas.empty()) throw StageError(Stage::kConfig, "no lambda values");
  if (spec.strategies.empty()) throw StageError(Stage::kConfig, "no decode strategies");
  if (spec.threads < 1) throw StageError(Stage::kConfig, "threads < 1");
  if (spec.vocab_symbols.empty()) throw StageError(Stage::kConfig, "empty vocab");
  return spec;
}

namespace detail {

// Deterministic latency proxy for the report RTF column; measured wall clock
// goes to timing.tsv instead so report bytes depend only on the spec.
constexpr double kNominalSecondsPerCall = 0.01;

inline Vocab spec_vocab(const ExperimentSpec& spec) {
  std::vector<std::string> symbols;
  for (char c : spec.vocab_symbols) symbols.emplace_back(1, c);
  return Vocab(std::move(symbols));
}

inline TokenSeq prompt_for(const ExperimentSpec& spec, const Vocab& vocab, const Utterance& u) {
  TokenizerParams params = spec.tokenizer;
  const std::uint64_t utt_seed = Rng::derive(params.seed, fnv1a(u.id));
  params.seed = utt_seed;
  params.profile.seed = utt_seed;
  return tokenize(u, vocab, params);
}

struct RunRow {
  double lambda = 0.0;
  DecodeStrategy strategy = DecodeStrategy::kAr;
  ErrorCounts errors;
  double drr_fraction = 0.0;
  long long model_calls = 0;
  double total_audio_seconds = 0.0;
  double total_wall_seconds = 0.0;
  std::vector<DecodeResult> results;
};

inline std::vector<DecodeResult> decode_corpus(const SeqModel& model,
                                               const std::vector<Utterance>& eval_corpus,
                                               const std::vector<SpeechRep>& reps,
                                               const std::vector<TokenSeq>& prompts,
                                               const ExperimentSpec& spec,
                                               DecodeStrategy strategy) {
  std::vector<DecodeResult> results(eval_corpus.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= eval_corpus.size()) break;
      const TokenSeq& prompt = prompts[i];
      const SpeechRep* rep = &reps[i];
      DecodeResult r;
      switch (strategy) {
        case DecodeStrategy::kAr:
          r = decode_ar(model, rep, prompt.empty() ? nullptr : &prompt, spec.decode);
          break;
        case DecodeStrategy::kNar:
          if (prompt.empty()) {
            r = decode_ar(model, rep, nullptr, spec.decode);
          } else {
            r = decode_nar(model, rep, prompt);
          }
          break;
        case DecodeStrategy::kHybrid:
          r = decode_hybrid(model, rep, prompt.empty() ? nullptr : &prompt, spec.decode);
          break;
        case DecodeStrategy::kTopk:
          r = decode_topk(model, rep, prompt.empty() ? nullptr : &prompt, spec.topk_k,
                          spec.topk_temperature,
                          Rng::derive(spec.topk_seed, fnv1a(eval_corpus[i].id)), spec.decode);
          break;
      }
      r.utterance_id = eval_corpus[i].id;
      results[i] = std::move(r);
    }
  };
  const int nworkers =
      static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(spec.threads),
                                             eval_corpus.size()));
  if (nworkers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nworkers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return results;
}

inline RunRow score_results(const std::vector<Utterance>& eval_corpus,
                            std::vector<DecodeResult> results, double lambda,
                            DecodeStrategy strategy) {
  RunRow row;
  row.lambda = lambda;
  row.strategy = strategy;
  RepetitionParams rp;
  for (std::size_t i = 0; i < eval_corpus.size(); ++i) {
    row.errors += align(results[i].tokens, eval_corpus[i].reference);
    row.model_calls += results[i].model_calls;
    row.total_audio_seconds += eval_corpus[i].duration();
    row.total_wall_seconds += results[i].wall_seconds;
  }
  row.drr_fraction = drr(results, rp);
  row.results = std::move(results);
  return row;
}

inline void write_report_header(std::ostream& out, const ExperimentSpec& spec,
                                std::uint64_t fingerprint) {
  out << "# asrlab-report 1\n";
  out << "# corpus.count = " << spec.train_corpus.count << "\n";
  out << "# corpus.min_len = " << spec.train_corpus.min_len << "\n";
  out << "# corpus.max_len = " << spec.train_corpus.max_len << "\n";
  out << "# corpus.frames_per_token = " << spec.train_corpus.frames_per_token << "\n";
  out << "# corpus.feat_dim = " << spec.train_corpus.feat_dim << "\n";
  out << "# corpus.noise_level = " << format4(spec.train_corpus.noise_level) << "\n";
  out << "# corpus.frame_us = " << spec.train_corpus.frame_us << "\n";
  out << "# corpus.seed = " << spec.train_corpus.seed << "\n";
  out << "# corpus.eval_count = " << spec.eval_count << "\n";
  out << "# corpus.eval_seed = " << spec.eval_seed << "\n";
  out << "# corpus.vocab = " << spec.vocab_symbols << "\n";
  out << "# tokenizer.mode = "
      << (spec.tokenizer.mode == TokenizerMode::kCtc ? "ctc" : "oracle") << "\n";
  out << "# tokenizer.sub_rate = " << format4(spec.tokenizer.profile.sub_rate) << "\n";
  out << "# tokenizer.ins_rate = " << format4(spec.tokenizer.profile.ins_rate) << "\n";
  out << "# tokenizer.del_rate = " << format4(spec.tokenizer.profile.del_rate) << "\n";
  out << "# tokenizer.peak = " << format4(spec.tokenizer.peak) << "\n";
  out << "# tokenizer.noise_temp = " << format4(spec.tokenizer.noise_temp) << "\n";
  out << "# tokenizer.seed = " << spec.tokenizer.seed << "\n";
  out << "# model.checkpoint = " << spec.checkpoint << "\n";
  out << "# model.d_enc = " << spec.model.d_enc << "\n";
  out << "# model.enc_blocks = " << spec.model.enc_blocks << "\n";
  out << "# model.d_model = " << spec.model.d_model << "\n";
  out << "# model.dec_blocks = " << spec.model.dec_blocks << "\n";
  out << "# model.heads = " << spec.model.heads << "\n";
  out << "# model.max_ctx = " << spec.model.max_ctx << "\n";
  out << "# model.learning_rate = " << format4(spec.training.learning_rate) << "\n";
  out << "# model.batch_size = " << spec.training.batch_size << "\n";
  out << "# model.steps = " << spec.training.steps << "\n";
  out << "# model.seed = " << spec.training.seed << "\n";
  out << "# decode.sigma = " << format4(spec.decode.sigma) << "\n";
  out << "# decode.max_tokens = " << spec.decode.max_tokens << "\n";
  out << "# decode.min_fallback_threshold = " << spec.decode.min_fallback_threshold << "\n";
  out << "# decode.use_prompt_in_context = " << (spec.decode.use_prompt_in_context ? 1 : 0)
      << "\n";
  out << "# decode.k = " << spec.topk_k << "\n";
  out << "# decode.temperature = " << format4(spec.topk_temperature) << "\n";
  out << "# decode.seed = " << spec.topk_seed << "\n";
  out << "# run.seed = " << spec.seed << "\n";
  out << "# rtf.seconds_per_call = " << format4(kNominalSecondsPerCall) << "\n";
  out << "# eval.fingerprint = " << fingerprint << "\n";
}

}  // namespace detail

struct ExperimentOutput {
  std::string report_path;
  std::string records_path;
  std::string timing_path;
};

// Full pipeline: corpus -> tokenizer -> model -> decode -> metrics -> report.
// The report is a pure function of the spec; wall-clock numbers go to the
// timing sidecar only. A failed stage removes partial outputs.
inline ExperimentOutput run_experiment(const ExperimentSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(spec.out_dir);
  ExperimentOutput paths;
  paths.report_path = spec.out_dir + "/report.tsv";
  paths.records_path = spec.out_dir + "/records.tsv";
  paths.timing_path = spec.out_dir + "/timing.tsv";

  auto cleanup = [&] {
    std::error_code ec;
    fs::remove(paths.report_path, ec);
    fs::remove(paths.records_path, ec);
    fs::remove(paths.timing_path, ec);
  };

  try {
    const Vocab vocab = detail::spec_vocab(spec);

    // corpus stage
    std::vector<Utterance> train_corpus;
    std::vector<Utterance> eval_corpus;
    try {
      if (spec.checkpoint.empty()) {
        train_corpus = generate_corpus(spec.train_corpus, vocab);
      }
      if (!spec.corpus_path.empty()) {
        eval_corpus = load_corpus(spec.corpus_path, vocab);
      } else {
        CorpusConfig eval_cfg = spec.train_corpus;
        eval_cfg.count = spec.eval_count;
        eval_cfg.seed = spec.eval_seed;
        eval_corpus = generate_corpus(eval_cfg, vocab);
      }
    } catch (const std::exception& e) {
      throw StageError(Stage::kCorpus, e.what());
    }

    // tokenizer stage
    std::vector<TokenSeq> train_prompts;
    std::vector<TokenSeq> eval_prompts;
    try {
      for (const auto& u : train_corpus) train_prompts.push_back(detail::prompt_for(spec, vocab, u));
      for (const auto& u : eval_corpus) eval_prompts.push_back(detail::prompt_for(spec, vocab, u));
    } catch (const std::exception& e) {
      throw StageError(Stage::kTokenizer, e.what());
    }

    // model stage: one model per lambda (or a single checkpoint)
    std::vector<ModelParams> models;
    try {
      if (!spec.checkpoint.empty()) {
        models.push_back(ModelParams::load(spec.checkpoint));
      } else {
        for (double lambda : spec.lambdas) {
          ModelConfig mc = spec.model;
          mc.feat_dim = spec.train_corpus.feat_dim;
          mc.vocab_size = vocab.size();
          ModelParams params = ModelParams::init(mc, spec.training.seed);
          TrainConfig tc = spec.training;
          tc.lambda = lambda;
          tc.threads = spec.threads;
          train(params, train_corpus, train_prompts, tc);
          models.push_back(std::move(params));
        }
      }
    } catch (const std::exception& e) {
      throw StageError(Stage::kModel, e.what());
    }

    // decode stage
    std::vector<detail::RunRow> rows;
    try {
      for (std::size_t mi = 0; mi < models.size(); ++mi) {
        const TrainedSeqModel model(models[mi]);
        std::vector<SpeechRep> reps;
        reps.reserve(eval_corpus.size());
        for (const auto& u : eval_corpus) reps.push_back(encode_speech(models[mi], u));
        for (DecodeStrategy strategy : spec.strategies) {
          auto results =
              detail::decode_corpus(model, eval_corpus, reps, eval_prompts, spec, strategy);
          rows.push_back(detail::score_results(eval_corpus, std::move(results),
                                               spec.lambdas[mi % spec.lambdas.size()], strategy));
        }
      }
    } catch (const std::exception& e) {
      throw StageError(Stage::kDecode, e.what());
    }

    // report stage
    try {
      const std::uint64_t fingerprint = detail::corpus_fingerprint(eval_corpus);
      std::ofstream report(paths.report_path, std::ios::binary);
      std::ofstream records(paths.records_path, std::ios::binary);
      std::ofstream timing(paths.timing_path, std::ios::binary);
      if (!report || !records || !timing) {
        throw std::runtime_error("cannot open output files under " + spec.out_dir);
      }
      detail::write_report_header(report, spec, fingerprint);
      report << "model\tlambda\tmode\tcer_pct\tins\tdel\tsub\tdrr_permille\trtf\tmodel_calls\n";
      timing << "model\tlambda\tmode\twall_seconds\taudio_seconds\trtf_measured\n";
      for (const auto& row : rows) {
        const double cer_pct = 100.0 * cer(row.errors);
        const double rtf_proxy = row.model_calls * detail::kNominalSecondsPerCall /
                                 row.total_audio_seconds;
        report << "audio-llm\t" << detail::format2(row.lambda) << '\t'
               << strategy_name(row.strategy) << '\t' << detail::format2(cer_pct) << '\t'
               << row.errors.insertions << '\t' << row.errors.deletions << '\t'
               << row.errors.substitutions << '\t'
               << detail::format2(1000.0 * row.drr_fraction) << '\t'
               << detail::format4(rtf_proxy) << '\t' << row.model_calls << '\n';
        timing << "audio-llm\t" << detail::format2(row.lambda) << '\t'
               << strategy_name(row.strategy) << '\t'
               << detail::format4(row.total_wall_seconds) << '\t'
               << detail::format4(row.total_audio_seconds) << '\t'
               << detail::format4(row.total_wall_seconds / row.total_audio_seconds) << '\n';
        for (const auto& r : row.results) {
          records << detail::format2(row.lambda) << '\t' << strategy_name(row.strategy) << '\t'
                  << format_decode_record(r, vocab) << '\n';
        }
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(Stage::kReport, e.what());
    }
    return paths;
  } catch (...) {
    cleanup();
    throw;
  }
}

// ---------------------------------------------------------------------------
// Report comparison.

struct ReportRow {
  std::string model;
  std::string lambda;
  std::string mode;
  double cer_pct = 0.0;
  double drr_permille = 0.0;
  double rtf = 0.0;
  long long model_calls = 0;
};

struct ParsedReport {
  std::uint64_t fingerprint = 0;
  std::vector<ReportRow> rows;
};

inline ParsedReport parse_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("compare: cannot open report " + path);
  ParsedReport rep;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.rfind("# eval.fingerprint = ", 0) == 0) {
      rep.fingerprint = std::stoull(line.substr(21));
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // column header
      continue;
    }
    std::istringstream is(line);
    ReportRow row;
    std::string ins;
    std::string del;
    std::string sub;
    if (!(is >> row.model >> row.lambda >> row.mode >> row.cer_pct >> ins >> del >> sub >>
          row.drr_permille >> row.rtf >> row.model_calls)) {
      throw std::runtime_error("compare: malformed report row in " + path + ": " + line);
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

// Absolute and relative CER/DRR/RTF deltas of each candidate row against the
// row with the same (lambda, mode) key in the baseline report.
inline std::string compare_runs(const std::string& baseline_path,
                                const std::vector<std::string>& candidate_paths) {
  const ParsedReport base = parse_report(baseline_path);
  if (base.rows.empty()) throw std::runtime_error("compare: baseline has no rows");
  std::map<std::string, const ReportRow*> base_rows;
  for (const auto& row : base.rows) base_rows[row.lambda + "|" + row.mode] = &row;

  std::ostringstream out;
  out << "report\tlambda\tmode\tcer_pct\td_cer\td_cer_rel_pct\tdrr_permille\td_drr\trtf\t"
         "d_rtf_rel_pct\n";
  for (const auto& path : candidate_paths) {
    const ParsedReport cand = parse_report(path);
    if (cand.fingerprint != base.fingerprint) {
      throw std::runtime_error("compare: disjoint utterance sets between " + baseline_path +
                               " and " + path);
    }
    for (const auto& row : cand.rows) {
      const std::string key = row.lambda + "|" + row.mode;
      auto it = base_rows.find(key);
      if (it == base_rows.end()) {
        throw std::runtime_error("compare: baseline row missing for key " + key);
      }
      const ReportRow& b = *it->second;
      const double d_cer = row.cer_pct - b.cer_pct;
      const double d_cer_rel = b.cer_pct != 0.0 ? 100.0 * d_cer / b.cer_pct : 0.0;
      const double d_drr = row.drr_permille - b.drr_permille;
      const double d_rtf_rel = b.rtf != 0.0 ? 100.0 * (row.rtf - b.rtf) / b.rtf : 0.0;
      out << path << '\t' << row.lambda << '\t' << row.mode << '\t'
          << detail::format2(row.cer_pct) << '\t' << detail::format2(d_cer) << '\t'
          << detail::format2(d_cer_rel) << '\t' << detail::format2(row.drr_permille) << '\t'
          << detail::format2(d_drr) << '\t' << detail::format4(row.rtf) << '\t'
          << detail::format2(d_rtf_rel) << '\n';
    }
  }
  return out.str();
}

}  // namespace asrlab
