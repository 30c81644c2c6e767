#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "asrlab/core.hpp"
#include "asrlab/decoding.hpp"
#include "asrlab/metrics.hpp"
#include "asrlab/rng.hpp"

namespace asrlab {

struct CorpusConfig {
  int count = 100;
  int min_len = 3;
  int max_len = 8;
  int frames_per_token = 2;
  int feat_dim = 8;
  double noise_level = 0.0;
  long long frame_us = 10000;  // microseconds per frame
  std::uint64_t seed = 0;

  void validate() const {
    if (count < 1) throw std::invalid_argument("corpus config: count < 1");
    if (min_len < 1 || max_len < min_len) {
      throw std::invalid_argument("corpus config: bad length range");
    }
    if (frames_per_token < 2) {
      throw std::invalid_argument("corpus config: frames_per_token < 2 breaks CTC feasibility");
    }
    if (feat_dim < 1) throw std::invalid_argument("corpus config: feat_dim < 1");
    if (noise_level < 0.0) throw std::invalid_argument("corpus config: negative noise level");
    if (frame_us < 1) throw std::invalid_argument("corpus config: frame_us < 1");
  }
};

namespace detail {

// Token prototype vectors are a fixed function of the token id, so corpora
// generated with different seeds share acoustics for the same symbols.
inline std::vector<double> token_prototype(int token_id, int feat_dim) {
  Rng rng(Rng::derive(0x9a0eu, static_cast<std::uint64_t>(token_id)));
  std::vector<double> v(static_cast<std::size_t>(feat_dim));
  for (auto& x : v) x = rng.gaussian();
  return v;
}

}  // namespace detail

inline std::vector<Utterance> generate_corpus(const CorpusConfig& cfg, const Vocab& vocab) {
  cfg.validate();
  std::vector<Utterance> corpus;
  corpus.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(Rng::derive(cfg.seed, 0xc05u, static_cast<std::uint64_t>(i)));
    Utterance u;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "utt-%06d", i);
    u.id = idbuf;
    const int len = cfg.min_len +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_len - cfg.min_len + 1)));
    u.reference.role = TokenRole::kReference;
    for (int t = 0; t < len; ++t) {
      u.reference.ids.push_back(
          kNumReserved + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.num_symbols()))));
    }
    u.frames = std::max(cfg.frames_per_token * len, 2 * len + 1);
    u.feat_dim = cfg.feat_dim;
    u.frame_duration = static_cast<double>(cfg.frame_us) * 1e-6;
    u.features.resize(static_cast<std::size_t>(u.frames) * cfg.feat_dim);
    for (int f = 0; f < u.frames; ++f) {
      const int tok = std::min(f / cfg.frames_per_token, len - 1);
      const auto proto = detail::token_prototype(u.reference.ids[static_cast<std::size_t>(tok)],
                                                 cfg.feat_dim);
      for (int d = 0; d < cfg.feat_dim; ++d) {
        const double x = proto[static_cast<std::size_t>(d)] + cfg.noise_level * rng.gaussian();
        u.features[static_cast<std::size_t>(f) * cfg.feat_dim + d] = static_cast<float>(x);
      }
    }
    corpus.push_back(std::move(u));
  }
  return corpus;
}

// On-disk corpus: <prefix>.manifest (text) + <prefix>.features.f32 (raw
// little-endian floats). One manifest line per utterance:
//   id \t frames \t duration_us \t transcript \t offset
inline void save_corpus(const std::vector<Utterance>& corpus, const Vocab& vocab,
                        const std::string& prefix) {
  if (corpus.empty()) throw std::invalid_argument("save_corpus: empty corpus");
  for (const auto& s : vocab.symbols()) {
    if (s.size() != 1) {
      throw std::invalid_argument("save_corpus: transcripts require single-character symbols");
    }
  }
  std::ofstream man(prefix + ".manifest", std::ios::binary);
  if (!man) throw std::runtime_error("save_corpus: cannot open " + prefix + ".manifest");
  std::ofstream blob(prefix + ".features.f32", std::ios::binary);
  if (!blob) throw std::runtime_error("save_corpus: cannot open " + prefix + ".features.f32");
  const long long frame_us =
      static_cast<long long>(corpus.front().frame_duration * 1e6 + 0.5);
  man << "asrlab-corpus 1\n";
  man << "feat_dim " << corpus.front().feat_dim << " frame_us " << frame_us << "\n";
  long long offset = 0;
  for (const auto& u : corpus) {
    const long long duration_us = frame_us * u.frames;
    man << u.id << '\t' << u.frames << '\t' << duration_us << '\t'
        << render_text(vocab, u.reference) << '\t' << offset << '\n';
    blob.write(reinterpret_cast<const char*>(u.features.data()),
               static_cast<std::streamsize>(u.features.size() * sizeof(float)));
    offset += static_cast<long long>(u.features.size() * sizeof(float));
  }
}

inline std::vector<Utterance> load_corpus(const std::string& prefix, const Vocab& vocab) {
  std::ifstream man(prefix + ".manifest", std::ios::binary);
  if (!man) throw std::runtime_error("load_corpus: missing manifest " + prefix + ".manifest");
  std::string line;
  if (!std::getline(man, line) || line != "asrlab-corpus 1") {
    throw std::runtime_error("load_corpus: bad manifest magic in " + prefix + ".manifest");
  }
  int feat_dim = 0;
  long long frame_us = 0;
  {
    std::string k1;
    std::string k2;
    std::getline(man, line);
    std::istringstream is(line);
    if (!(is >> k1 >> feat_dim >> k2 >> frame_us) || k1 != "feat_dim" || k2 != "frame_us") {
      throw std::runtime_error("load_corpus: bad manifest header line: " + line);
    }
  }
  const std::string blob_path = prefix + ".features.f32";
  if (!std::filesystem::exists(blob_path)) {
    throw std::runtime_error("load_corpus: missing feature file " + blob_path);
  }
  std::ifstream blob(blob_path, std::ios::binary);
  const long long blob_size =
      static_cast<long long>(std::filesystem::file_size(blob_path));

  std::vector<Utterance> corpus;
  long long expected_total = 0;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      fields.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (fields.size() != 5) {
      throw std::runtime_error("load_corpus: malformed manifest line: " + line);
    }
    Utterance u;
    u.id = fields[0];
    u.frames = std::stoi(fields[1]);
    u.feat_dim = feat_dim;
    u.frame_duration = static_cast<double>(frame_us) * 1e-6;
    u.reference.role = TokenRole::kReference;
    for (char c : fields[3]) u.reference.ids.push_back(vocab.id(std::string(1, c)));
    const long long offset = std::stoll(fields[4]);
    const long long bytes =
        static_cast<long long>(u.frames) * feat_dim * static_cast<long long>(sizeof(float));
    if (offset + bytes > blob_size) {
      throw std::runtime_error("load_corpus: truncated tensor for utterance " + u.id);
    }
    u.features.resize(static_cast<std::size_t>(u.frames) * feat_dim);
    blob.seekg(offset);
    blob.read(reinterpret_cast<char*>(u.features.data()), bytes);
    expected_total = std::max(expected_total, offset + bytes);
    corpus.push_back(std::move(u));
  }
  if (expected_total != blob_size) {
    throw std::runtime_error("load_corpus: manifest/file mismatch for " + blob_path);
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Scripted sequence models and the adversarial suite.

enum class ScriptedBehavior { kFaithful, kLoop, kHallucinate };

// Deterministic model with hand-computable decode traces.
//   faithful:    emits its target sequence then EOS, context-independent.
//   hallucinate: same, but the target differs from the reference.
//   loop:        cycles an n-gram forever when no prompt segment is in the
//                context; with the prompt present (NAR teacher forcing) it
//                emits the corrected sequence then EOS.
class ScriptedModel final : public SeqModel {
 public:
  ScriptedBehavior behavior = ScriptedBehavior::kFaithful;
  std::vector<int> target;     // clean output (faithful/loop) or hallucination
  std::vector<int> loop_gram;  // loop behavior only
  int vocab = 0;
  double top_logit = 10.0;
  double second_logit = -1e9;  // two distractor tokens per row
  double floor_logit = -1e9;

  int vocab_size() const override { return vocab; }

  int argmax_at(int n, bool prompt_in_context) const {
    switch (behavior) {
      case ScriptedBehavior::kFaithful:
      case ScriptedBehavior::kHallucinate:
        return n < static_cast<int>(target.size()) ? target[static_cast<std::size_t>(n)] : kEos;
      case ScriptedBehavior::kLoop:
        if (prompt_in_context) {
          return n < static_cast<int>(target.size()) ? target[static_cast<std::size_t>(n)] : kEos;
        }
        return loop_gram[static_cast<std::size_t>(n) % loop_gram.size()];
    }
    return kEos;
  }

  Mat logits_all(const DecodeContext& ctx) const override {
    const int rows = static_cast<int>(ctx.text.size()) + 1;
    Mat out(rows, vocab);
    const bool prompted = ctx.prompt != nullptr && !ctx.prompt->empty();
    for (int n = 0; n < rows; ++n) {
      double* row = out.row(n);
      for (int c = 0; c < vocab; ++c) row[c] = floor_logit;
      const int best = argmax_at(n, prompted);
      if (second_logit > floor_logit) {
        // two deterministic distractors, never equal to the argmax
        int d1 = kNumReserved + (best - kNumReserved + 1) % (vocab - kNumReserved);
        int d2 = kNumReserved + (best - kNumReserved + 2) % (vocab - kNumReserved);
        if (best < kNumReserved) {
          d1 = kNumReserved;
          d2 = kNumReserved + 1;
        }
        row[d1] = second_logit;
        row[d2] = second_logit;
      }
      row[best] = top_logit;
    }
    return out;
  }
};

struct AdversarialCase {
  std::string id;
  TokenSeq reference;
  TokenSeq prompt;  // the expert transcription; clean in this suite
  double duration_seconds = 0.0;
  ScriptedModel model;
};

struct AdversarialConfig {
  int count = 500;
  double loop_fraction = 0.1;
  double halluc_fraction = 0.1;
  int min_len = 6;
  int max_len = 12;
  std::uint64_t seed = 0;
};

namespace detail {

// Reference sequences for the scripted suite: no adjacent repeats and no
// repeated tail n-gram, so clean outputs never trip the repetition detector.
inline std::vector<int> scripted_reference(Rng& rng, const Vocab& vocab, int len) {
  RepetitionParams rp;
  while (true) {
    std::vector<int> ids;
    for (int t = 0; t < len; ++t) {
      int id;
      do {
        id = kNumReserved +
             static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.num_symbols())));
      } while (!ids.empty() && id == ids.back());
      ids.push_back(id);
    }
    if (!has_repeated_tail(ids, rp)) return ids;
  }
}

}  // namespace detail

inline std::vector<AdversarialCase> build_adversarial_suite(const Vocab& vocab,
                                                            const AdversarialConfig& cfg) {
  if (vocab.num_symbols() < 4) {
    throw std::invalid_argument("adversarial suite: vocab too small");
  }
  const int n_loop = static_cast<int>(cfg.count * cfg.loop_fraction + 0.5);
  const int n_halluc = static_cast<int>(cfg.count * cfg.halluc_fraction + 0.5);
  if (n_loop + n_halluc > cfg.count) {
    throw std::invalid_argument("adversarial suite: fractions exceed 1");
  }
  std::vector<AdversarialCase> suite;
  suite.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(Rng::derive(cfg.seed, 0xadu, static_cast<std::uint64_t>(i)));
    AdversarialCase c;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "adv-%06d", i);
    c.id = idbuf;
    const int len = cfg.min_len +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_len - cfg.min_len + 1)));
    c.reference.role = TokenRole::kReference;
    c.reference.ids = detail::scripted_reference(rng, vocab, len);
    c.prompt.role = TokenRole::kPrompt;
    c.prompt.ids = c.reference.ids;
    c.duration_seconds = 0.04 * len;
    c.model.vocab = vocab.size();
    c.model.target = c.reference.ids;
    if (i < n_loop) {
      c.model.behavior = ScriptedBehavior::kLoop;
      // a bigram loop that cannot agree with the reference start
      int g0;
      do {
        g0 = kNumReserved +
             static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.num_symbols())));
      } while (g0 == c.reference.ids[0]);
      int g1;
      do {
        g1 = kNumReserved +
             static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.num_symbols())));
      } while (g1 == g0);
      c.model.loop_gram = {g0, g1};
    } else if (i < n_loop + n_halluc) {
      c.model.behavior = ScriptedBehavior::kHallucinate;
      // substitute roughly a third of the positions, keeping the tail clean
      std::vector<int> wrong = c.reference.ids;
      for (std::size_t t = 0; t < wrong.size(); t += 3) {
        int id;
        do {
          id = kNumReserved +
               static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab.num_symbols())));
        } while (id == c.reference.ids[t] ||
                 (t > 0 && id == wrong[t - 1]) ||
                 (t + 1 < wrong.size() && id == wrong[t + 1]));
        wrong[t] = id;
      }
      RepetitionParams rp;
      if (has_repeated_tail(wrong, rp)) wrong = c.reference.ids;  // keep it clean
      c.model.target = std::move(wrong);
    }
    suite.push_back(std::move(c));
  }
  return suite;
}

}  // namespace asrlab
