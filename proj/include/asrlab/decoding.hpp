#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "asrlab/core.hpp"
#include "asrlab/matrix.hpp"
#include "asrlab/rng.hpp"
#include "asrlab/speech.hpp"

namespace asrlab {

// Full decoding context. Layout fed to a model is
//   [SOP, prompt, EOP] ++ speech ++ [SOT] ++ text       (prompt present)
//   speech ++ [SOT] ++ text                             (prompt absent)
// Scripted models may ignore the speech slot.
struct DecodeContext {
  const TokenSeq* prompt = nullptr;
  const SpeechRep* speech = nullptr;
  std::vector<int> text;
};

// Incremental AR interface: next_logits() predicts the token following the
// text fed so far; push() appends one text token.
class ArCursor {
 public:
  virtual ~ArCursor() = default;
  virtual std::vector<double> next_logits() = 0;
  virtual void push(int token) = 0;
};

class SeqModel {
 public:
  virtual ~SeqModel() = default;
  virtual int vocab_size() const = 0;

  // One logit row per text position: row n predicts the token at position n
  // given the prompt/speech segments and text[0..n). Returns text.size()+1
  // rows; the final row predicts the continuation.
  virtual Mat logits_all(const DecodeContext& ctx) const = 0;

  // Default cursor recomputes from scratch each step; trained models
  // override this with a KV cache.
  virtual std::unique_ptr<ArCursor> start(const TokenSeq* prompt,
                                          const SpeechRep* speech) const;
};

namespace detail {

class RecomputeCursor final : public ArCursor {
 public:
  RecomputeCursor(const SeqModel& m, const TokenSeq* prompt, const SpeechRep* speech)
      : model_(m) {
    ctx_.prompt = prompt;
    ctx_.speech = speech;
  }

  std::vector<double> next_logits() override {
    Mat all = model_.logits_all(ctx_);
    const double* last = all.row(all.rows - 1);
    return std::vector<double>(last, last + all.cols);
  }

  void push(int token) override { ctx_.text.push_back(token); }

 private:
  const SeqModel& model_;
  DecodeContext ctx_;
};

// Hypotheses may contain EOS and symbol tokens only; the other reserved ids
// are structural and never emitted, whatever the model scores them.
inline bool emittable(int id) { return id == kEos || id >= kNumReserved; }

inline int argmax_lowest(const std::vector<double>& v) {
  int best = kEos;
  for (int i = kNumReserved; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace detail

inline std::unique_ptr<ArCursor> SeqModel::start(const TokenSeq* prompt,
                                                 const SpeechRep* speech) const {
  return std::make_unique<detail::RecomputeCursor>(*this, prompt, speech);
}

enum class DecodeMode { kAr, kNar, kHybridArPath, kHybridNarFallback };

inline const char* decode_mode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::kAr: return "ar";
    case DecodeMode::kNar: return "nar";
    case DecodeMode::kHybridArPath: return "hybrid_ar_path";
    case DecodeMode::kHybridNarFallback: return "hybrid_nar_fallback";
  }
  return "?";
}

struct DecodeResult {
  std::string utterance_id;
  TokenSeq tokens;  // EOS stripped
  DecodeMode mode = DecodeMode::kAr;
  long long model_calls = 0;
  long long generated_before_fallback = 0;
  bool hit_max_limit = false;
  double wall_seconds = 0.0;
};

struct DecodeConfig {
  double sigma = 1.5;
  int max_tokens = 200;
  int min_fallback_threshold = 8;
  bool use_prompt_in_context = true;

  void validate() const {
    if (sigma <= 0.0) throw std::invalid_argument("decode config: sigma <= 0");
    if (max_tokens < 1) throw std::invalid_argument("decode config: max_tokens < 1");
    if (min_fallback_threshold < 0) {
      throw std::invalid_argument("decode config: negative fallback threshold");
    }
  }
};

namespace detail {

class WallClock {
 public:
  WallClock() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline const TokenSeq* context_prompt(const TokenSeq* prompt, const DecodeConfig& cfg) {
  if (!cfg.use_prompt_in_context || prompt == nullptr || prompt->empty()) return nullptr;
  return prompt;
}

}  // namespace detail

// Greedy AR decoding: argmax each step until EOS or the token limit.
inline DecodeResult decode_ar(const SeqModel& model, const SpeechRep* speech,
                              const TokenSeq* prompt, const DecodeConfig& cfg) {
  cfg.validate();
  detail::WallClock clock;
  DecodeResult r;
  r.mode = DecodeMode::kAr;
  r.tokens.role = TokenRole::kHypothesis;
  auto cursor = model.start(detail::context_prompt(prompt, cfg), speech);
  while (true) {
    const int tok = detail::argmax_lowest(cursor->next_logits());
    ++r.model_calls;
    if (tok == kEos) break;
    r.tokens.ids.push_back(tok);
    cursor->push(tok);
    if (r.tokens.length() >= cfg.max_tokens) {
      r.hit_max_limit = true;
      break;
    }
  }
  r.wall_seconds = clock.seconds();
  return r;
}

// One-step NAR decoding: the prompt is teacher-forced into the text slot and
// every position is read off one parallel pass. Output length <= L_prompt.
inline DecodeResult decode_nar(const SeqModel& model, const SpeechRep* speech,
                               const TokenSeq& prompt) {
  if (prompt.empty()) {
    throw std::invalid_argument("decode_nar: empty prompt; route to AR decoding");
  }
  detail::WallClock clock;
  DecodeResult r;
  r.mode = DecodeMode::kNar;
  r.tokens.role = TokenRole::kHypothesis;
  r.model_calls = 1;
  DecodeContext ctx;
  ctx.prompt = &prompt;
  ctx.speech = speech;
  ctx.text = prompt.ids;
  const Mat all = model.logits_all(ctx);
  for (int n = 0; n < prompt.length(); ++n) {
    const double* row = all.row(n);
    int best = kEos;
    for (int c = kNumReserved; c < all.cols; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best == kEos) break;
    r.tokens.ids.push_back(best);
  }
  r.wall_seconds = clock.seconds();
  return r;
}

// Hybrid AR-NAR: AR stepping with a length trigger. Once the decoded length
// exceeds max(sigma * L_prompt, min_fallback_threshold) the AR hypothesis is
// discarded and the NAR result returned instead.
inline DecodeResult decode_hybrid(const SeqModel& model, const SpeechRep* speech,
                                  const TokenSeq* prompt, const DecodeConfig& cfg) {
  cfg.validate();
  if (prompt == nullptr || prompt->empty()) {
    return decode_ar(model, speech, nullptr, cfg);  // degrade, mode stays ar
  }
  detail::WallClock clock;
  const double trigger = std::max(cfg.sigma * prompt->length(),
                                  static_cast<double>(cfg.min_fallback_threshold));
  DecodeResult r;
  r.mode = DecodeMode::kHybridArPath;
  r.tokens.role = TokenRole::kHypothesis;
  auto cursor = model.start(detail::context_prompt(prompt, cfg), speech);
  long long decoded = 0;
  while (true) {
    const int tok = detail::argmax_lowest(cursor->next_logits());
    ++r.model_calls;
    ++decoded;
    if (static_cast<double>(decoded) > trigger) {
      DecodeResult nar = decode_nar(model, speech, *prompt);
      nar.mode = DecodeMode::kHybridNarFallback;
      nar.model_calls = r.model_calls + 1;
      nar.generated_before_fallback = decoded;
      nar.wall_seconds = clock.seconds();
      return nar;
    }
    if (tok == kEos) break;
    r.tokens.ids.push_back(tok);
    cursor->push(tok);
    if (r.tokens.length() >= cfg.max_tokens) {
      // trigger exceeds the token cap; degenerate, reported as plain AR
      r.mode = DecodeMode::kAr;
      r.hit_max_limit = true;
      break;
    }
  }
  r.wall_seconds = clock.seconds();
  return r;
}

// Top-k temperature sampling. k=1 reproduces decode_ar token-for-token.
inline DecodeResult decode_topk(const SeqModel& model, const SpeechRep* speech,
                                const TokenSeq* prompt, int k, double temperature,
                                std::uint64_t seed, const DecodeConfig& cfg) {
  cfg.validate();
  if (k < 1) throw std::invalid_argument("decode_topk: k < 1");
  if (temperature <= 0.0) throw std::invalid_argument("decode_topk: temperature <= 0");
  detail::WallClock clock;
  Rng rng(Rng::derive(seed, 0x706bu));
  DecodeResult r;
  r.mode = DecodeMode::kAr;
  r.tokens.role = TokenRole::kHypothesis;
  auto cursor = model.start(detail::context_prompt(prompt, cfg), speech);
  while (true) {
    const std::vector<double> logits = cursor->next_logits();
    // top-k emittable indices, ties toward the lowest id
    std::vector<int> order;
    order.reserve(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (detail::emittable(static_cast<int>(i))) order.push_back(static_cast<int>(i));
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return logits[a] > logits[b]; });
    const int kk = std::min<int>(k, static_cast<int>(order.size()));
    double maxl = logits[order[0]];
    std::vector<double> probs(kk);
    double z = 0.0;
    for (int i = 0; i < kk; ++i) {
      probs[i] = std::exp((logits[order[i]] - maxl) / temperature);
      z += probs[i];
    }
    int tok = order[kk - 1];
    double u = rng.uniform() * z;
    for (int i = 0; i < kk; ++i) {
      if (u < probs[i]) {
        tok = order[i];
        break;
      }
      u -= probs[i];
    }
    ++r.model_calls;
    if (tok == kEos) break;
    r.tokens.ids.push_back(tok);
    cursor->push(tok);
    if (r.tokens.length() >= cfg.max_tokens) {
      r.hit_max_limit = true;
      break;
    }
  }
  r.wall_seconds = clock.seconds();
  return r;
}

// Line format: id \t mode \t hypothesis \t model_calls \t
// generated_before_fallback \t wall-time microseconds.
inline std::string format_decode_record(const DecodeResult& r, const Vocab& v) {
  std::string line = r.utterance_id;
  line += '\t';
  line += decode_mode_name(r.mode);
  line += '\t';
  line += render_text(v, r.tokens);
  line += '\t';
  line += std::to_string(r.model_calls);
  line += '\t';
  line += std::to_string(r.generated_before_fallback);
  line += '\t';
  line += std::to_string(static_cast<long long>(r.wall_seconds * 1e6 + 0.5));
  return line;
}

}  // namespace asrlab
