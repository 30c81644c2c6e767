#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "asrlab/core.hpp"
#include "asrlab/decoding.hpp"

namespace asrlab {

struct ErrorCounts {
  long long insertions = 0;
  long long deletions = 0;
  long long substitutions = 0;
  long long matches = 0;
  long long ref_len = 0;

  long long edits() const { return insertions + deletions + substitutions; }

  ErrorCounts& operator+=(const ErrorCounts& o) {
    insertions += o.insertions;
    deletions += o.deletions;
    substitutions += o.substitutions;
    matches += o.matches;
    ref_len += o.ref_len;
    return *this;
  }
};

// Levenshtein alignment with unit costs. Among minimum-edit alignments the
// counts are made canonical by maximizing matches, then substitutions
// (tie-break priority match > sub > del > ins). This makes the (M, S) split
// direction-symmetric, so align(a, b) and align(b, a) swap I and D exactly.
inline ErrorCounts align(const TokenSeq& hyp, const TokenSeq& ref) {
  for (int id : hyp.ids) {
    if (id == kEos) throw std::invalid_argument("align: EOS in hypothesis");
  }
  for (int id : ref.ids) {
    if (id == kEos) throw std::invalid_argument("align: EOS in reference");
  }
  const int n = hyp.length();
  const int m = ref.length();

  struct Cell {
    int edits = 0;
    int matches = 0;
    int subs = 0;
    char move = ' ';  // 'm', 's', 'd' (ref only), 'i' (hyp only)
  };
  // lexicographic objective: fewer edits, then more matches, then more subs
  auto better = [](const Cell& a, const Cell& b) {
    if (a.edits != b.edits) return a.edits < b.edits;
    if (a.matches != b.matches) return a.matches > b.matches;
    return a.subs > b.subs;
  };

  std::vector<std::vector<Cell>> dp(static_cast<std::size_t>(n) + 1,
                                    std::vector<Cell>(static_cast<std::size_t>(m) + 1));
  for (int i = 1; i <= n; ++i) {
    dp[i][0] = {i, 0, 0, 'i'};
  }
  for (int j = 1; j <= m; ++j) {
    dp[0][j] = {j, 0, 0, 'd'};
  }
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      const bool eq = hyp.ids[i - 1] == ref.ids[j - 1];
      Cell diag = dp[i - 1][j - 1];
      if (eq) {
        ++diag.matches;
        diag.move = 'm';
      } else {
        ++diag.edits;
        ++diag.subs;
        diag.move = 's';
      }
      Cell del = dp[i][j - 1];
      ++del.edits;
      del.move = 'd';
      Cell ins = dp[i - 1][j];
      ++ins.edits;
      ins.move = 'i';
      // candidate priority match/sub > del > ins on exact ties
      Cell best = diag;
      if (better(del, best)) best = del;
      if (better(ins, best)) best = ins;
      dp[i][j] = best;
    }
  }

  ErrorCounts c;
  c.ref_len = m;
  int i = n;
  int j = m;
  while (i > 0 || j > 0) {
    switch (dp[i][j].move) {
      case 'm':
        ++c.matches;
        --i;
        --j;
        break;
      case 's':
        ++c.substitutions;
        --i;
        --j;
        break;
      case 'd':
        ++c.deletions;
        --j;
        break;
      default:
        ++c.insertions;
        --i;
        break;
    }
  }
  return c;
}

// (I + D + S) / ref_len, as a fraction. Reports multiply by 100.
inline double cer(const ErrorCounts& c) {
  if (c.ref_len <= 0) throw std::invalid_argument("cer: ref_len is zero");
  return static_cast<double>(c.edits()) / static_cast<double>(c.ref_len);
}

struct RepetitionParams {
  int max_ngram = 5;
  int min_repeats = 4;

  void validate() const {
    if (max_ngram < 1) throw std::invalid_argument("repetition: max_ngram < 1");
    if (min_repeats < 2) throw std::invalid_argument("repetition: min_repeats < 2");
  }
};

// True iff the sequence ends with some n-gram (n <= max_ngram) repeated
// consecutively at least min_repeats times.
inline bool has_repeated_tail(const std::vector<int>& ids, const RepetitionParams& p) {
  const int len = static_cast<int>(ids.size());
  for (int n = 1; n <= p.max_ngram; ++n) {
    if (n * p.min_repeats > len) break;
    bool ok = true;
    for (int k = 0; ok && k < n * (p.min_repeats - 1); ++k) {
      if (ids[len - 1 - k] != ids[len - 1 - k - n]) ok = false;
    }
    if (ok) return true;
  }
  return false;
}

// Repetition pathology detector: max-limit hit, or a repeated tail n-gram.
// An NAR fallback by itself does not count; only the output is scored.
inline bool detect_repetition(const DecodeResult& r, const RepetitionParams& p) {
  p.validate();
  if (r.hit_max_limit) return true;
  return has_repeated_tail(r.tokens.ids, p);
}

// Sentence-level decoding repetition ratio, as a fraction of the corpus.
// Reports render it per mille.
inline double drr(const std::vector<DecodeResult>& results, const RepetitionParams& p) {
  if (results.empty()) throw std::invalid_argument("drr: empty corpus");
  long long flagged = 0;
  for (const auto& r : results) {
    if (detect_repetition(r, p)) ++flagged;
  }
  return static_cast<double>(flagged) / static_cast<double>(results.size());
}

struct RtfSummary {
  double rtf = 0.0;  // total wall time / total audio duration
  double total_wall_seconds = 0.0;
  double total_audio_seconds = 0.0;
  long long total_model_calls = 0;
};

// results and durations are keyed by utterance id; the sets must match.
inline RtfSummary rtf(const std::vector<DecodeResult>& results,
                      const std::map<std::string, double>& durations) {
  std::string missing;
  std::map<std::string, bool> seen;
  RtfSummary s;
  for (const auto& r : results) {
    auto it = durations.find(r.utterance_id);
    if (it == durations.end()) {
      missing += (missing.empty() ? "" : ", ") + r.utterance_id;
      continue;
    }
    seen[r.utterance_id] = true;
    s.total_wall_seconds += r.wall_seconds;
    s.total_audio_seconds += it->second;
    s.total_model_calls += r.model_calls;
  }
  for (const auto& [id, dur] : durations) {
    (void)dur;
    if (!seen.count(id)) missing += (missing.empty() ? "" : ", ") + id;
  }
  if (!missing.empty()) {
    throw std::invalid_argument("rtf: mismatched utterance sets: " + missing);
  }
  if (s.total_audio_seconds <= 0.0) throw std::invalid_argument("rtf: zero total duration");
  s.rtf = s.total_wall_seconds / s.total_audio_seconds;
  return s;
}

}  // namespace asrlab
