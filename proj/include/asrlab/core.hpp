#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace asrlab {

// Reserved token ids. BLANK exists only in emission lattices; the rest may
// appear in model contexts but never inside a TokenSeq payload.
enum SpecialToken : int {
  kBlank = 0,
  kEos = 1,
  kPad = 2,
  kSop = 3,  // start of prompt
  kEop = 4,  // end of prompt
  kSot = 5,  // start of transcript
};

constexpr int kNumReserved = 6;

class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    if (symbols_.empty()) {
      throw std::invalid_argument("vocab: symbol list is empty");
    }
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      const auto& s = symbols_[i];
      if (s.empty()) {
        throw std::invalid_argument("vocab: empty symbol at index " + std::to_string(i));
      }
      auto [it, inserted] = index_.emplace(s, kNumReserved + static_cast<int>(i));
      if (!inserted) {
        throw std::invalid_argument("vocab: duplicate symbol \"" + s + "\"");
      }
    }
  }

  int size() const { return kNumReserved + static_cast<int>(symbols_.size()); }
  int num_symbols() const { return static_cast<int>(symbols_.size()); }

  int id(const std::string& symbol) const {
    auto it = index_.find(symbol);
    if (it == index_.end()) {
      throw std::invalid_argument("vocab: unknown symbol \"" + symbol + "\"");
    }
    return it->second;
  }

  bool contains(const std::string& symbol) const { return index_.count(symbol) != 0; }

  const std::string& symbol(int id) const {
    if (id < kNumReserved || id >= size()) {
      throw std::out_of_range("vocab: id " + std::to_string(id) + " has no symbol");
    }
    return symbols_[static_cast<std::size_t>(id - kNumReserved)];
  }

  const std::vector<std::string>& symbols() const { return symbols_; }

  static bool is_reserved(int id) { return id >= 0 && id < kNumReserved; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("vocab: cannot open " + path + " for writing");
    for (const auto& s : symbols_) out << s << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("vocab: cannot open " + path);
    std::vector<std::string> symbols;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) symbols.push_back(line);
    }
    return Vocab(std::move(symbols));
  }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

inline Vocab build_vocab(std::vector<std::string> symbols) {
  return Vocab(std::move(symbols));
}

enum class TokenRole { kReference, kPrompt, kHypothesis };

struct TokenSeq {
  std::vector<int> ids;
  TokenRole role = TokenRole::kHypothesis;

  TokenSeq() = default;
  TokenSeq(std::vector<int> ids_, TokenRole role_) : ids(std::move(ids_)), role(role_) {}

  int length() const { return static_cast<int>(ids.size()); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSeq& o) const { return ids == o.ids; }
};

// Validates the TokenSeq payload rules: no BLANK, no PAD, ids in range,
// at most one EOS and only as the final element of a hypothesis.
inline void validate_token_seq(const TokenSeq& t, const Vocab& v) {
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    const int id = t.ids[i];
    if (id < 0 || id >= v.size()) {
      throw std::invalid_argument("token seq: id " + std::to_string(id) + " out of range");
    }
    if (id == kBlank) throw std::invalid_argument("token seq: BLANK not allowed");
    if (id == kPad) throw std::invalid_argument("token seq: PAD not allowed");
    if (id == kEos) {
      if (t.role != TokenRole::kHypothesis || i + 1 != t.ids.size()) {
        throw std::invalid_argument("token seq: EOS only allowed as final hypothesis token");
      }
    }
  }
}

inline TokenSeq encode_text(const Vocab& v, const std::vector<std::string>& units,
                            TokenRole role = TokenRole::kReference) {
  TokenSeq out;
  out.role = role;
  out.ids.reserve(units.size());
  for (const auto& u : units) out.ids.push_back(v.id(u));
  return out;
}

inline std::vector<std::string> decode_text(const Vocab& v, const TokenSeq& t) {
  std::vector<std::string> out;
  out.reserve(t.ids.size());
  for (int id : t.ids) {
    if (id == kEos) break;
    out.push_back(v.symbol(id));
  }
  return out;
}

// Concatenated printable form, used in manifests and reports. Symbols are
// single characters in all shipped vocabularies, so this is reversible there.
inline std::string render_text(const Vocab& v, const TokenSeq& t) {
  std::string out;
  for (int id : t.ids) {
    if (id == kEos) break;
    out += v.symbol(id);
  }
  return out;
}

struct Utterance {
  std::string id;
  int frames = 0;
  int feat_dim = 0;
  std::vector<float> features;  // frames x feat_dim, row-major
  double frame_duration = 0.0;  // seconds per frame
  TokenSeq reference;

  double duration() const { return frames * frame_duration; }

  float feat(int f, int d) const {
    return features[static_cast<std::size_t>(f) * feat_dim + d];
  }
};

inline void validate_utterance(const Utterance& u, const Vocab& v) {
  if (u.frames < 1) throw std::invalid_argument("utterance " + u.id + ": frames < 1");
  if (u.frame_duration <= 0.0) {
    throw std::invalid_argument("utterance " + u.id + ": nonpositive frame duration");
  }
  if (u.features.size() != static_cast<std::size_t>(u.frames) * u.feat_dim) {
    throw std::invalid_argument("utterance " + u.id + ": feature size mismatch");
  }
  if (u.reference.empty()) {
    throw std::invalid_argument("utterance " + u.id + ": empty reference");
  }
  for (int id : u.reference.ids) {
    if (id == kEos) throw std::invalid_argument("utterance " + u.id + ": EOS in reference");
  }
  validate_token_seq(u.reference, v);
}

}  // namespace asrlab
