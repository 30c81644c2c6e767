#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "asrlab/core.hpp"
#include "asrlab/matrix.hpp"
#include "asrlab/rng.hpp"

namespace asrlab {

struct EmissionLattice {
  Mat posteriors;               // frames x vocab, row-stochastic, col 0 = BLANK
  double frame_duration = 0.0;  // seconds

  int frames() const { return posteriors.rows; }
  int vocab() const { return posteriors.cols; }
};

inline void validate_lattice(const EmissionLattice& l) {
  if (l.frames() < 1 || l.vocab() < 2) {
    throw std::invalid_argument("lattice: degenerate shape");
  }
  for (int t = 0; t < l.frames(); ++t) {
    double sum = 0.0;
    for (int c = 0; c < l.vocab(); ++c) {
      const double p = l.posteriors.at(t, c);
      if (p < 0.0) throw std::invalid_argument("lattice: negative posterior");
      sum += p;
    }
    if (sum < 1.0 - 1e-6 || sum > 1.0 + 1e-6) {
      throw std::invalid_argument("lattice: row " + std::to_string(t) + " not stochastic");
    }
  }
}

struct CorruptionProfile {
  double sub_rate = 0.0;
  double ins_rate = 0.0;
  double del_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto in01 = [](double r) { return r >= 0.0 && r <= 1.0; };
    if (!in01(sub_rate) || !in01(ins_rate) || !in01(del_rate)) {
      throw std::invalid_argument("corruption profile: rate outside [0,1]");
    }
    if (sub_rate + del_rate > 1.0) {
      throw std::invalid_argument("corruption profile: sub_rate + del_rate > 1");
    }
  }
};

// Per-frame argmax with ties broken toward the lowest id, merge adjacent
// duplicates, then delete BLANK.
inline TokenSeq ctc_greedy_collapse(const EmissionLattice& l) {
  TokenSeq out;
  out.role = TokenRole::kPrompt;
  int prev = -1;
  for (int t = 0; t < l.frames(); ++t) {
    const double* row = l.posteriors.row(t);
    int best = 0;
    for (int c = 1; c < l.vocab(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best != prev && best != kBlank) out.ids.push_back(best);
    prev = best;
  }
  return out;
}

// Synthetic emission lattice whose zero-noise argmax path collapses exactly
// to the reference. Tokens sit on dedicated frame segments with BLANK frames
// between and around them; noise_temp perturbs rows multiplicatively.
inline EmissionLattice synth_emissions(const Utterance& u, const Vocab& v, double peak,
                                       double noise_temp, std::uint64_t rng_seed) {
  const int vocab = v.size();
  const int frames = u.frames;
  const int len = u.reference.length();
  if (peak <= 1.0 / vocab || peak > 1.0) {
    throw std::invalid_argument("synth_emissions: peak must be in (1/vocab, 1]");
  }
  if (noise_temp < 0.0) throw std::invalid_argument("synth_emissions: negative noise_temp");
  const int min_frames = 2 * len + 1;
  if (frames < min_frames) {
    throw std::invalid_argument("synth_emissions: reference needs at least " +
                                std::to_string(min_frames) + " frames, utterance has " +
                                std::to_string(frames));
  }

  // Base path: B t0 B t1 ... t_{L-1} B, then spread the surplus frames over
  // the token segments round-robin (stretching a token keeps the collapse).
  std::vector<int> seg_len(static_cast<std::size_t>(len), 1);
  int surplus = frames - min_frames;
  for (int i = 0; surplus > 0; i = (i + 1) % (len > 0 ? len : 1)) {
    if (len == 0) break;
    ++seg_len[i];
    --surplus;
  }
  std::vector<int> path;
  path.reserve(frames);
  path.push_back(kBlank);
  for (int i = 0; i < len; ++i) {
    for (int k = 0; k < seg_len[i]; ++k) path.push_back(u.reference.ids[i]);
    path.push_back(kBlank);
  }
  while (static_cast<int>(path.size()) < frames) path.push_back(kBlank);

  EmissionLattice lat;
  lat.frame_duration = u.frame_duration;
  lat.posteriors = Mat(frames, vocab);
  Rng rng(Rng::derive(rng_seed, 0x1a77u));
  const double rest = (1.0 - peak) / (vocab - 1);
  for (int t = 0; t < frames; ++t) {
    double* row = lat.posteriors.row(t);
    double sum = 0.0;
    for (int c = 0; c < vocab; ++c) {
      double p = (c == path[static_cast<std::size_t>(t)]) ? peak : rest;
      if (noise_temp > 0.0) p *= std::exp(noise_temp * rng.gaussian());
      row[c] = p;
      sum += p;
    }
    for (int c = 0; c < vocab; ++c) row[c] /= sum;
  }
  return lat;
}

// Controllable error injection: per position delete or substitute, then
// insert after it. Deterministic given p.seed.
inline TokenSeq oracle_corrupt(const TokenSeq& ref, const CorruptionProfile& p, const Vocab& v) {
  p.validate();
  for (int id : ref.ids) {
    if (id == kEos) throw std::invalid_argument("oracle_corrupt: EOS in reference");
  }
  Rng rng(Rng::derive(p.seed, 0xc0c0u));
  TokenSeq out;
  out.role = TokenRole::kPrompt;
  auto random_symbol = [&](int exclude) {
    // uniform over symbols, or over the other V-1 symbols when excluding
    if (exclude >= kNumReserved && v.num_symbols() == 1) return exclude;
    if (exclude < kNumReserved) {
      return kNumReserved +
             static_cast<int>(rng.below(static_cast<std::uint64_t>(v.num_symbols())));
    }
    int idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.num_symbols() - 1)));
    if (idx >= exclude - kNumReserved) ++idx;
    return kNumReserved + idx;
  };
  for (int id : ref.ids) {
    const double u = rng.uniform();
    if (u < p.del_rate) {
      // dropped
    } else if (u < p.del_rate + p.sub_rate) {
      out.ids.push_back(random_symbol(id));
    } else {
      out.ids.push_back(id);
    }
    if (rng.uniform() < p.ins_rate) {
      out.ids.push_back(random_symbol(-1));
    }
  }
  return out;
}

enum class TokenizerMode { kCtc, kOracle };

struct TokenizerParams {
  TokenizerMode mode = TokenizerMode::kOracle;
  // ctc mode
  double peak = 0.9;
  double noise_temp = 0.0;
  std::uint64_t seed = 0;
  // oracle mode
  CorruptionProfile profile;
};

inline TokenSeq tokenize(const Utterance& u, const Vocab& v, const TokenizerParams& params) {
  if (params.mode == TokenizerMode::kCtc) {
    const auto lat = synth_emissions(u, v, params.peak, params.noise_temp, params.seed);
    return ctc_greedy_collapse(lat);
  }
  return oracle_corrupt(u.reference, params.profile, v);
}

constexpr std::uint32_t kLatticeMagic = 0x4c544143u;  // "CATL"

inline void dump_lattice(const EmissionLattice& l, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("lattice: cannot open " + path + " for writing");
  const std::uint32_t header[4] = {
      kLatticeMagic,
      static_cast<std::uint32_t>(l.frames()),
      static_cast<std::uint32_t>(l.vocab()),
      static_cast<std::uint32_t>(l.frame_duration * 1e6 + 0.5),
  };
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> buf(l.posteriors.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(l.posteriors.data[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline EmissionLattice load_lattice(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("lattice: cannot open " + path);
  std::uint32_t header[4];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) {
    throw std::runtime_error("lattice: truncated header in " + path);
  }
  if (header[0] != kLatticeMagic) throw std::runtime_error("lattice: bad magic in " + path);
  EmissionLattice l;
  l.posteriors = Mat(static_cast<int>(header[1]), static_cast<int>(header[2]));
  l.frame_duration = header[3] * 1e-6;
  std::vector<float> buf(l.posteriors.data.size());
  if (!in.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
    throw std::runtime_error("lattice: truncated payload in " + path);
  }
  for (std::size_t i = 0; i < buf.size(); ++i) l.posteriors.data[i] = buf[i];
  return l;
}

}  // namespace asrlab
