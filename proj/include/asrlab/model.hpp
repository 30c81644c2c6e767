#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "asrlab/autodiff.hpp"
#include "asrlab/core.hpp"
#include "asrlab/decoding.hpp"
#include "asrlab/matrix.hpp"
#include "asrlab/rng.hpp"
#include "asrlab/speech.hpp"
#include "asrlab/tokenizer.hpp"

namespace asrlab {

struct ModelConfig {
  int feat_dim = 8;
  int d_enc = 32;
  int enc_blocks = 2;
  int d_model = 64;
  int dec_blocks = 2;
  int heads = 4;
  int vocab_size = 0;
  int max_ctx = 256;
  double init_std = 0.08;

  void validate() const {
    if (feat_dim < 1 || d_enc < 1 || d_model < 1 || vocab_size <= kNumReserved ||
        enc_blocks < 0 || dec_blocks < 1 || heads < 1 || max_ctx < 4) {
      throw std::invalid_argument("model config: bad dimension");
    }
    if (d_model % heads != 0) {
      throw std::invalid_argument("model config: d_model not divisible by heads");
    }
  }
};

enum ParamGroup { kGroupEncoder = 0, kGroupAdapter = 1, kGroupDecoder = 2 };

struct NamedTensor {
  std::string name;
  int group = kGroupDecoder;
  Mat value;
  Mat grad;
};

class ModelParams {
 public:
  ModelConfig cfg;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    Rng rng(Rng::derive(seed, 0x70a2u));
    auto w = [&](const std::string& name, int group, int rows, int cols) {
      Mat m(rows, cols);
      for (auto& x : m.data) x = rng.gaussian() * cfg.init_std;
      p.push(name, group, std::move(m));
    };
    auto zeros = [&](const std::string& name, int group, int rows, int cols) {
      p.push(name, group, Mat(rows, cols));
    };
    auto ones = [&](const std::string& name, int group, int cols) {
      Mat m(1, cols);
      for (auto& x : m.data) x = 1.0;
      p.push(name, group, std::move(m));
    };

    w("enc.in.w", kGroupEncoder, cfg.feat_dim, cfg.d_enc);
    zeros("enc.in.b", kGroupEncoder, 1, cfg.d_enc);
    for (int i = 0; i < cfg.enc_blocks; ++i) {
      const std::string b = "enc.blk" + std::to_string(i);
      w(b + ".w1", kGroupEncoder, cfg.d_enc, 2 * cfg.d_enc);
      zeros(b + ".b1", kGroupEncoder, 1, 2 * cfg.d_enc);
      w(b + ".w2", kGroupEncoder, 2 * cfg.d_enc, cfg.d_enc);
      zeros(b + ".b2", kGroupEncoder, 1, cfg.d_enc);
    }
    w("ad.conv1.w", kGroupAdapter, cfg.d_enc, 3 * cfg.d_enc);
    zeros("ad.conv1.b", kGroupAdapter, 1, cfg.d_enc);
    w("ad.conv2.w", kGroupAdapter, cfg.d_enc, 3 * cfg.d_enc);
    zeros("ad.conv2.b", kGroupAdapter, 1, cfg.d_enc);
    w("ad.fc.w", kGroupAdapter, cfg.d_enc, cfg.d_model);
    zeros("ad.fc.b", kGroupAdapter, 1, cfg.d_model);

    w("dec.emb", kGroupDecoder, cfg.vocab_size, cfg.d_model);
    w("dec.pos", kGroupDecoder, cfg.max_ctx, cfg.d_model);
    for (int i = 0; i < cfg.dec_blocks; ++i) {
      const std::string b = "dec.blk" + std::to_string(i);
      ones(b + ".ln1.g", kGroupDecoder, cfg.d_model);
      zeros(b + ".ln1.b", kGroupDecoder, 1, cfg.d_model);
      w(b + ".wq", kGroupDecoder, cfg.d_model, cfg.d_model);
      w(b + ".wk", kGroupDecoder, cfg.d_model, cfg.d_model);
      w(b + ".wv", kGroupDecoder, cfg.d_model, cfg.d_model);
      w(b + ".wo", kGroupDecoder, cfg.d_model, cfg.d_model);
      ones(b + ".ln2.g", kGroupDecoder, cfg.d_model);
      zeros(b + ".ln2.b", kGroupDecoder, 1, cfg.d_model);
      w(b + ".ff.w1", kGroupDecoder, cfg.d_model, 4 * cfg.d_model);
      zeros(b + ".ff.b1", kGroupDecoder, 1, 4 * cfg.d_model);
      w(b + ".ff.w2", kGroupDecoder, 4 * cfg.d_model, cfg.d_model);
      zeros(b + ".ff.b2", kGroupDecoder, 1, cfg.d_model);
    }
    ones("dec.lnf.g", kGroupDecoder, cfg.d_model);
    zeros("dec.lnf.b", kGroupDecoder, 1, cfg.d_model);
    w("dec.out.w", kGroupDecoder, cfg.d_model, cfg.vocab_size);
    zeros("dec.out.b", kGroupDecoder, 1, cfg.vocab_size);
    return p;
  }

  int count() const { return static_cast<int>(tensors_.size()); }
  NamedTensor& tensor(int i) { return tensors_[static_cast<std::size_t>(i)]; }
  const NamedTensor& tensor(int i) const { return tensors_[static_cast<std::size_t>(i)]; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("params: no tensor " + name);
    return it->second;
  }

  const Mat& value(const std::string& name) const { return tensors_[index_of(name)].value; }
  Mat& value(const std::string& name) { return tensors_[index_of(name)].value; }
  Mat& grad(const std::string& name) { return tensors_[index_of(name)].grad; }

  long long param_count() const {
    long long n = 0;
    for (const auto& t : tensors_) n += static_cast<long long>(t.value.size());
    return n;
  }

  void zero_grads() {
    for (auto& t : tensors_) {
      t.grad = Mat(t.value.rows, t.value.cols);
    }
  }

  void save(const std::string& prefix) const {
    std::ofstream blob(prefix + ".bin", std::ios::binary);
    if (!blob) throw std::runtime_error("checkpoint: cannot open " + prefix + ".bin");
    std::ofstream man(prefix + ".manifest", std::ios::binary);
    if (!man) throw std::runtime_error("checkpoint: cannot open " + prefix + ".manifest");
    man << "asrlab-checkpoint 1\n";
    man << "config feat_dim=" << cfg.feat_dim << " d_enc=" << cfg.d_enc
        << " enc_blocks=" << cfg.enc_blocks << " d_model=" << cfg.d_model
        << " dec_blocks=" << cfg.dec_blocks << " heads=" << cfg.heads
        << " vocab_size=" << cfg.vocab_size << " max_ctx=" << cfg.max_ctx << "\n";
    long long offset = 0;
    for (const auto& t : tensors_) {
      man << t.name << ' ' << t.value.rows << ' ' << t.value.cols << ' ' << offset << '\n';
      std::vector<float> buf(t.value.size());
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.value.data[i]);
      blob.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
      offset += static_cast<long long>(buf.size() * sizeof(float));
    }
  }

  static ModelParams load(const std::string& prefix) {
    std::ifstream man(prefix + ".manifest", std::ios::binary);
    if (!man) throw std::runtime_error("checkpoint: missing manifest " + prefix + ".manifest");
    std::string line;
    if (!std::getline(man, line) || line != "asrlab-checkpoint 1") {
      throw std::runtime_error("checkpoint: bad manifest header in " + prefix + ".manifest");
    }
    if (!std::getline(man, line) || line.rfind("config ", 0) != 0) {
      throw std::runtime_error("checkpoint: missing config line in " + prefix + ".manifest");
    }
    ModelConfig cfg;
    {
      std::istringstream is(line.substr(7));
      std::string kv;
      while (is >> kv) {
        const auto eq = kv.find('=');
        const std::string k = kv.substr(0, eq);
        const int v = std::stoi(kv.substr(eq + 1));
        if (k == "feat_dim") cfg.feat_dim = v;
        else if (k == "d_enc") cfg.d_enc = v;
        else if (k == "enc_blocks") cfg.enc_blocks = v;
        else if (k == "d_model") cfg.d_model = v;
        else if (k == "dec_blocks") cfg.dec_blocks = v;
        else if (k == "heads") cfg.heads = v;
        else if (k == "vocab_size") cfg.vocab_size = v;
        else if (k == "max_ctx") cfg.max_ctx = v;
      }
    }
    ModelParams p = ModelParams::init(cfg, 0);
    std::ifstream blob(prefix + ".bin", std::ios::binary);
    if (!blob) throw std::runtime_error("checkpoint: missing blob " + prefix + ".bin");
    while (std::getline(man, line)) {
      if (line.empty()) continue;
      std::istringstream is(line);
      std::string name;
      int rows = 0;
      int cols = 0;
      long long offset = 0;
      if (!(is >> name >> rows >> cols >> offset)) {
        throw std::runtime_error("checkpoint: malformed manifest line: " + line);
      }
      Mat& m = p.value(name);
      if (m.rows != rows || m.cols != cols) {
        throw std::runtime_error("checkpoint: shape mismatch for tensor " + name);
      }
      blob.seekg(offset);
      std::vector<float> buf(m.size());
      if (!blob.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
        throw std::runtime_error("checkpoint: truncated tensor " + name);
      }
      for (std::size_t i = 0; i < buf.size(); ++i) m.data[i] = buf[i];
    }
    return p;
  }

 private:
  void push(std::string name, int group, Mat value) {
    NamedTensor t;
    t.name = std::move(name);
    t.group = group;
    t.grad = Mat(value.rows, value.cols);
    t.value = std::move(value);
    index_[t.name] = static_cast<int>(tensors_.size());
    tensors_.push_back(std::move(t));
  }

  std::vector<NamedTensor> tensors_;
  std::unordered_map<std::string, int> index_;
};

namespace detail {

// Gradient destination for tape parameters; null means read-only forward.
struct GradSinks {
  ModelParams* params = nullptr;
  std::vector<Mat>* buffers = nullptr;  // aligned with tensor indices
};

struct GraphBuilder {
  Tape& tape;
  const ModelParams& p;
  GradSinks sinks;

  int par(const std::string& name) {
    const int i = p.index_of(name);
    Mat* sink = nullptr;
    if (sinks.buffers) sink = &(*sinks.buffers)[static_cast<std::size_t>(i)];
    else if (sinks.params) sink = &const_cast<ModelParams&>(p).tensor(i).grad;
    return tape.param(&p.tensor(i).value, sink);
  }

  // features: frames x feat_dim leaf. Returns T_s x d_model node.
  int speech_nodes(int features) {
    int x = tape.add_row_broadcast(tape.matmul(features, par("enc.in.w")), par("enc.in.b"));
    for (int i = 0; i < p.cfg.enc_blocks; ++i) {
      const std::string b = "enc.blk" + std::to_string(i);
      int h = tape.gelu(tape.add_row_broadcast(tape.matmul(x, par(b + ".w1")), par(b + ".b1")));
      int d = tape.add_row_broadcast(tape.matmul(h, par(b + ".w2")), par(b + ".b2"));
      x = tape.add(x, d);
    }
    int c1 = tape.gelu(tape.conv1d(x, par("ad.conv1.w"), par("ad.conv1.b"), 2));
    int c2 = tape.gelu(tape.conv1d(c1, par("ad.conv2.w"), par("ad.conv2.b"), 1));
    return tape.add_row_broadcast(tape.matmul(c2, par("ad.fc.w")), par("ad.fc.b"));
  }

  // Builds the decoder over [SOP prompt EOP] ++ speech ++ [SOT text] and
  // returns the (len(text)+1) x vocab logit rows for the text positions.
  int decoder_logits(int speech_node, const TokenSeq* prompt, const std::vector<int>& text) {
    std::vector<int> pre;
    if (prompt != nullptr) {
      pre.push_back(kSop);
      pre.insert(pre.end(), prompt->ids.begin(), prompt->ids.end());
      pre.push_back(kEop);
    }
    std::vector<int> post;
    post.push_back(kSot);
    post.insert(post.end(), text.begin(), text.end());

    const int t_s = tape.val(speech_node).rows;
    const int total = static_cast<int>(pre.size()) + t_s + static_cast<int>(post.size());
    if (total > p.cfg.max_ctx) {
      throw std::invalid_argument("context length " + std::to_string(total) +
                                  " exceeds max_ctx " + std::to_string(p.cfg.max_ctx));
    }
    const int emb = par("dec.emb");
    std::vector<int> parts;
    if (!pre.empty()) parts.push_back(tape.gather_rows(emb, pre));
    parts.push_back(speech_node);
    parts.push_back(tape.gather_rows(emb, post));
    int x = tape.concat_rows(parts);

    std::vector<int> positions(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) positions[static_cast<std::size_t>(i)] = i;
    x = tape.add(x, tape.gather_rows(par("dec.pos"), positions));

    const int dh = p.cfg.d_model / p.cfg.heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int i = 0; i < p.cfg.dec_blocks; ++i) {
      const std::string b = "dec.blk" + std::to_string(i);
      int ln = tape.layernorm(x, par(b + ".ln1.g"), par(b + ".ln1.b"));
      int q = tape.matmul(ln, par(b + ".wq"));
      int k = tape.matmul(ln, par(b + ".wk"));
      int v = tape.matmul(ln, par(b + ".wv"));
      std::vector<int> heads;
      for (int h = 0; h < p.cfg.heads; ++h) {
        int qh = tape.slice_cols(q, h * dh, dh);
        int kh = tape.slice_cols(k, h * dh, dh);
        int vh = tape.slice_cols(v, h * dh, dh);
        int scores = tape.scale(tape.matmul_nt(qh, kh), att_scale);
        int probs = tape.softmax_causal(scores);
        heads.push_back(tape.matmul(probs, vh));
      }
      int att = tape.matmul(tape.concat_cols(heads), par(b + ".wo"));
      x = tape.add(x, att);
      int ln2 = tape.layernorm(x, par(b + ".ln2.g"), par(b + ".ln2.b"));
      int h1 = tape.gelu(
          tape.add_row_broadcast(tape.matmul(ln2, par(b + ".ff.w1")), par(b + ".ff.b1")));
      int h2 = tape.add_row_broadcast(tape.matmul(h1, par(b + ".ff.w2")), par(b + ".ff.b2"));
      x = tape.add(x, h2);
    }
    int lnf = tape.layernorm(x, par("dec.lnf.g"), par("dec.lnf.b"));
    int logits = tape.add_row_broadcast(tape.matmul(lnf, par("dec.out.w")), par("dec.out.b"));

    const int text_rows = static_cast<int>(text.size()) + 1;
    return tape.slice_rows(logits, total - text_rows, text_rows);
  }
};

inline Mat features_to_mat(const Utterance& u, int feat_dim) {
  if (u.feat_dim != feat_dim) {
    throw std::invalid_argument("encode_speech: expected feature dim " +
                                std::to_string(feat_dim) + ", got " +
                                std::to_string(u.feat_dim));
  }
  Mat m(u.frames, u.feat_dim);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = u.features[i];
  return m;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

inline SpeechRep encode_speech(const ModelParams& p, const Utterance& u) {
  const Mat feats = detail::features_to_mat(u, p.cfg.feat_dim);
  Tape tape;
  detail::GraphBuilder g{tape, p, {}};
  const int node = g.speech_nodes(tape.input(&feats));
  SpeechRep rep;
  rep.vectors = tape.val(node);
  return rep;
}

// Full-context logit rows for the text slot (len(text)+1 rows), with the
// speech representation supplied pre-encoded.
inline Mat logits_all(const ModelParams& p, const TokenSeq* prompt, const SpeechRep& speech,
                      const std::vector<int>& text) {
  Tape tape;
  detail::GraphBuilder g{tape, p, {}};
  const int sp = tape.input(&speech.vectors);
  const int rows = g.decoder_logits(sp, prompt, text);
  return tape.val(rows);
}

namespace detail {

// End-to-end loss graph for one utterance: encoder + adapter + decoder +
// cross entropy over the reference tokens plus the terminal EOS.
inline double utterance_loss(const ModelParams& p, const Utterance& u, const TokenSeq* prompt,
                             GradSinks sinks, double grad_scale) {
  if (u.reference.empty()) throw std::invalid_argument("loss: empty reference");
  const Mat feats = features_to_mat(u, p.cfg.feat_dim);
  Tape tape;
  GraphBuilder g{tape, p, sinks};
  const int sp = g.speech_nodes(tape.input(&feats));
  const int rows = g.decoder_logits(sp, prompt, u.reference.ids);
  std::vector<int> targets = u.reference.ids;
  targets.push_back(kEos);
  int loss = tape.cross_entropy(rows, std::move(targets));
  if (grad_scale != 1.0) loss = tape.scale(loss, grad_scale);
  const double out = tape.scalar(loss) / (grad_scale == 1.0 ? 1.0 : grad_scale);
  if (sinks.params != nullptr || sinks.buffers != nullptr) tape.backward(loss);
  return out;
}

}  // namespace detail

inline double loss_ce(const ModelParams& p, const Utterance& u) {
  return detail::utterance_loss(p, u, nullptr, {}, 1.0);
}

inline double loss_ce_prompt(const ModelParams& p, const Utterance& u, const TokenSeq& y_prompt) {
  return detail::utterance_loss(p, u, &y_prompt, {}, 1.0);
}

// Analytic gradient of one loss term, accumulated into the tensor grads.
inline double grad_loss_ce(ModelParams& p, const Utterance& u) {
  detail::GradSinks sinks;
  sinks.params = &p;
  return detail::utterance_loss(p, u, nullptr, sinks, 1.0);
}

inline double grad_loss_ce_prompt(ModelParams& p, const Utterance& u, const TokenSeq& y_prompt) {
  detail::GradSinks sinks;
  sinks.params = &p;
  return detail::utterance_loss(p, u, &y_prompt, sinks, 1.0);
}

// Per-(seed, step, utterance-id) uniform draw deciding prompt use (p <= lambda).
inline bool draws_prompt(double lambda, std::uint64_t seed, std::uint64_t step,
                         const std::string& utt_id) {
  Rng rng(Rng::derive(Rng::derive(seed, step), detail::fnv1a(utt_id)));
  return rng.uniform() <= lambda;
}

struct MixedBatchLoss {
  double loss = 0.0;                   // batch mean
  std::vector<bool> used_prompt;       // selection mask, batch order
};

inline MixedBatchLoss mixed_batch_loss(const ModelParams& p,
                                       const std::vector<const Utterance*>& batch,
                                       const std::vector<const TokenSeq*>& prompts,
                                       double lambda, std::uint64_t seed,
                                       std::uint64_t step = 0) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("lambda outside [0,1]");
  if (batch.size() != prompts.size()) {
    throw std::invalid_argument("mixed_batch_loss: batch/prompt size mismatch");
  }
  MixedBatchLoss out;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool use_prompt = draws_prompt(lambda, seed, step, batch[i]->id);
    out.used_prompt.push_back(use_prompt);
    total += use_prompt ? loss_ce_prompt(p, *batch[i], *prompts[i]) : loss_ce(p, *batch[i]);
  }
  out.loss = total / static_cast<double>(batch.size());
  return out;
}

struct TrainConfig {
  double lambda = 0.5;
  double learning_rate = 1e-3;
  int batch_size = 8;
  int steps = 1000;
  std::uint64_t seed = 0;
  int threads = 1;
  bool train_encoder = true;
  bool train_adapter = true;
  bool train_decoder = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("train: lambda outside [0,1]");
    if (learning_rate <= 0.0) throw std::invalid_argument("train: nonpositive learning rate");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size < 1");
    if (steps < 0) throw std::invalid_argument("train: negative steps");
    if (threads < 1) throw std::invalid_argument("train: threads < 1");
  }
};

struct TrainResult {
  std::vector<double> loss_curve;  // batch mean per step
};

// Adam over the mixed prompt/no-prompt objective. Deterministic given
// cfg.seed, independent of cfg.threads (per-slot gradient buffers are
// reduced in batch order).
inline TrainResult train(ModelParams& p, const std::vector<Utterance>& corpus,
                         const std::vector<TokenSeq>& prompts, const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  if (prompts.size() != corpus.size()) {
    throw std::invalid_argument("train: corpus/prompt size mismatch");
  }
  TrainResult result;
  if (cfg.steps == 0) return result;

  const int nt = p.count();
  std::vector<Mat> m1(static_cast<std::size_t>(nt));
  std::vector<Mat> m2(static_cast<std::size_t>(nt));
  for (int i = 0; i < nt; ++i) {
    m1[static_cast<std::size_t>(i)] = Mat(p.tensor(i).value.rows, p.tensor(i).value.cols);
    m2[static_cast<std::size_t>(i)] = Mat(p.tensor(i).value.rows, p.tensor(i).value.cols);
  }
  auto trainable = [&](int i) {
    switch (p.tensor(i).group) {
      case kGroupEncoder: return cfg.train_encoder;
      case kGroupAdapter: return cfg.train_adapter;
      default: return cfg.train_decoder;
    }
  };

  // per-slot gradient buffers, reused across steps
  std::vector<std::vector<Mat>> slot_grads(static_cast<std::size_t>(cfg.batch_size));
  for (auto& bufs : slot_grads) {
    bufs.resize(static_cast<std::size_t>(nt));
    for (int i = 0; i < nt; ++i) {
      bufs[static_cast<std::size_t>(i)] = Mat(p.tensor(i).value.rows, p.tensor(i).value.cols);
    }
  }

  Rng batch_rng(Rng::derive(cfg.seed, 0xba7cu));
  const double inv_b = 1.0 / cfg.batch_size;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> picks(static_cast<std::size_t>(cfg.batch_size));
    for (auto& idx : picks) {
      idx = static_cast<int>(batch_rng.below(static_cast<std::uint64_t>(corpus.size())));
    }

    std::vector<double> slot_loss(static_cast<std::size_t>(cfg.batch_size), 0.0);
    std::atomic<int> next_slot{0};
    auto worker = [&] {
      while (true) {
        const int s = next_slot.fetch_add(1);
        if (s >= cfg.batch_size) break;
        auto& bufs = slot_grads[static_cast<std::size_t>(s)];
        for (auto& b : bufs) std::fill(b.data.begin(), b.data.end(), 0.0);
        const Utterance& u = corpus[static_cast<std::size_t>(picks[static_cast<std::size_t>(s)])];
        const TokenSeq& pr = prompts[static_cast<std::size_t>(picks[static_cast<std::size_t>(s)])];
        const bool use_prompt =
            draws_prompt(cfg.lambda, cfg.seed, static_cast<std::uint64_t>(step), u.id);
        detail::GradSinks sinks;
        sinks.buffers = &bufs;
        slot_loss[static_cast<std::size_t>(s)] =
            detail::utterance_loss(p, u, use_prompt ? &pr : nullptr, sinks, inv_b);
      }
    };
    const int nworkers = std::min(cfg.threads, cfg.batch_size);
    if (nworkers == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < nworkers; ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }

    double batch_loss = 0.0;
    for (double l : slot_loss) batch_loss += l;
    batch_loss *= inv_b;
    if (!std::isfinite(batch_loss)) {
      throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
    }
    result.loss_curve.push_back(batch_loss);

    // reduce slot gradients in slot order, then Adam
    p.zero_grads();
    for (int s = 0; s < cfg.batch_size; ++s) {
      for (int i = 0; i < nt; ++i) {
        Mat& dst = p.tensor(i).grad;
        const Mat& src = slot_grads[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < dst.size(); ++k) dst.data[k] += src.data[k];
      }
    }
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step + 1);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step + 1);
    for (int i = 0; i < nt; ++i) {
      if (!trainable(i)) continue;
      Mat& v = p.tensor(i).value;
      const Mat& g = p.tensor(i).grad;
      Mat& mm = m1[static_cast<std::size_t>(i)];
      Mat& vv = m2[static_cast<std::size_t>(i)];
      for (std::size_t k = 0; k < v.size(); ++k) {
        mm.data[k] = cfg.adam_beta1 * mm.data[k] + (1.0 - cfg.adam_beta1) * g.data[k];
        vv.data[k] = cfg.adam_beta2 * vv.data[k] + (1.0 - cfg.adam_beta2) * g.data[k] * g.data[k];
        const double mhat = mm.data[k] / bc1;
        const double vhat = vv.data[k] / bc2;
        v.data[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      }
    }
  }
  return result;
}

// Incremental decoder-only forward with a per-layer KV cache. The prompt and
// speech prefix is processed at construction; each push() costs one position.
class DecoderSession {
 public:
  DecoderSession(const ModelParams& p, const TokenSeq* prompt, const SpeechRep& speech)
      : p_(p), dh_(p.cfg.d_model / p.cfg.heads) {
    keys_.resize(static_cast<std::size_t>(p.cfg.dec_blocks));
    vals_.resize(static_cast<std::size_t>(p.cfg.dec_blocks));
    for (int l = 0; l < p.cfg.dec_blocks; ++l) {
      keys_[static_cast<std::size_t>(l)] = Mat(0, p.cfg.d_model);
      vals_[static_cast<std::size_t>(l)] = Mat(0, p.cfg.d_model);
    }
    if (prompt != nullptr) {
      feed_token(kSop);
      for (int id : prompt->ids) feed_token(id);
      feed_token(kEop);
    }
    for (int t = 0; t < speech.length(); ++t) {
      std::vector<double> x(speech.vectors.row(t), speech.vectors.row(t) + speech.dim());
      feed_embedding(x);
    }
    feed_token(kSot);
  }

  // logits predicting the token after everything fed so far
  const std::vector<double>& logits() const { return last_logits_; }

  void push(int token) { feed_token(token); }

  int position() const { return pos_; }

 private:
  void feed_token(int id) {
    const Mat& emb = p_.value("dec.emb");
    std::vector<double> x(emb.row(id), emb.row(id) + emb.cols);
    feed_embedding(x);
  }

  void feed_embedding(std::vector<double> x) {
    const int d = p_.cfg.d_model;
    if (pos_ >= p_.cfg.max_ctx) {
      throw std::invalid_argument("context length exceeds max_ctx " +
                                  std::to_string(p_.cfg.max_ctx));
    }
    const Mat& pos_table = p_.value("dec.pos");
    for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += pos_table.at(pos_, c);

    for (int l = 0; l < p_.cfg.dec_blocks; ++l) {
      const std::string b = "dec.blk" + std::to_string(l);
      std::vector<double> ln = layernorm_row(x, p_.value(b + ".ln1.g"), p_.value(b + ".ln1.b"));
      std::vector<double> q = matvec(ln, p_.value(b + ".wq"));
      std::vector<double> k = matvec(ln, p_.value(b + ".wk"));
      std::vector<double> v = matvec(ln, p_.value(b + ".wv"));
      Mat& kc = keys_[static_cast<std::size_t>(l)];
      Mat& vc = vals_[static_cast<std::size_t>(l)];
      append_row(kc, k);
      append_row(vc, v);

      std::vector<double> att(static_cast<std::size_t>(d), 0.0);
      const double scale = 1.0 / std::sqrt(static_cast<double>(dh_));
      const int T = kc.rows;
      std::vector<double> scores(static_cast<std::size_t>(T));
      for (int h = 0; h < p_.cfg.heads; ++h) {
        const int off = h * dh_;
        for (int t = 0; t < T; ++t) {
          double s = 0.0;
          const double* kr = kc.row(t) + off;
          for (int c = 0; c < dh_; ++c) s += q[static_cast<std::size_t>(off + c)] * kr[c];
          scores[static_cast<std::size_t>(t)] = s * scale;
        }
        double mx = scores[0];
        for (int t = 1; t < T; ++t) mx = std::max(mx, scores[static_cast<std::size_t>(t)]);
        double z = 0.0;
        for (int t = 0; t < T; ++t) {
          scores[static_cast<std::size_t>(t)] = std::exp(scores[static_cast<std::size_t>(t)] - mx);
          z += scores[static_cast<std::size_t>(t)];
        }
        for (int t = 0; t < T; ++t) {
          const double w = scores[static_cast<std::size_t>(t)] / z;
          const double* vr = vc.row(t) + off;
          for (int c = 0; c < dh_; ++c) att[static_cast<std::size_t>(off + c)] += w * vr[c];
        }
      }
      std::vector<double> proj = matvec(att, p_.value(b + ".wo"));
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += proj[static_cast<std::size_t>(c)];

      std::vector<double> ln2 = layernorm_row(x, p_.value(b + ".ln2.g"), p_.value(b + ".ln2.b"));
      std::vector<double> h1 = matvec(ln2, p_.value(b + ".ff.w1"));
      add_bias(h1, p_.value(b + ".ff.b1"));
      for (auto& e : h1) e = 0.5 * e * (1.0 + std::erf(e * 0.70710678118654752440));
      std::vector<double> h2 = matvec(h1, p_.value(b + ".ff.w2"));
      add_bias(h2, p_.value(b + ".ff.b2"));
      for (int c = 0; c < d; ++c) x[static_cast<std::size_t>(c)] += h2[static_cast<std::size_t>(c)];
    }
    std::vector<double> lnf = layernorm_row(x, p_.value("dec.lnf.g"), p_.value("dec.lnf.b"));
    last_logits_ = matvec(lnf, p_.value("dec.out.w"));
    add_bias(last_logits_, p_.value("dec.out.b"));
    ++pos_;
  }

  static std::vector<double> matvec(const std::vector<double>& x, const Mat& w) {
    std::vector<double> y(static_cast<std::size_t>(w.cols), 0.0);
    for (int k = 0; k < w.rows; ++k) {
      const double xv = x[static_cast<std::size_t>(k)];
      if (xv == 0.0) continue;
      const double* wr = w.row(k);
      for (int j = 0; j < w.cols; ++j) y[static_cast<std::size_t>(j)] += xv * wr[j];
    }
    return y;
  }

  static void add_bias(std::vector<double>& x, const Mat& b) {
    for (int c = 0; c < b.cols; ++c) x[static_cast<std::size_t>(c)] += b.at(0, c);
  }

  static std::vector<double> layernorm_row(const std::vector<double>& x, const Mat& g,
                                           const Mat& b, double eps = 1e-5) {
    const int C = static_cast<int>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= C;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= C;
    const double rstd = 1.0 / std::sqrt(var + eps);
    std::vector<double> y(x.size());
    for (int c = 0; c < C; ++c) {
      y[static_cast<std::size_t>(c)] = (x[static_cast<std::size_t>(c)] - mean) * rstd * g.at(0, c) + b.at(0, c);
    }
    return y;
  }

  static void append_row(Mat& m, const std::vector<double>& row) {
    m.data.insert(m.data.end(), row.begin(), row.end());
    ++m.rows;
  }

  const ModelParams& p_;
  int dh_;
  int pos_ = 0;
  std::vector<Mat> keys_;
  std::vector<Mat> vals_;
  std::vector<double> last_logits_;
};

// next_logits contract from the module surface: one incremental position,
// equal to the last row of logits_all on the same context.
inline std::vector<double> next_logits(DecoderSession& session, int new_token) {
  if (new_token >= 0) session.push(new_token);
  return session.logits();
}

// SeqModel adapter so the trained model plugs into the decoders.
class TrainedSeqModel final : public SeqModel {
 public:
  explicit TrainedSeqModel(const ModelParams& p) : p_(p) {}

  int vocab_size() const override { return p_.cfg.vocab_size; }

  Mat logits_all(const DecodeContext& ctx) const override {
    if (ctx.speech == nullptr) {
      throw std::invalid_argument("trained model: decode context has no speech");
    }
    return asrlab::logits_all(p_, ctx.prompt, *ctx.speech, ctx.text);
  }

  std::unique_ptr<ArCursor> start(const TokenSeq* prompt,
                                  const SpeechRep* speech) const override {
    if (speech == nullptr) {
      throw std::invalid_argument("trained model: decode context has no speech");
    }
    return std::make_unique<Cursor>(p_, prompt, *speech);
  }

 private:
  class Cursor final : public ArCursor {
   public:
    Cursor(const ModelParams& p, const TokenSeq* prompt, const SpeechRep& speech)
        : session_(p, prompt, speech) {}
    std::vector<double> next_logits() override { return session_.logits(); }
    void push(int token) override { session_.push(token); }

   private:
    DecoderSession session_;
  };

  const ModelParams& p_;
};

}  // namespace asrlab
