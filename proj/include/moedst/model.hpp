#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "moedst/autodiff.hpp"
#include "moedst/tensor.hpp"
#include "moedst/vocab.hpp"

namespace moedst {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 128;
  int adapter_bottleneck_dim = 16;
  int max_seq_len = 256;

  void validate() const {
    auto positive = {vocab_size, d_model,          n_heads,
                     n_enc_layers, n_dec_layers,   d_ff,
                     adapter_bottleneck_dim,       max_seq_len};
    for (int v : positive)
      if (v <= 0) throw std::invalid_argument("model config: all fields must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    if (adapter_bottleneck_dim >= d_model)
      throw std::invalid_argument("model config: adapter bottleneck must be smaller than d_model");
  }

  int head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

using ParamMap = std::map<std::string, Tensor>;

inline int64_t param_count(const ParamMap& params) {
  int64_t n = 0;
  for (auto& [name, t] : params) n += t.numel();
  return n;
}

inline uint64_t params_digest(const ParamMap& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (auto& [name, t] : params) {
    h = fnv1a64(name.data(), name.size(), h);
    h = tensor_digest(t, h);
  }
  return h;
}

// Shared frozen parameters. Nothing here changes once pretraining finishes;
// expert training asserts the digest stays equal.
struct BackboneParams {
  ModelConfig config;
  ParamMap tensors;

  uint64_t digest() const { return params_digest(tensors); }
  int64_t size() const { return param_count(tensors); }
};

// Per-expert bottleneck parameters. Every adapter built from one config has
// the identical ordered (name, shape) list, which weighted merging requires.
struct AdapterParams {
  ModelConfig config;
  ParamMap tensors;

  uint64_t digest() const { return params_digest(tensors); }
  int64_t size() const { return param_count(tensors); }

  std::vector<std::pair<std::string, std::vector<int>>> shape_signature() const {
    std::vector<std::pair<std::string, std::vector<int>>> sig;
    sig.reserve(tensors.size());
    for (auto& [name, t] : tensors) sig.emplace_back(name, t.shape);
    return sig;
  }
};

inline bool shape_congruent(const AdapterParams& a, const AdapterParams& b) {
  return a.shape_signature() == b.shape_signature();
}

namespace detail {

inline void add_linear(ParamMap& m, const std::string& prefix, int in, int out, Rng& rng,
                       double stddev) {
  m[prefix + ".w"] = Tensor::randn({in, out}, stddev, rng);
  m[prefix + ".b"] = Tensor({out});
}

inline void add_layer_norm(ParamMap& m, const std::string& prefix, int d) {
  m[prefix + ".g"] = Tensor::full({d}, 1.0);
  m[prefix + ".b"] = Tensor({d});
}

inline void add_attention(ParamMap& m, const std::string& prefix, int d, Rng& rng, double stddev) {
  for (const char* part : {"wq", "wk", "wv", "wo"})
    m[prefix + "." + part] = Tensor::randn({d, d}, stddev, rng);
  for (const char* part : {"bq", "bk", "bv", "bo"}) m[prefix + "." + part] = Tensor({d});
}

inline std::vector<std::string> adapter_points(const ModelConfig& cfg) {
  std::vector<std::string> points;
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    points.push_back("enc" + std::to_string(i) + ".attn");
    points.push_back("enc" + std::to_string(i) + ".ff");
  }
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    points.push_back("dec" + std::to_string(i) + ".self");
    points.push_back("dec" + std::to_string(i) + ".cross");
    points.push_back("dec" + std::to_string(i) + ".ff");
  }
  return points;
}

}  // namespace detail

inline constexpr double kInitStd = 0.02;

inline BackboneParams init_backbone(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  BackboneParams bb;
  bb.config = cfg;
  ParamMap& m = bb.tensors;
  // token embeddings at 1/sqrt(d) so the tied output head starts with
  // unit-scale logits; positions stay quiet so content dominates attention
  double embed_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  m["embed.tok"] = Tensor::randn({cfg.vocab_size, cfg.d_model}, embed_std, rng);
  m["embed.pos_enc"] = Tensor::randn({cfg.max_seq_len, cfg.d_model}, kInitStd, rng);
  m["embed.pos_dec"] = Tensor::randn({cfg.max_seq_len, cfg.d_model}, kInitStd, rng);
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    std::string p = "enc" + std::to_string(i);
    detail::add_layer_norm(m, p + ".ln1", cfg.d_model);
    detail::add_attention(m, p + ".attn", cfg.d_model, rng, kInitStd);
    detail::add_layer_norm(m, p + ".ln2", cfg.d_model);
    detail::add_linear(m, p + ".ff.in", cfg.d_model, cfg.d_ff, rng, kInitStd);
    detail::add_linear(m, p + ".ff.out", cfg.d_ff, cfg.d_model, rng, kInitStd);
  }
  detail::add_layer_norm(m, "enc.ln_final", cfg.d_model);
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    std::string p = "dec" + std::to_string(i);
    detail::add_layer_norm(m, p + ".ln1", cfg.d_model);
    detail::add_attention(m, p + ".self", cfg.d_model, rng, kInitStd);
    detail::add_layer_norm(m, p + ".ln2", cfg.d_model);
    detail::add_attention(m, p + ".cross", cfg.d_model, rng, kInitStd);
    detail::add_layer_norm(m, p + ".ln3", cfg.d_model);
    detail::add_linear(m, p + ".ff.in", cfg.d_model, cfg.d_ff, rng, kInitStd);
    detail::add_linear(m, p + ".ff.out", cfg.d_ff, cfg.d_model, rng, kInitStd);
  }
  detail::add_layer_norm(m, "dec.ln_final", cfg.d_model);
  return bb;
}

// Up-projections start at zero, so a fresh adapter is a residual identity.
inline AdapterParams init_adapter(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  AdapterParams ad;
  ad.config = cfg;
  for (const auto& point : detail::adapter_points(cfg)) {
    detail::add_layer_norm(ad.tensors, point + ".ln", cfg.d_model);
    ad.tensors[point + ".down.w"] =
        Tensor::randn({cfg.d_model, cfg.adapter_bottleneck_dim}, kInitStd, rng);
    ad.tensors[point + ".down.b"] = Tensor({cfg.adapter_bottleneck_dim});
    ad.tensors[point + ".up.w"] = Tensor({cfg.adapter_bottleneck_dim, cfg.d_model});
    ad.tensors[point + ".up.b"] = Tensor({cfg.d_model});
  }
  return ad;
}

// Builds the full forward graph for one example on a tape. Parameters are
// bound lazily as tape leaves; whether they participate in differentiation is
// controlled per parameter set.
class ModelGraph {
 public:
  ModelGraph(Tape& tape, const BackboneParams& backbone, const AdapterParams* adapter,
             bool train_backbone, bool train_adapter)
      : tape_(tape),
        backbone_(backbone),
        adapter_(adapter),
        train_backbone_(train_backbone),
        train_adapter_(train_adapter) {
    if (adapter_ && !(adapter_->config == backbone_.config))
      throw std::invalid_argument("model: adapter and backbone configs differ");
  }

  const ModelConfig& config() const { return backbone_.config; }

  // Encoder over the context tokens; input longer than max_seq_len keeps the
  // most recent tokens. Returns the [len x d_model] hidden-state node.
  NodeId encode(std::vector<int> ids) {
    if (ids.empty()) throw std::invalid_argument("encode: empty input");
    const ModelConfig& cfg = config();
    if (static_cast<int>(ids.size()) > cfg.max_seq_len)
      ids.erase(ids.begin(), ids.end() - cfg.max_seq_len);
    int len = static_cast<int>(ids.size());
    NodeId x = tape_.add(tape_.embedding(bb("embed.tok"), ids),
                         tape_.embedding(bb("embed.pos_enc"), iota(len)));
    for (int i = 0; i < cfg.n_enc_layers; ++i) {
      std::string p = "enc" + std::to_string(i);
      NodeId normed = ln(x, p + ".ln1");
      NodeId att = attention(p + ".attn", normed, normed, nullptr);
      att = adapter_block(p + ".attn", att);
      x = tape_.add(x, att);
      NodeId ff = feed_forward(p, ln(x, p + ".ln2"));
      ff = adapter_block(p + ".ff", ff);
      x = tape_.add(x, ff);
    }
    return ln(x, "enc.ln_final");
  }

  // Decoder over a target prefix against fixed encoder states. Returns the
  // [len x vocab] logits node.
  NodeId decode_logits(const std::vector<int>& prefix_ids, NodeId enc_states) {
    if (prefix_ids.empty()) throw std::invalid_argument("decode: empty prefix");
    const ModelConfig& cfg = config();
    if (static_cast<int>(prefix_ids.size()) > cfg.max_seq_len)
      throw std::invalid_argument("decode: prefix longer than max_seq_len");
    int len = static_cast<int>(prefix_ids.size());
    NodeId x = tape_.add(tape_.embedding(bb("embed.tok"), prefix_ids),
                         tape_.embedding(bb("embed.pos_dec"), iota(len)));
    Tensor causal({len, len});
    for (int i = 0; i < len; ++i)
      for (int j = i + 1; j < len; ++j) causal.at(i, j) = kMaskValue;
    NodeId mask = tape_.constant(causal);
    for (int i = 0; i < cfg.n_dec_layers; ++i) {
      std::string p = "dec" + std::to_string(i);
      NodeId normed = ln(x, p + ".ln1");
      NodeId att = attention(p + ".self", normed, normed, &mask);
      att = adapter_block(p + ".self", att);
      x = tape_.add(x, att);
      NodeId cross = attention(p + ".cross", ln(x, p + ".ln2"), enc_states, nullptr);
      cross = adapter_block(p + ".cross", cross);
      x = tape_.add(x, cross);
      NodeId ff = feed_forward(p, ln(x, p + ".ln3"));
      ff = adapter_block(p + ".ff", ff);
      x = tape_.add(x, ff);
    }
    x = ln(x, "dec.ln_final");
    // output head tied to the token embedding, T5-style
    return tape_.matmul_nt(x, bb("embed.tok"));
  }

  // Sequence loss for one (input, target) example: encode, decode the
  // BOS-shifted target, cross-entropy against target tokens plus <eos>.
  NodeId example_loss(const std::vector<int>& input_ids, const std::vector<int>& target_ids) {
    std::vector<int> prefix = {kBos};
    prefix.insert(prefix.end(), target_ids.begin(), target_ids.end());
    std::vector<int> labels = target_ids;
    labels.push_back(kEos);
    NodeId enc = encode(input_ids);
    NodeId logits = decode_logits(prefix, enc);
    return tape_.cross_entropy(logits, labels);
  }

  // Node ids of every parameter bound so far, keyed by set and name.
  const std::map<std::string, NodeId>& bound_backbone() const { return bound_bb_; }
  const std::map<std::string, NodeId>& bound_adapter() const { return bound_ad_; }

 private:
  static constexpr double kMaskValue = -1e30;

  Tape& tape_;
  const BackboneParams& backbone_;
  const AdapterParams* adapter_;
  bool train_backbone_;
  bool train_adapter_;
  std::map<std::string, NodeId> bound_bb_;
  std::map<std::string, NodeId> bound_ad_;

  static std::vector<int> iota(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
    return v;
  }

  NodeId bind(const ParamMap& params, std::map<std::string, NodeId>& cache,
              const std::string& name, bool trainable) {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    auto pit = params.find(name);
    if (pit == params.end()) throw std::invalid_argument("model: unknown parameter " + name);
    NodeId id = trainable ? tape_.param(pit->second) : tape_.constant(pit->second);
    cache.emplace(name, id);
    return id;
  }

  NodeId bb(const std::string& name) {
    return bind(backbone_.tensors, bound_bb_, name, train_backbone_);
  }

  NodeId ad(const std::string& name) {
    return bind(adapter_->tensors, bound_ad_, name, train_adapter_);
  }

  NodeId ln(NodeId x, const std::string& prefix) {
    return tape_.layer_norm(x, bb(prefix + ".g"), bb(prefix + ".b"));
  }

  NodeId feed_forward(const std::string& layer, NodeId x) {
    NodeId h = tape_.gelu(
        tape_.add_row_bias(tape_.matmul(x, bb(layer + ".ff.in.w")), bb(layer + ".ff.in.b")));
    return tape_.add_row_bias(tape_.matmul(h, bb(layer + ".ff.out.w")), bb(layer + ".ff.out.b"));
  }

  NodeId attention(const std::string& prefix, NodeId queries, NodeId keys_values,
                   const NodeId* mask) {
    const ModelConfig& cfg = config();
    int dh = cfg.head_dim();
    NodeId q = tape_.add_row_bias(tape_.matmul(queries, bb(prefix + ".wq")), bb(prefix + ".bq"));
    NodeId k =
        tape_.add_row_bias(tape_.matmul(keys_values, bb(prefix + ".wk")), bb(prefix + ".bk"));
    NodeId v =
        tape_.add_row_bias(tape_.matmul(keys_values, bb(prefix + ".wv")), bb(prefix + ".bv"));
    std::vector<NodeId> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      NodeId qh = tape_.slice_cols(q, h * dh, dh);
      NodeId kh = tape_.slice_cols(k, h * dh, dh);
      NodeId vh = tape_.slice_cols(v, h * dh, dh);
      NodeId scores = tape_.scale(tape_.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
      if (mask) scores = tape_.add(scores, *mask);
      heads.push_back(tape_.matmul(tape_.softmax_rows(scores), vh));
    }
    NodeId merged = tape_.concat_cols(heads);
    return tape_.add_row_bias(tape_.matmul(merged, bb(prefix + ".wo")), bb(prefix + ".bo"));
  }

  // Residual bottleneck: h + up(gelu(down(ln(h)))). Skipped entirely when no
  // adapter is attached.
  NodeId adapter_block(const std::string& point, NodeId h) {
    if (!adapter_) return h;
    NodeId z = tape_.layer_norm(h, ad(point + ".ln.g"), ad(point + ".ln.b"));
    z = tape_.gelu(
        tape_.add_row_bias(tape_.matmul(z, ad(point + ".down.w")), ad(point + ".down.b")));
    z = tape_.add_row_bias(tape_.matmul(z, ad(point + ".up.w")), ad(point + ".up.b"));
    return tape_.add(h, z);
  }
};

// ---- inference helpers (no gradients) ----

// Hidden states for one context under one adapter (or backbone-only when
// adapter is null).
inline Tensor encode_states(const std::vector<int>& ids, const BackboneParams& backbone,
                            const AdapterParams* adapter) {
  Tape tape;
  ModelGraph graph(tape, backbone, adapter, false, false);
  return tape.value(graph.encode(ids));
}

// Log-probability vector over the vocabulary for the next token after
// prefix_ids. The prefix must begin with <bos>.
inline std::vector<double> decode_step(const std::vector<int>& prefix_ids,
                                       const Tensor& encoder_states,
                                       const BackboneParams& backbone,
                                       const AdapterParams* adapter) {
  if (prefix_ids.empty() || prefix_ids.front() != kBos)
    throw std::invalid_argument("decode_step: prefix must begin with <bos>");
  Tape tape;
  ModelGraph graph(tape, backbone, adapter, false, false);
  NodeId logits = graph.decode_logits(prefix_ids, tape.constant(encoder_states));
  const Tensor& t = tape.value(logits);
  int v = t.cols();
  std::span<const double> last(&t.data[static_cast<size_t>(t.rows() - 1) * v],
                               static_cast<size_t>(v));
  return log_softmax(last);
}

inline constexpr int kMaxValueTokens = 16;

// Ties break toward the lowest token index.
inline int argmax_token(std::span<const double> scores) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i)
    if (scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(best)]) best = i;
  return best;
}

// Greedy rollout with a single adapter; returns generated ids without
// <bos>/<eos>.
inline std::vector<int> greedy_decode(const std::vector<int>& input_ids,
                                      const BackboneParams& backbone,
                                      const AdapterParams* adapter,
                                      int max_tokens = kMaxValueTokens) {
  Tensor enc = encode_states(input_ids, backbone, adapter);
  std::vector<int> prefix = {kBos};
  std::vector<int> out;
  for (int step = 0; step < max_tokens; ++step) {
    std::vector<double> lp = decode_step(prefix, enc, backbone, adapter);
    int tok = argmax_token(lp);
    if (tok == kEos) break;
    out.push_back(tok);
    prefix.push_back(tok);
  }
  return out;
}

}  // namespace moedst
