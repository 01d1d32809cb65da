#pragma once

// Toy pre-norm decoder: RMS norms, KV-Latent attention, SiLU-gated FFN with
// optional low-rank adapters, untied embedding / unembedding.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvlatent/attention.hpp"
#include "kvlatent/error.hpp"
#include "kvlatent/rope.hpp"
#include "kvlatent/tape.hpp"
#include "kvlatent/tensor.hpp"

namespace kvlatent {

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  HeadGeometry geom{128, 4, 2, 32, 32};
  std::size_t d_ffn = 512;
  RopeConfig rope = RopeConfig::standard(10000.0, 32);
  std::size_t max_seq = 256;

  void validate() const {
    if (vocab == 0 || d_model == 0 || n_layers == 0 || d_ffn == 0 || max_seq == 0)
      throw ConfigError("model: sizes must be positive");
    geom.validate();
    if (geom.d_model != d_model) throw ConfigError("model: geometry d_model differs");
    rope.validate();
    if (rope.dim != geom.d_qk)
      throw ConfigError("model: rope dim " + std::to_string(rope.dim) + " differs from d_qk " +
                        std::to_string(geom.d_qk));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// delta = (alpha / rank) * a * b, a: [in x rank], b: [rank x out].
template <class W>
struct LoraT {
  W a;
  W b;
};

struct LoraSpec {
  std::size_t rank = 0;
  double alpha = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }
  friend bool operator==(const LoraSpec&, const LoraSpec&) = default;
};

template <class W>
struct BlockT {
  W attn_norm;  // [d_model]
  AttentionWeightsT<W> attn;
  W ffn_norm;  // [d_model]
  W ffn_gate;  // [d_model x d_ffn]
  W ffn_up;    // [d_model x d_ffn]
  W ffn_down;  // [d_ffn x d_model]
  std::optional<LoraT<W>> lora_gate, lora_up, lora_down;
};

template <class W>
struct ModelWeightsT {
  W embedding;  // [vocab x d_model]
  std::vector<BlockT<W>> blocks;
  W final_norm;  // [d_model]
  W unembed;     // [d_model x vocab]
};

enum class ParamKind { embedding, norm, attention, ffn, lora, unembed };

// Visits every parameter slot in a fixed order with its dotted name.
template <class W, class F>
void for_each_param(ModelWeightsT<W>& m, F&& f) {
  f(std::string("embedding"), m.embedding, ParamKind::embedding);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& b = m.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    f(p + "attn_norm", b.attn_norm, ParamKind::norm);
    f(p + "attn.w_q", b.attn.w_q, ParamKind::attention);
    f(p + "attn.w_k", b.attn.w_k, ParamKind::attention);
    f(p + "attn.w_v", b.attn.w_v, ParamKind::attention);
    f(p + "attn.w_o", b.attn.w_o, ParamKind::attention);
    f(p + "ffn_norm", b.ffn_norm, ParamKind::norm);
    f(p + "ffn.gate", b.ffn_gate, ParamKind::ffn);
    f(p + "ffn.up", b.ffn_up, ParamKind::ffn);
    f(p + "ffn.down", b.ffn_down, ParamKind::ffn);
    const std::pair<const char*, std::optional<LoraT<W>>*> adapters[] = {
        {"ffn.gate", &b.lora_gate}, {"ffn.up", &b.lora_up}, {"ffn.down", &b.lora_down}};
    for (auto& [name, slot] : adapters) {
      if (!slot->has_value()) continue;
      f(p + name + ".lora_a", (*slot)->a, ParamKind::lora);
      f(p + name + ".lora_b", (*slot)->b, ParamKind::lora);
    }
  }
  f(std::string("final_norm"), m.final_norm, ParamKind::norm);
  f(std::string("unembed"), m.unembed, ParamKind::unembed);
}

template <class W, class F>
void for_each_param(const ModelWeightsT<W>& m, F&& f) {
  for_each_param(const_cast<ModelWeightsT<W>&>(m),
                 [&f](const std::string& n, W& w, ParamKind k) { f(n, std::as_const(w), k); });
}

// Structure-preserving conversion: builds a ModelWeightsT<U> by calling
// f(name, W&, kind) -> U for each slot, in for_each_param order.
template <class U, class W, class F>
ModelWeightsT<U> map_params(ModelWeightsT<W>& src, F&& f) {
  ModelWeightsT<U> out;
  out.embedding = f(std::string("embedding"), src.embedding, ParamKind::embedding);
  for (std::size_t l = 0; l < src.blocks.size(); ++l) {
    auto& b = src.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    BlockT<U> nb;
    nb.attn_norm = f(p + "attn_norm", b.attn_norm, ParamKind::norm);
    nb.attn.w_q = f(p + "attn.w_q", b.attn.w_q, ParamKind::attention);
    nb.attn.w_k = f(p + "attn.w_k", b.attn.w_k, ParamKind::attention);
    nb.attn.w_v = f(p + "attn.w_v", b.attn.w_v, ParamKind::attention);
    nb.attn.w_o = f(p + "attn.w_o", b.attn.w_o, ParamKind::attention);
    nb.ffn_norm = f(p + "ffn_norm", b.ffn_norm, ParamKind::norm);
    nb.ffn_gate = f(p + "ffn.gate", b.ffn_gate, ParamKind::ffn);
    nb.ffn_up = f(p + "ffn.up", b.ffn_up, ParamKind::ffn);
    nb.ffn_down = f(p + "ffn.down", b.ffn_down, ParamKind::ffn);
    auto conv = [&](const char* name, std::optional<LoraT<W>>& s) -> std::optional<LoraT<U>> {
      if (!s) return std::nullopt;
      return LoraT<U>{f(p + name + ".lora_a", s->a, ParamKind::lora),
                      f(p + name + ".lora_b", s->b, ParamKind::lora)};
    };
    nb.lora_gate = conv("ffn.gate", b.lora_gate);
    nb.lora_up = conv("ffn.up", b.lora_up);
    nb.lora_down = conv("ffn.down", b.lora_down);
    out.blocks.push_back(std::move(nb));
  }
  out.final_norm = f(std::string("final_norm"), src.final_norm, ParamKind::norm);
  out.unembed = f(std::string("unembed"), src.unembed, ParamKind::unembed);
  return out;
}

template <class T>
class Model {
 public:
  using Weights = ModelWeightsT<Tensor<T>>;

  Model() = default;
  Model(ModelConfig cfg, Weights w, std::optional<LoraSpec> lora = std::nullopt,
        bool base_frozen = false)
      : config_(std::move(cfg)),
        weights_(std::move(w)),
        lora_(lora),
        base_frozen_(base_frozen) {
    config_.validate();
    table_ = std::make_shared<RotaryTable>(config_.rope, config_.max_seq);
    check_shapes();
  }

  // Gaussian initialisation, small-std GPT style; residual projections are
  // scaled down by sqrt(2 * n_layers).
  static Model random(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto gauss = [&](std::size_t r, std::size_t c, double std) {
      Tensor<T> t = Tensor<T>::matrix(r, c);
      for (auto& x : t.values()) x = static_cast<T>(std * normal(rng));
      return t;
    };
    const double base = 0.02;
    const double resid = base / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    const auto& g = cfg.geom;
    Weights w;
    w.embedding = gauss(cfg.vocab, cfg.d_model, base);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      BlockT<Tensor<T>> b;
      b.attn_norm = Tensor<T>({cfg.d_model}, T{1});
      b.attn.w_q = gauss(cfg.d_model, g.n_heads * g.d_qk, base);
      b.attn.w_k = gauss(cfg.d_model, g.n_kv_heads * g.d_qk, base);
      b.attn.w_v = gauss(cfg.d_model, g.n_kv_heads * g.d_vo, base);
      b.attn.w_o = gauss(g.n_heads * g.d_vo, cfg.d_model, resid);
      b.ffn_norm = Tensor<T>({cfg.d_model}, T{1});
      b.ffn_gate = gauss(cfg.d_model, cfg.d_ffn, base);
      b.ffn_up = gauss(cfg.d_model, cfg.d_ffn, base);
      b.ffn_down = gauss(cfg.d_ffn, cfg.d_model, resid);
      w.blocks.push_back(std::move(b));
    }
    w.final_norm = Tensor<T>({cfg.d_model}, T{1});
    w.unembed = gauss(cfg.d_model, cfg.vocab, base);
    return Model(cfg, std::move(w));
  }

  const ModelConfig& config() const noexcept { return config_; }
  const Weights& weights() const noexcept { return weights_; }
  Weights& weights() noexcept { return weights_; }
  const RotaryTable& rotary() const noexcept { return *table_; }
  const std::optional<LoraSpec>& lora() const noexcept { return lora_; }
  bool base_frozen() const noexcept { return base_frozen_; }

  void set_lora(std::optional<LoraSpec> spec, bool base_frozen) {
    lora_ = spec;
    base_frozen_ = base_frozen;
    check_shapes();
  }

  void set_config(ModelConfig cfg) {
    cfg.validate();
    config_ = std::move(cfg);
    table_ = std::make_shared<RotaryTable>(config_.rope, config_.max_seq);
    check_shapes();
  }

  template <class U>
  Model<U> cast() const {
    auto copy = weights_;
    auto w = map_params<Tensor<U>>(copy, [](const std::string&, Tensor<T>& t, ParamKind) {
      return t.template cast<U>();
    });
    return Model<U>(config_, std::move(w), lora_, base_frozen_);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param(weights_, [&](const std::string&, const Tensor<T>& t, ParamKind) { n += t.size(); });
    return n;
  }

  void check_shapes() const {
    const auto& c = config_;
    const auto& g = c.geom;
    auto expect = [](const Tensor<T>& t, Shape s, const std::string& name) {
      if (t.shape() != s)
        throw ShapeError("model: " + name + " is " + shape_str(t.shape()) + ", expected " +
                         shape_str(s));
    };
    if (weights_.blocks.size() != c.n_layers)
      throw ShapeError("model: " + std::to_string(weights_.blocks.size()) + " blocks for " +
                       std::to_string(c.n_layers) + " layers");
    expect(weights_.embedding, {c.vocab, c.d_model}, "embedding");
    expect(weights_.final_norm, {c.d_model}, "final_norm");
    expect(weights_.unembed, {c.d_model, c.vocab}, "unembed");
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& b = weights_.blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      expect(b.attn_norm, {c.d_model}, p + "attn_norm");
      expect(b.ffn_norm, {c.d_model}, p + "ffn_norm");
      check_attention_shapes(b.attn, g);
      expect(b.ffn_gate, {c.d_model, c.d_ffn}, p + "ffn.gate");
      expect(b.ffn_up, {c.d_model, c.d_ffn}, p + "ffn.up");
      expect(b.ffn_down, {c.d_ffn, c.d_model}, p + "ffn.down");
      const bool any = b.lora_gate || b.lora_up || b.lora_down;
      const bool all = b.lora_gate && b.lora_up && b.lora_down;
      if (any != lora_.has_value() || (any && !all))
        throw ShapeError("model: " + p + " adapters inconsistent with the lora setting");
      if (all) {
        const std::size_t r = lora_->rank;
        expect(b.lora_gate->a, {c.d_model, r}, p + "ffn.gate.lora_a");
        expect(b.lora_gate->b, {r, c.d_ffn}, p + "ffn.gate.lora_b");
        expect(b.lora_up->a, {c.d_model, r}, p + "ffn.up.lora_a");
        expect(b.lora_up->b, {r, c.d_ffn}, p + "ffn.up.lora_b");
        expect(b.lora_down->a, {c.d_ffn, r}, p + "ffn.down.lora_a");
        expect(b.lora_down->b, {r, c.d_model}, p + "ffn.down.lora_b");
      }
    }
  }

 private:
  ModelConfig config_{};
  Weights weights_{};
  std::optional<LoraSpec> lora_;
  bool base_frozen_ = false;
  // Shared so that copies of a model stay cheap; the table is immutable.
  std::shared_ptr<const RotaryTable> table_;
};

// Model weights placed on a tape, plus the (tensor, var) pairs that require
// gradients in for_each_param order.
template <class T>
struct BoundModel {
  ModelWeightsT<Var<T>> vars;
  std::vector<std::pair<Tensor<T>*, Var<T>>> trainable;
};

using TrainablePredicate = std::function<bool(const std::string&, ParamKind)>;

template <class T>
BoundModel<T> bind(Tape<T>& tape, Model<T>& model, const TrainablePredicate& trainable = {}) {
  BoundModel<T> out;
  out.vars = map_params<Var<T>>(model.weights(), [&](const std::string& name, Tensor<T>& t,
                                                     ParamKind kind) {
    const bool g = trainable && trainable(name, kind);
    Var<T> v = tape.leaf(t, g);
    if (g) out.trainable.emplace_back(&t, v);
    return v;
  });
  return out;
}

namespace ops {

// x * w, plus the adapter delta when present.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, const std::optional<LoraT<Var<T>>>& lora, T lora_scale) {
  Var<T> y = matmul(x, w);
  if (!lora) return y;
  return add(y, scale(matmul(matmul(x, lora->a), lora->b), lora_scale));
}

template <class T>
Var<T> decoder_block(Var<T> h, const BlockT<Var<T>>& b, const HeadGeometry& g,
                     const RotaryTable& table, T lora_scale) {
  h = add(h, attention(rms_norm(h, b.attn_norm), b.attn, g, table));
  Var<T> f = rms_norm(h, b.ffn_norm);
  Var<T> gate = linear(f, b.ffn_gate, b.lora_gate, lora_scale);
  Var<T> up = linear(f, b.ffn_up, b.lora_up, lora_scale);
  return add(h, linear(mul(silu(gate), up), b.ffn_down, b.lora_down, lora_scale));
}

}  // namespace ops

template <class T>
T lora_scale_of(const Model<T>& m) {
  return m.lora() ? static_cast<T>(m.lora()->scale()) : T{0};
}

template <class T>
void check_tokens(const Model<T>& m, std::span<const int> tokens) {
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  if (tokens.size() > m.config().max_seq)
    throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens exceed max_seq " +
                     std::to_string(m.config().max_seq));
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= m.config().vocab)
      throw ShapeError("forward: token id " + std::to_string(t) + " outside vocab of " +
                       std::to_string(m.config().vocab));
}

// Tape forward pass. `hidden`, when given, receives H^(0..L): the embedding
// output followed by each block's output.
template <class T>
Var<T> forward_on_tape(const Model<T>& model, const ModelWeightsT<Var<T>>& w,
                       std::span<const int> tokens, std::vector<Var<T>>* hidden = nullptr) {
  check_tokens(model, tokens);
  const T ls = lora_scale_of(model);
  Var<T> h = ops::embedding(w.embedding, tokens);
  if (hidden) hidden->push_back(h);
  for (const auto& b : w.blocks) {
    h = ops::decoder_block(h, b, model.config().geom, model.rotary(), ls);
    if (hidden) hidden->push_back(h);
  }
  return ops::matmul(ops::rms_norm(h, w.final_norm), w.unembed);
}

// Logits [seq x vocab] without gradient bookkeeping.
template <class T>
Tensor<T> forward(const Model<T>& model, std::span<const int> tokens,
                  std::vector<Tensor<T>>* hidden = nullptr) {
  Tape<T> tape;
  auto& mut = const_cast<Model<T>&>(model);
  auto bound = bind(tape, mut);
  std::vector<Var<T>> hv;
  Var<T> logits = forward_on_tape(model, bound.vars, tokens, hidden ? &hv : nullptr);
  if (hidden) {
    hidden->clear();
    for (const auto& v : hv) hidden->push_back(v.value());
  }
  return logits.value();
}

// Token-at-a-time decoding with a KV cache.
template <class T>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Model<T>& model)
      : model_(&model), cache_(model.config().n_layers, model.config().geom) {}

  const KvCache<T>& cache() const noexcept { return cache_; }
  std::size_t position() const noexcept { return cache_.len(); }

  // Consumes one token and returns next-token logits [vocab].
  std::vector<T> step(int token) {
    const auto& cfg = model_->config();
    const auto& w = model_->weights();
    const int tok[1] = {token};
    check_tokens(*model_, tok);
    const std::size_t pos = cache_.len();
    if (pos >= cfg.max_seq) throw ShapeError("decoder: context full");
    const std::size_t d = cfg.d_model;
    std::vector<T> h(w.embedding.row(token).begin(), w.embedding.row(token).end());
    std::vector<T> normed(d), inv(1);
    const T ls = lora_scale_of(*model_);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& b = w.blocks[l];
      kernels::rms_norm<T>(h, b.attn_norm.values(), normed, inv, 1, d);
      const auto a = attend_incremental<T>(normed, cache_.layer(l), b.attn, cfg.geom,
                                           model_->rotary(), pos);
      for (std::size_t i = 0; i < d; ++i) h[i] += a[i];
      kernels::rms_norm<T>(h, b.ffn_norm.values(), normed, inv, 1, d);
      auto gate = linear(normed, b.ffn_gate, b.lora_gate, ls);
      const auto up = linear(normed, b.ffn_up, b.lora_up, ls);
      for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = kernels::silu(gate[i]) * up[i];
      const auto down = linear(gate, b.ffn_down, b.lora_down, ls);
      for (std::size_t i = 0; i < d; ++i) h[i] += down[i];
    }
    kernels::rms_norm<T>(h, w.final_norm.values(), normed, inv, 1, d);
    auto logits = linear(normed, w.unembed, std::optional<LoraT<Tensor<T>>>{}, T{0});
    for (T x : logits)
      if (!std::isfinite(x)) throw NumericError("decoder", "non-finite logits");
    return logits;
  }

 private:
  static std::vector<T> linear(std::span<const T> x, const Tensor<T>& w,
                               const std::optional<LoraT<Tensor<T>>>& lora, T ls) {
    std::vector<T> y(w.cols());
    kernels::gemm_nn<T>(x, w.values(), y, 1, x.size(), w.cols(), false);
    if (lora) {
      std::vector<T> z(lora->a.cols()), delta(w.cols());
      kernels::gemm_nn<T>(x, lora->a.values(), z, 1, x.size(), z.size(), false);
      kernels::gemm_nn<T>(z, lora->b.values(), delta, 1, z.size(), w.cols(), false);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += delta[i] * ls;
    }
    return y;
  }

  const Model<T>* model_;
  KvCache<T> cache_;
};

// Greedy continuation of `prompt` by `n` tokens.
template <class T>
std::vector<int> greedy_decode(const Model<T>& model, std::span<const int> prompt, std::size_t n) {
  if (prompt.empty()) throw ShapeError("greedy_decode: empty prompt");
  IncrementalDecoder<T> dec(model);
  std::vector<T> logits;
  for (int t : prompt) logits = dec.step(t);
  std::vector<int> out;
  for (std::size_t i = 0; i < n && dec.position() < model.config().max_seq; ++i) {
    const int next =
        static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(next);
    if (i + 1 < n && dec.position() < model.config().max_seq) logits = dec.step(next);
  }
  return out;
}

// Mean negative log-likelihood (nats) over every next-token position of
// every sequence.
template <class T>
double log_perplexity(const Model<T>& model, const std::vector<std::vector<int>>& corpus) {
  if (corpus.empty()) throw ConfigError("log_perplexity: empty corpus");
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> ls;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw ConfigError("log_perplexity: sequences need at least 2 tokens");
    const Tensor<T> logits = forward(model, std::span<const int>(seq));
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      ops::detail::log_softmax_row<T>(logits.row(i), ls);
      total -= ls[seq[i + 1]];
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace kvlatent
