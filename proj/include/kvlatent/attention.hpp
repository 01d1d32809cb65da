#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "kvlatent/error.hpp"
#include "kvlatent/rope.hpp"
#include "kvlatent/tape.hpp"
#include "kvlatent/tensor.hpp"

namespace kvlatent {

// Attention shape with the query-key and value-output head widths decoupled.
// Nothing ties n_heads * d_qk (or d_vo) to d_model.
struct HeadGeometry {
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_qk = 0;
  std::size_t d_vo = 0;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || n_kv_heads == 0)
      throw ConfigError("geometry: d_model and head counts must be positive");
    if (n_heads % n_kv_heads != 0)
      throw ConfigError("geometry: n_heads " + std::to_string(n_heads) +
                        " not divisible by n_kv_heads " + std::to_string(n_kv_heads));
    if (d_qk < 2 || d_qk % 2 != 0)
      throw ConfigError("geometry: d_qk must be even and >= 2, got " + std::to_string(d_qk));
    if (d_vo < 2) throw ConfigError("geometry: d_vo must be >= 2, got " + std::to_string(d_vo));
  }

  // Block-contiguous grouped-query map.
  std::size_t kv_head_for(std::size_t head) const { return head * n_kv_heads / n_heads; }

  friend bool operator==(const HeadGeometry&, const HeadGeometry&) = default;
};

inline double scale_factor(const HeadGeometry& g) {
  return 1.0 / std::sqrt(static_cast<double>(g.d_qk));
}

// Per-head slices are contiguous column (row, for w_o) blocks:
// head i owns columns [i*d_qk, (i+1)*d_qk) of w_q, and so on.
template <class W>
struct AttentionWeightsT {
  W w_q;  // [d_model x n_heads*d_qk]
  W w_k;  // [d_model x n_kv_heads*d_qk]
  W w_v;  // [d_model x n_kv_heads*d_vo]
  W w_o;  // [n_heads*d_vo x d_model]
};

template <class T>
using AttentionWeights = AttentionWeightsT<Tensor<T>>;

template <class T>
void check_attention_shapes(const AttentionWeights<T>& w, const HeadGeometry& g) {
  g.validate();
  auto expect = [](const Tensor<T>& t, std::size_t r, std::size_t c, const char* name) {
    if (t.rank() != 2 || t.rows() != r || t.cols() != c)
      throw ShapeError(std::string("attention: ") + name + " is " + shape_str(t.shape()) +
                       ", expected " + shape_str({r, c}));
  };
  expect(w.w_q, g.d_model, g.n_heads * g.d_qk, "w_q");
  expect(w.w_k, g.d_model, g.n_kv_heads * g.d_qk, "w_k");
  expect(w.w_v, g.d_model, g.n_kv_heads * g.d_vo, "w_v");
  expect(w.w_o, g.n_heads * g.d_vo, g.d_model, "w_o");
}

namespace ops {

// Causal multi-head attention over a whole sequence on the tape.
// x: [seq x d_model]; rows sit at positions start_pos, start_pos + 1, ...
template <class T>
Var<T> attention(Var<T> x, const AttentionWeightsT<Var<T>>& w, const HeadGeometry& g,
                 const RotaryTable& table, std::size_t start_pos = 0) {
  if (table.dim() != g.d_qk)
    throw ShapeError("attention: rope dim " + std::to_string(table.dim()) + " vs d_qk " +
                     std::to_string(g.d_qk));
  Var<T> q = rope_rows(matmul(x, w.w_q), table, start_pos);
  Var<T> k = rope_rows(matmul(x, w.w_k), table, start_pos);
  Var<T> v = matmul(x, w.w_v);
  const T inv_sqrt = static_cast<T>(scale_factor(g));
  std::vector<Var<T>> k_heads, v_heads, out_heads;
  for (std::size_t h = 0; h < g.n_kv_heads; ++h) {
    k_heads.push_back(slice_cols(k, h * g.d_qk, g.d_qk));
    v_heads.push_back(slice_cols(v, h * g.d_vo, g.d_vo));
  }
  for (std::size_t h = 0; h < g.n_heads; ++h) {
    const std::size_t kv = g.kv_head_for(h);
    Var<T> qh = slice_cols(q, h * g.d_qk, g.d_qk);
    Var<T> scores = scale(matmul_nt(qh, k_heads[kv]), inv_sqrt);
    Var<T> p = softmax_rows(scores, /*causal=*/true, /*offset=*/0);
    out_heads.push_back(weighted_sum(p, v_heads[kv]));
  }
  return matmul(concat_cols(out_heads), w.w_o);
}

}  // namespace ops

template <class T>
AttentionWeightsT<Var<T>> bind(Tape<T>& tape, const AttentionWeights<T>& w,
                               bool requires_grad = false) {
  return {tape.leaf(w.w_q, requires_grad), tape.leaf(w.w_k, requires_grad),
          tape.leaf(w.w_v, requires_grad), tape.leaf(w.w_o, requires_grad)};
}

// Full-sequence causal attention; H is [seq x d_model].
template <class T>
Tensor<T> attend_full(const Tensor<T>& H, const AttentionWeights<T>& w, const HeadGeometry& g,
                      const RotaryTable& table) {
  check_attention_shapes(w, g);
  if (H.cols() != g.d_model)
    throw ShapeError("attend_full: input width " + std::to_string(H.cols()) + " vs d_model " +
                     std::to_string(g.d_model));
  Tape<T> tape;
  return ops::attention(tape.leaf(H), bind(tape, w), g, table).value();
}

// Append-only store of rotated keys and values for every layer and kv head.
// Storage grows geometrically (capacity doubles), so appends are amortised
// O(1).
template <class T>
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t n_layers, const HeadGeometry& g)
      : geom_(g), layers_(n_layers, Layer{std::vector<Block>(g.n_kv_heads)}) {}

  struct Block {
    std::vector<T> keys;    // len x d_qk, rotated by position
    std::vector<T> values;  // len x d_vo
  };
  struct Layer {
    std::vector<Block> heads;
    std::size_t len = 0;
  };

  const HeadGeometry& geometry() const noexcept { return geom_; }
  std::size_t n_layers() const noexcept { return layers_.size(); }
  Layer& layer(std::size_t l) { return layers_.at(l); }
  const Layer& layer(std::size_t l) const { return layers_.at(l); }

  // Tokens cached; the same for every layer once a step completes.
  std::size_t len() const noexcept { return layers_.empty() ? 0 : layers_.front().len; }

  std::size_t capacity() const noexcept {
    if (layers_.empty() || layers_.front().heads.empty()) return 0;
    return layers_.front().heads.front().keys.capacity() / geom_.d_qk;
  }

  std::span<const T> key(std::size_t l, std::size_t head, std::size_t pos) const {
    return {layers_.at(l).heads.at(head).keys.data() + pos * geom_.d_qk, geom_.d_qk};
  }
  std::span<const T> value(std::size_t l, std::size_t head, std::size_t pos) const {
    return {layers_.at(l).heads.at(head).values.data() + pos * geom_.d_vo, geom_.d_vo};
  }

  // Elements held (keys + values) across all layers.
  std::size_t elements() const noexcept {
    return len() * layers_.size() * geom_.n_kv_heads * (geom_.d_qk + geom_.d_vo);
  }

  static void grow(std::vector<T>& v, std::size_t extra) {
    if (v.size() + extra > v.capacity()) v.reserve(std::max(2 * v.capacity(), v.size() + extra));
  }

 private:
  HeadGeometry geom_{};
  std::vector<Layer> layers_;
};

// One decoding step for a single layer: rotates and appends this token's key
// and value, then attends over the cached prefix. Returns [d_model].
template <class T>
std::vector<T> attend_incremental(std::type_identity_t<std::span<const T>> h, typename KvCache<T>::Layer& cache,
                                  const AttentionWeights<T>& w, const HeadGeometry& g,
                                  const RotaryTable& table, std::size_t pos) {
  if (pos != cache.len)
    throw Error("attend_incremental: position " + std::to_string(pos) + " but cache holds " +
                std::to_string(cache.len) + " tokens");
  if (h.size() != g.d_model) throw ShapeError("attend_incremental: input width mismatch");
  if (cache.heads.size() != g.n_kv_heads)
    throw ShapeError("attend_incremental: cache has wrong kv head count");
  table.check_pos(pos);

  const auto project = [&](const Tensor<T>& m) {
    std::vector<T> out(m.cols());
    kernels::gemm_nn<T>(h, m.values(), out, 1, g.d_model, m.cols(), false);
    return out;
  };
  std::vector<T> q = project(w.w_q);
  std::vector<T> k = project(w.w_k);
  const std::vector<T> v = project(w.w_v);
  for (std::size_t hd = 0; hd < g.n_heads; ++hd)
    detail::rotate_block(q.data() + hd * g.d_qk, pos, table, table.config().layout);
  for (std::size_t hd = 0; hd < g.n_kv_heads; ++hd) {
    detail::rotate_block(k.data() + hd * g.d_qk, pos, table, table.config().layout);
    auto& blk = cache.heads[hd];
    KvCache<T>::grow(blk.keys, g.d_qk);
    KvCache<T>::grow(blk.values, g.d_vo);
    blk.keys.insert(blk.keys.end(), k.begin() + hd * g.d_qk, k.begin() + (hd + 1) * g.d_qk);
    blk.values.insert(blk.values.end(), v.begin() + hd * g.d_vo, v.begin() + (hd + 1) * g.d_vo);
  }
  cache.len = pos + 1;

  const std::size_t n = cache.len;
  const T scale = static_cast<T>(scale_factor(g));
  std::vector<T> heads_out(g.n_heads * g.d_vo);
  std::vector<T> scores(n), probs(n);
  std::vector<double> acc(g.d_vo);
  for (std::size_t hd = 0; hd < g.n_heads; ++hd) {
    const auto& blk = cache.heads[g.kv_head_for(hd)];
    const T* qh = q.data() + hd * g.d_qk;
    for (std::size_t t = 0; t < n; ++t) {
      T s{0};
      const T* kt = blk.keys.data() + t * g.d_qk;
      for (std::size_t c = 0; c < g.d_qk; ++c) s += qh[c] * kt[c];
      scores[t] = s * scale;
    }
    kernels::softmax_rows<T>(scores, probs, 1, n, false, 0);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const T* vt = blk.values.data() + t * g.d_vo;
      for (std::size_t c = 0; c < g.d_vo; ++c) acc[c] += static_cast<double>(probs[t]) * vt[c];
    }
    for (std::size_t c = 0; c < g.d_vo; ++c) heads_out[hd * g.d_vo + c] = static_cast<T>(acc[c]);
  }
  std::vector<T> out(g.d_model);
  kernels::gemm_nn<T>(heads_out, w.w_o.values(), out, 1, g.n_heads * g.d_vo, g.d_model, false);
  for (T x : out)
    if (!std::isfinite(x)) throw NumericError("attend_incremental", "non-finite output");
  return out;
}

}  // namespace kvlatent
