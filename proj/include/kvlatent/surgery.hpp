#pragma once

// Builds a reduced-head model from a trained one by selecting channels of
// every attention head. Query/key channels are selected with a uniform
// stride so that half-split rotary pairs (j, j + d/2) survive together.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvlatent/attention.hpp"
#include "kvlatent/error.hpp"
#include "kvlatent/model.hpp"
#include "kvlatent/rope.hpp"

namespace kvlatent {

enum class SelectionStrategy { strided, random };

// Within-head channel indices kept for query/key and value/output. The same
// indices are used for every head.
struct ChannelSelection {
  std::vector<std::size_t> qk;
  std::vector<std::size_t> vo;
};

inline std::size_t exact_stride(std::size_t from, std::size_t to, const char* what) {
  if (to == 0 || from % to != 0)
    throw ConfigError(std::string("surgery: ") + what + " " + std::to_string(from) + " -> " +
                      std::to_string(to) + " is not an integer stride");
  return from / to;
}

inline std::vector<std::size_t> strided_indices(std::size_t from, std::size_t stride) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < from; i += stride) idx.push_back(i);
  return idx;
}

// Strided selection for both halves. The random strategy only reshuffles the
// value/output channels; those carry no rotation, so any subset is valid.
inline ChannelSelection select_channels(const HeadGeometry& from, const HeadGeometry& to,
                                        SelectionStrategy strategy = SelectionStrategy::strided,
                                        std::uint64_t seed = 0) {
  if (to.d_qk % 2 != 0)
    throw ConfigError("surgery: resulting d_qk " + std::to_string(to.d_qk) + " is odd");
  ChannelSelection sel;
  sel.qk = strided_indices(from.d_qk, exact_stride(from.d_qk, to.d_qk, "d_qk"));
  const std::size_t vo_stride = exact_stride(from.d_vo, to.d_vo, "d_vo");
  if (strategy == SelectionStrategy::strided) {
    sel.vo = strided_indices(from.d_vo, vo_stride);
  } else {
    std::vector<std::size_t> all(from.d_vo);
    std::iota(all.begin(), all.end(), 0);
    std::mt19937_64 rng(seed);
    for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng() % i]);
    sel.vo.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(to.d_vo));
    std::sort(sel.vo.begin(), sel.vo.end());
  }
  return sel;
}

namespace detail {

template <class T>
Tensor<T> take_cols(const Tensor<T>& m, std::size_t heads, std::size_t width,
                    const std::vector<std::size_t>& keep) {
  Tensor<T> out = Tensor<T>::matrix(m.rows(), heads * keep.size());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < keep.size(); ++i)
        out(r, h * keep.size() + i) = m(r, h * width + keep[i]);
  return out;
}

template <class T>
Tensor<T> take_rows(const Tensor<T>& m, std::size_t heads, std::size_t width,
                    const std::vector<std::size_t>& keep) {
  Tensor<T> out = Tensor<T>::matrix(heads * keep.size(), m.cols());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < keep.size(); ++i)
      std::copy_n(m.row(h * width + keep[i]).data(), m.cols(), out.row(h * keep.size() + i).data());
  return out;
}

}  // namespace detail

template <class T>
AttentionWeights<T> downsample_attention(const AttentionWeights<T>& w, const HeadGeometry& from,
                                         const HeadGeometry& to, const ChannelSelection& sel) {
  check_attention_shapes(w, from);
  if (to.d_model != from.d_model || to.n_heads != from.n_heads ||
      to.n_kv_heads != from.n_kv_heads)
    throw ConfigError("surgery: only head widths may change");
  if (sel.qk.size() != to.d_qk || sel.vo.size() != to.d_vo)
    throw ConfigError("surgery: selection size does not match the target geometry");
  AttentionWeights<T> out{
      detail::take_cols(w.w_q, from.n_heads, from.d_qk, sel.qk),
      detail::take_cols(w.w_k, from.n_kv_heads, from.d_qk, sel.qk),
      detail::take_cols(w.w_v, from.n_kv_heads, from.d_vo, sel.vo),
      detail::take_rows(w.w_o, from.n_heads, from.d_vo, sel.vo),
  };
  check_attention_shapes(out, to);
  return out;
}

template <class T>
AttentionWeights<T> downsample_attention(const AttentionWeights<T>& w, const HeadGeometry& from,
                                         const HeadGeometry& to) {
  return downsample_attention(w, from, to, select_channels(from, to));
}

// Rotary schedule matching a stride-`stride` channel selection: keeps
// frequencies 0, stride, 2*stride, ... of the parent.
inline RopeConfig derive_rope_subsample(const RopeConfig& from, std::size_t stride) {
  from.validate();
  if (stride == 0) throw ConfigError("surgery: stride must be positive");
  if (stride == 1) return from;
  if (from.layout == RopeLayout::adjacent)
    throw ConfigError("surgery: a stride of " + std::to_string(stride) +
                      " splits adjacent rotary pairs; use the half_split layout");
  if ((from.dim / 2) % stride != 0)
    throw ConfigError("surgery: stride " + std::to_string(stride) + " does not divide " +
                      std::to_string(from.dim / 2) + " rotary frequencies");
  switch (from.mode) {
    case RopeMode::standard:
      return RopeConfig::subsampled(from.theta, from.dim, stride, 0, from.layout);
    case RopeMode::subsampled:
      return RopeConfig::subsampled(from.theta, from.parent_dim, from.stride * stride, from.phase,
                                    from.layout);
    case RopeMode::frequency_aware:
      break;
  }
  throw ConfigError("surgery: cannot subsample a frequency-aware schedule");
}

template <class T>
std::vector<T> downsample_vector(std::span<const T> v, std::size_t stride) {
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); i += stride) out.push_back(v[i]);
  return out;
}

// Adds zero-initialised adapters (b = 0) to gate, up and down of every block
// and marks the base weights frozen.
template <class T>
Model<T> attach_lora(const Model<T>& model, std::size_t rank, double alpha, std::uint64_t seed = 0) {
  if (rank == 0) throw ConfigError("lora: rank must be at least 1");
  if (model.lora()) throw ConfigError("lora: adapters already attached");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto adapter = [&](std::size_t in, std::size_t out) {
    LoraT<Tensor<T>> a{Tensor<T>::matrix(in, rank), Tensor<T>::matrix(rank, out)};
    const double std = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& x : a.a.values()) x = static_cast<T>(std * normal(rng));
    return a;
  };
  auto w = model.weights();
  const auto& c = model.config();
  for (auto& b : w.blocks) {
    b.lora_gate = adapter(c.d_model, c.d_ffn);
    b.lora_up = adapter(c.d_model, c.d_ffn);
    b.lora_down = adapter(c.d_ffn, c.d_model);
  }
  return Model<T>(c, std::move(w), LoraSpec{rank, alpha}, /*base_frozen=*/true);
}

// Folds the adapter deltas into the base matrices (or takes them back out
// with sign = -1). Adapters stay attached.
template <class T>
void merge_lora(Model<T>& model, T sign = T{1}) {
  if (!model.lora()) return;
  const T s = sign * static_cast<T>(model.lora()->scale());
  for (auto& b : model.weights().blocks) {
    for (auto [base, ad] : {std::pair{&b.ffn_gate, &b.lora_gate}, std::pair{&b.ffn_up, &b.lora_up},
                            std::pair{&b.ffn_down, &b.lora_down}}) {
      const Tensor<T> delta = matmul_plain((*ad)->a, (*ad)->b);
      for (std::size_t i = 0; i < base->size(); ++i) (*base)[i] += s * delta[i];
    }
  }
}

enum class SurgeryRope { subsampled, frequency_aware };

struct SurgeryOptions {
  std::size_t d_qk = 0;
  std::size_t d_vo = 0;
  SurgeryRope rope = SurgeryRope::frequency_aware;
  std::size_t lora_rank = 0;  // 0: no adapters
  double lora_alpha = 0.0;
  SelectionStrategy selection = SelectionStrategy::strided;
  std::uint64_t seed = 0;
};

struct SurgeryReport {
  HeadGeometry from, to;
  RopeConfig rope_from, rope_to;
  ChannelSelection selection;
  std::size_t params_before = 0, params_after = 0, trainable_after = 0;
  std::size_t lora_rank = 0;
  double lora_alpha = 0.0;
};

inline nlohmann::json to_json(const HeadGeometry& g) {
  return {{"d_model", g.d_model}, {"n_heads", g.n_heads}, {"n_kv_heads", g.n_kv_heads},
          {"d_qk", g.d_qk},       {"d_vo", g.d_vo}};
}

inline nlohmann::json to_json(const RopeConfig& r) {
  nlohmann::json j{{"theta", r.theta}, {"dim", r.dim}, {"mode", to_string(r.mode)},
                   {"layout", to_string(r.layout)}};
  if (r.mode == RopeMode::subsampled) {
    j["parent_dim"] = r.parent_dim;
    j["stride"] = r.stride;
    j["phase"] = r.phase;
  }
  return j;
}

inline nlohmann::json to_json(const SurgeryReport& r) {
  return {{"geometry_before", to_json(r.from)},
          {"geometry_after", to_json(r.to)},
          {"rope_before", to_json(r.rope_from)},
          {"rope_after", to_json(r.rope_to)},
          {"retained_qk_channels", r.selection.qk},
          {"retained_vo_channels", r.selection.vo},
          {"parameters_before", r.params_before},
          {"parameters_after", r.params_after},
          {"trainable_parameters", r.trainable_after},
          {"lora", {{"rank", r.lora_rank}, {"alpha", r.lora_alpha}}}};
}

// Attention matrices plus adapter factors.
template <class T>
std::size_t trainable_parameter_count(const Model<T>& m) {
  std::size_t n = 0;
  for_each_param(m.weights(), [&](const std::string&, const Tensor<T>& t, ParamKind k) {
    if (k == ParamKind::attention || k == ParamKind::lora) n += t.size();
  });
  return n;
}

template <class T>
std::pair<Model<T>, SurgeryReport> run_surgery(const Model<T>& src, const SurgeryOptions& opt) {
  const ModelConfig& c = src.config();
  if (src.lora()) throw ConfigError("surgery: source model already carries adapters");
  HeadGeometry to = c.geom;
  to.d_qk = opt.d_qk;
  to.d_vo = opt.d_vo;
  to.validate();
  const ChannelSelection sel = select_channels(c.geom, to, opt.selection, opt.seed);
  const std::size_t qk_stride = c.geom.d_qk / to.d_qk;

  ModelConfig nc = c;
  nc.geom = to;
  nc.rope = opt.rope == SurgeryRope::subsampled
                ? derive_rope_subsample(c.rope, qk_stride)
                : RopeConfig::frequency_aware(c.rope.theta, to.d_qk, c.rope.layout);
  auto w = src.weights();
  for (auto& b : w.blocks) b.attn = downsample_attention(b.attn, c.geom, to, sel);
  Model<T> out(nc, std::move(w));
  if (opt.lora_rank > 0) out = attach_lora(out, opt.lora_rank, opt.lora_alpha, opt.seed);

  SurgeryReport rep{c.geom, to, c.rope, nc.rope, sel, src.parameter_count(), out.parameter_count(),
                    trainable_parameter_count(out), opt.lora_rank, opt.lora_alpha};
  return {std::move(out), std::move(rep)};
}

}  // namespace kvlatent
