#pragma once

// Rotary position embedding: frequency schedules, both channel layouts, and
// the all-ones similarity probe used to study positional stability.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvlatent/error.hpp"
#include "kvlatent/parallel.hpp"
#include "kvlatent/tape.hpp"
#include "kvlatent/tensor.hpp"

namespace kvlatent {

enum class RopeMode { standard, frequency_aware, subsampled };

// adjacent: channel pairs (2j, 2j+1). half_split: pairs (j, j + dim/2).
enum class RopeLayout { adjacent, half_split };

inline const char* to_string(RopeMode m) {
  switch (m) {
    case RopeMode::standard: return "standard";
    case RopeMode::frequency_aware: return "frequency_aware";
    case RopeMode::subsampled: return "subsampled";
  }
  return "?";
}

inline const char* to_string(RopeLayout l) {
  return l == RopeLayout::adjacent ? "adjacent" : "half_split";
}

inline RopeMode parse_rope_mode(const std::string& s) {
  if (s == "standard") return RopeMode::standard;
  if (s == "frequency_aware" || s == "freq-aware") return RopeMode::frequency_aware;
  if (s == "subsampled") return RopeMode::subsampled;
  throw ConfigError("unknown rope mode '" + s + "'");
}

inline RopeLayout parse_rope_layout(const std::string& s) {
  if (s == "adjacent") return RopeLayout::adjacent;
  if (s == "half_split" || s == "half-split") return RopeLayout::half_split;
  throw ConfigError("unknown rope layout '" + s + "'");
}

struct RopeConfig {
  double theta = 10000.0;
  std::size_t dim = 64;
  RopeMode mode = RopeMode::standard;
  RopeLayout layout = RopeLayout::half_split;
  // subsampled only: the standard parent schedule and which of its
  // frequencies are kept (phase, phase + stride, ...).
  std::size_t parent_dim = 0;
  std::size_t stride = 1;
  std::size_t phase = 0;

  static RopeConfig standard(double theta, std::size_t dim,
                             RopeLayout layout = RopeLayout::half_split) {
    return {theta, dim, RopeMode::standard, layout, 0, 1, 0};
  }
  static RopeConfig frequency_aware(double theta, std::size_t dim,
                                    RopeLayout layout = RopeLayout::half_split) {
    return {theta, dim, RopeMode::frequency_aware, layout, 0, 1, 0};
  }
  static RopeConfig subsampled(double theta, std::size_t parent_dim, std::size_t stride,
                               std::size_t phase = 0, RopeLayout layout = RopeLayout::half_split) {
    return {theta, stride ? parent_dim / stride : 0, RopeMode::subsampled, layout, parent_dim,
            stride, phase};
  }

  void validate() const {
    if (!(theta > 1.0)) throw ConfigError("rope: theta must exceed 1");
    if (dim == 0 || dim % 2 != 0) throw ConfigError("rope: dim must be even and positive");
    if (mode == RopeMode::frequency_aware && dim % 8 != 0)
      throw ConfigError("rope: frequency-aware schedule needs dim % 8 == 0, got " +
                        std::to_string(dim));
    if (mode == RopeMode::subsampled) {
      if (stride == 0 || parent_dim % 2 != 0 || parent_dim == 0 || parent_dim % stride != 0 ||
          dim != parent_dim / stride || phase >= stride)
        throw ConfigError("rope: inconsistent subsampling (parent " + std::to_string(parent_dim) +
                          ", stride " + std::to_string(stride) + ", phase " +
                          std::to_string(phase) + ", dim " + std::to_string(dim) + ")");
      if ((parent_dim / 2) % stride != 0)
        throw ConfigError("rope: stride " + std::to_string(stride) +
                          " does not divide the parent's frequency count");
    }
  }

  friend bool operator==(const RopeConfig&, const RopeConfig&) = default;
};

// theta_j for j = 0 .. dim/2 - 1.
inline std::vector<double> make_frequencies(const RopeConfig& cfg) {
  cfg.validate();
  const std::size_t half = cfg.dim / 2;
  std::vector<double> f(half);
  switch (cfg.mode) {
    case RopeMode::standard:
      for (std::size_t j = 0; j < half; ++j)
        f[j] = std::pow(cfg.theta, -static_cast<double>(j) / static_cast<double>(half));
      break;
    case RopeMode::frequency_aware: {
      // Low channels: exponents 2(j-1+d/8)/d over j in [1, d/4], i.e. [1/4, 3/4).
      // High channels: (j-1+3d/4)/d over j in (d/4, d/2], i.e. [1, 5/4).
      // The gap [3/4, 1) is left unsampled, as written.
      const double d = static_cast<double>(cfg.dim);
      const std::size_t quarter = cfg.dim / 4;
      for (std::size_t j = 1; j <= half; ++j) {
        const double jj = static_cast<double>(j);
        const double e = j <= quarter ? 2.0 * (jj - 1.0 + d / 8.0) / d
                                      : (jj - 1.0 + 3.0 * d / 4.0) / d;
        f[j - 1] = std::pow(cfg.theta, -e);
      }
      break;
    }
    case RopeMode::subsampled: {
      // Same expression as the parent so the kept values match it bit-for-bit.
      const std::size_t parent_half = cfg.parent_dim / 2;
      for (std::size_t j = 0; j < half; ++j) {
        const std::size_t pj = cfg.phase + j * cfg.stride;
        f[j] = std::pow(cfg.theta, -static_cast<double>(pj) / static_cast<double>(parent_half));
      }
      break;
    }
  }
  return f;
}

// Precomputed cos/sin of pos * theta_j for pos in [0, max_pos).
class RotaryTable {
 public:
  RotaryTable() = default;
  RotaryTable(const RopeConfig& cfg, std::size_t max_pos)
      : cfg_(cfg), max_pos_(max_pos), half_(cfg.dim / 2), freqs_(make_frequencies(cfg)) {
    cos_.resize(max_pos * half_);
    sin_.resize(max_pos * half_);
    for (std::size_t x = 0; x < max_pos; ++x) {
      for (std::size_t j = 0; j < half_; ++j) {
        const double a = static_cast<double>(x) * freqs_[j];
        cos_[x * half_ + j] = std::cos(a);
        sin_[x * half_ + j] = std::sin(a);
      }
    }
  }

  const RopeConfig& config() const noexcept { return cfg_; }
  std::size_t max_pos() const noexcept { return max_pos_; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  std::size_t half() const noexcept { return half_; }
  std::span<const double> frequencies() const noexcept { return freqs_; }
  double cos(std::size_t pos, std::size_t j) const { return cos_[pos * half_ + j]; }
  double sin(std::size_t pos, std::size_t j) const { return sin_[pos * half_ + j]; }

  void check_pos(std::size_t pos) const {
    if (pos >= max_pos_)
      throw ShapeError("rope: position " + std::to_string(pos) + " outside table of " +
                       std::to_string(max_pos_));
  }

 private:
  RopeConfig cfg_{};
  std::size_t max_pos_ = 0;
  std::size_t half_ = 0;
  std::vector<double> freqs_;
  std::vector<double> cos_, sin_;
};

namespace detail {

// Index of the partner channel for frequency j.
inline std::pair<std::size_t, std::size_t> rope_pair(RopeLayout layout, std::size_t j,
                                                     std::size_t half) {
  return layout == RopeLayout::adjacent ? std::pair{2 * j, 2 * j + 1} : std::pair{j, j + half};
}

// Rotates one head vector in place; sign = -1 applies the inverse rotation.
template <class T>
void rotate_block(T* v, std::size_t pos, const RotaryTable& table, RopeLayout layout,
                  T sign = T{1}) {
  const std::size_t half = table.half();
  for (std::size_t j = 0; j < half; ++j) {
    const auto [a, b] = rope_pair(layout, j, half);
    const T c = static_cast<T>(table.cos(pos, j));
    const T s = sign * static_cast<T>(table.sin(pos, j));
    const T va = v[a], vb = v[b];
    v[a] = va * c - vb * s;
    v[b] = vb * c + va * s;
  }
}

}  // namespace detail

// Rotates a single head vector to position `pos` using the table's layout
// unless one is given explicitly.
template <class T>
std::vector<T> apply_rope(std::span<const T> v, std::size_t pos, const RotaryTable& table,
                          RopeLayout layout) {
  if (v.size() != table.dim())
    throw ShapeError("apply_rope: vector of " + std::to_string(v.size()) + " for dim " +
                     std::to_string(table.dim()));
  table.check_pos(pos);
  std::vector<T> out(v.begin(), v.end());
  detail::rotate_block(out.data(), pos, table, layout);
  return out;
}

template <class T>
std::vector<T> apply_rope(std::span<const T> v, std::size_t pos, const RotaryTable& table) {
  return apply_rope(v, pos, table, table.config().layout);
}

// Rotates every head block of every row of a [rows x heads*dim] matrix;
// row r sits at position start_pos + r.
template <class T>
void rope_rows_inplace(Tensor<T>& x, const RotaryTable& table, std::size_t start_pos,
                       T sign = T{1}) {
  const std::size_t d = table.dim();
  if (x.cols() % d != 0)
    throw ShapeError("rope: row width " + std::to_string(x.cols()) +
                     " is not a multiple of head dim " + std::to_string(d));
  if (x.rows() > 0) table.check_pos(start_pos + x.rows() - 1);
  const std::size_t heads = x.cols() / d;
  const RopeLayout layout = table.config().layout;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t h = 0; h < heads; ++h)
      detail::rotate_block(x.row(r).data() + h * d, start_pos + r, table, layout, sign);
}

namespace ops {

template <class T>
Var<T> rope_rows(Var<T> x, const RotaryTable& table, std::size_t start_pos = 0) {
  Tensor<T> out = x.value();
  rope_rows_inplace(out, table, start_pos);
  const std::size_t ix = x.id;
  return x.tape->record(
      std::move(out), x.requires_grad(),
      [ix, &table, start_pos](Tape<T>& t, std::size_t self) {
        // The adjoint of a rotation is the rotation by the negated angle.
        Tensor<T> g = t.grad(self);
        rope_rows_inplace(g, table, start_pos, T{-1});
        detail::add_into(t.grad_buffer(ix), g);
      },
      "rope_rows");
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Similarity analytics. Everything below runs in f64.

// 1_d . R(x) . 1_d^T = sum_j 2 cos(x theta_j); layout-independent.
inline double rope_similarity(std::span<const double> freqs, double x) {
  double s = 0.0;
  for (double f : freqs) s += 2.0 * std::cos(x * f);
  return s;
}

inline double rope_similarity(const RopeConfig& cfg, double x) {
  return rope_similarity(make_frequencies(cfg), x);
}

inline constexpr std::size_t kIdealCurveSteps = 100000;

// Composite midpoint rule for the d -> infinity limit of the normalised
// similarity, integral over p in [0, 1] of cos(x * theta^-p).
inline double ideal_curve(double theta, double x, std::size_t steps = kIdealCurveSteps) {
  if (steps == 0) throw ConfigError("ideal_curve: steps must be positive");
  if (x == 0.0) return 1.0;
  const double h = 1.0 / static_cast<double>(steps);
  const double log_theta = std::log(theta);
  double s = 0.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double p = (static_cast<double>(i) + 0.5) * h;
    s += std::cos(x * std::exp(-p * log_theta));
  }
  return s * h;
}

struct DecaySeries {
  std::vector<std::size_t> positions;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
};

// Normalised similarity over positions [0, max_pos), using the given set of
// frequencies. Normalisation is by 2 * |freqs| (= d for a full schedule).
inline DecaySeries series_from_frequencies(std::span<const double> freqs, std::size_t max_pos) {
  if (max_pos == 0) throw ConfigError("decay series: max_pos must be at least 1");
  if (freqs.empty()) throw ConfigError("decay series: empty frequency set");
  DecaySeries out;
  out.positions.resize(max_pos);
  out.values.resize(max_pos);
  const double norm = 2.0 * static_cast<double>(freqs.size());
  parallel_for(max_pos, 256, [&](std::size_t b, std::size_t e) {
    for (std::size_t x = b; x < e; ++x) {
      out.positions[x] = x;
      out.values[x] = rope_similarity(freqs, static_cast<double>(x)) / norm;
    }
  });
  return out;
}

inline DecaySeries decay_series(const RopeConfig& cfg, std::size_t max_pos) {
  return series_from_frequencies(make_frequencies(cfg), max_pos);
}

// Similarity restricted to frequency indices [first, last] (1-based,
// inclusive) of the standard schedule for parent_dim.
inline DecaySeries band_series(double theta, std::size_t parent_dim, std::size_t first,
                               std::size_t last, std::size_t max_pos) {
  const auto all = make_frequencies(RopeConfig::standard(theta, parent_dim));
  if (first < 1 || last < first || last > all.size())
    throw ConfigError("band_series: channel range [" + std::to_string(first) + ", " +
                      std::to_string(last) + "] outside [1, " + std::to_string(all.size()) +
                      "]");
  return series_from_frequencies(std::span<const double>(all).subspan(first - 1, last - first + 1),
                                 max_pos);
}

struct StabilityMetrics {
  double negative_fraction = 0.0;
  double tail_oscillation = 0.0;
  double attenuation = 0.0;
};

inline constexpr std::size_t kDefaultWindowEnd = 8192;

// Metrics over positions [begin, end] of the series (inclusive). The tail is
// the last quarter of the window.
inline StabilityMetrics stability_metrics(const DecaySeries& s, std::size_t begin,
                                          std::size_t end) {
  if (end >= s.size() || begin > end)
    throw ConfigError("stability_metrics: window [" + std::to_string(begin) + ", " +
                      std::to_string(end) + "] outside series of " + std::to_string(s.size()));
  const std::size_t n = end - begin + 1;
  if (n < 16) throw ConfigError("stability_metrics: window needs at least 16 points");
  StabilityMetrics m;
  std::size_t neg = 0;
  for (std::size_t x = begin; x <= end; ++x) neg += s.values[x] < 0.0;
  m.negative_fraction = static_cast<double>(neg) / static_cast<double>(n);
  const std::size_t tail = n / 4;
  double lo = s.values[end], hi = s.values[end], sum = 0.0;
  for (std::size_t x = end + 1 - tail; x <= end; ++x) {
    lo = std::min(lo, s.values[x]);
    hi = std::max(hi, s.values[x]);
    sum += s.values[x];
  }
  m.tail_oscillation = hi - lo;
  m.attenuation = s.values[begin] - sum / static_cast<double>(tail);
  return m;
}

inline StabilityMetrics stability_metrics(const DecaySeries& s) {
  return stability_metrics(s, 0, std::min(kDefaultWindowEnd, s.size() - 1));
}

// Nine significant digits, no locale influence.
inline std::string format_sig9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// `pos,value` CSV; with `ideal` non-empty an extra `ideal` column.
inline void write_series_csv(std::ostream& os, const DecaySeries& s,
                             std::span<const double> ideal = {}) {
  os << (ideal.empty() ? "pos,value\n" : "pos,value,ideal\n");
  for (std::size_t i = 0; i < s.size(); ++i) {
    os << s.positions[i] << ',' << format_sig9(s.values[i]);
    if (!ideal.empty()) os << ',' << format_sig9(ideal[i]);
    os << '\n';
  }
}

}  // namespace kvlatent
