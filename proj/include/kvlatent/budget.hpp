#pragma once

// KV-cache footprint arithmetic. Integer-only; ratios are reported as exact
// fractions alongside their decimal value.

#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "kvlatent/attention.hpp"
#include "kvlatent/error.hpp"
#include "kvlatent/rope.hpp"

namespace kvlatent {

inline void check_elem_bytes(std::uint64_t b) {
  if (b != 2 && b != 4 && b != 8)
    throw ConfigError("budget: bytes per element must be 2, 4 or 8, got " + std::to_string(b));
}

// Keys and values of every kv head in every layer for one token.
inline std::uint64_t kv_bytes_per_token(const HeadGeometry& g, std::uint64_t n_layers,
                                        std::uint64_t bytes_per_elem) {
  check_elem_bytes(bytes_per_elem);
  return n_layers * g.n_kv_heads * (g.d_qk + g.d_vo) * bytes_per_elem;
}

inline std::uint64_t cache_size(const HeadGeometry& g, std::uint64_t n_layers,
                                std::uint64_t tokens, std::uint64_t bytes_per_elem) {
  return kv_bytes_per_token(g, n_layers, bytes_per_elem) * tokens;
}

inline std::uint64_t max_tokens(std::uint64_t budget_bytes, const HeadGeometry& g,
                                std::uint64_t n_layers, std::uint64_t bytes_per_elem) {
  if (budget_bytes == 0) throw ConfigError("budget: memory budget must be positive");
  const std::uint64_t per = kv_bytes_per_token(g, n_layers, bytes_per_elem);
  if (per == 0) throw ConfigError("budget: zero bytes per token");
  return budget_bytes / per;
}

struct Fraction {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Fraction reduced(std::uint64_t n, std::uint64_t d) {
    const std::uint64_t g = std::gcd(n, d);
    return g ? Fraction{n / g, d / g} : Fraction{n, d};
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
  friend bool operator==(const Fraction& a, const Fraction& b) {
    return a.num * b.den == b.num * a.den;
  }
};

struct CacheBudgetReport {
  HeadGeometry geom;
  std::uint64_t n_layers = 0;
  std::uint64_t bytes_per_elem = 0;
  std::uint64_t bytes_per_token = 0;
  std::uint64_t tokens = 0;
  std::uint64_t s_kv_bytes = 0;
  std::uint64_t budget_bytes = 0;
  std::uint64_t n_max_tokens = 0;
  Fraction ratio;  // bytes_per_token relative to the baseline geometry
};

// The ratio depends only on head widths and counts, never on element size.
inline CacheBudgetReport budget_report(const HeadGeometry& g, const HeadGeometry& baseline,
                                       std::uint64_t n_layers, std::uint64_t bytes_per_elem,
                                       std::uint64_t tokens, std::uint64_t budget_bytes) {
  CacheBudgetReport r;
  r.geom = g;
  r.n_layers = n_layers;
  r.bytes_per_elem = bytes_per_elem;
  r.bytes_per_token = kv_bytes_per_token(g, n_layers, bytes_per_elem);
  r.tokens = tokens;
  r.s_kv_bytes = r.bytes_per_token * tokens;
  r.budget_bytes = budget_bytes;
  r.n_max_tokens = budget_bytes ? max_tokens(budget_bytes, g, n_layers, bytes_per_elem) : 0;
  const std::uint64_t base = kv_bytes_per_token(baseline, n_layers, bytes_per_elem);
  if (base == 0) throw ConfigError("budget: baseline geometry holds no cache");
  r.ratio = Fraction::reduced(r.bytes_per_token, base);
  return r;
}

inline void write_budget_text(std::ostream& os, const std::vector<CacheBudgetReport>& rows) {
  char line[256];
  std::snprintf(line, sizeof line, "%6s %6s %8s %16s %18s %14s %10s %8s\n", "d_qk", "d_vo",
                "kv_heads", "bytes_per_token", "s_kv_bytes", "n_max_tokens", "ratio", "ratio_f");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%6zu %6zu %8zu %16llu %18llu %14llu %10s %8.4f\n", r.geom.d_qk,
                  r.geom.d_vo, r.geom.n_kv_heads, static_cast<unsigned long long>(r.bytes_per_token),
                  static_cast<unsigned long long>(r.s_kv_bytes),
                  static_cast<unsigned long long>(r.n_max_tokens), r.ratio.str().c_str(),
                  r.ratio.value());
    os << line;
  }
}

inline void write_budget_csv(std::ostream& os, const std::vector<CacheBudgetReport>& rows) {
  os << "d_qk,d_vo,n_kv_heads,n_layers,bytes_per_elem,bytes_per_token,tokens,s_kv_bytes,"
        "budget_bytes,n_max_tokens,ratio_num,ratio_den,ratio\n";
  for (const auto& r : rows) {
    os << r.geom.d_qk << ',' << r.geom.d_vo << ',' << r.geom.n_kv_heads << ',' << r.n_layers << ','
       << r.bytes_per_elem << ',' << r.bytes_per_token << ',' << r.tokens << ',' << r.s_kv_bytes
       << ',' << r.budget_bytes << ',' << r.n_max_tokens << ',' << r.ratio.num << ','
       << r.ratio.den << ',' << format_sig9(r.ratio.value()) << '\n';
  }
}

}  // namespace kvlatent
