#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "kvlatent/error.hpp"

namespace kvlatent {

using Sequence = std::vector<int>;

// Byte-level tokenisation: every byte of the UTF-8 text is one token (vocab 256).
inline Sequence tokenize_bytes(const std::string& text) {
  Sequence out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("corpus: cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Fixed-length training sequences cut from one token stream, with the tail
// reserved as a held-out split.
struct TokenCorpus {
  std::vector<Sequence> train;
  std::vector<Sequence> heldout;

  static TokenCorpus from_tokens(const Sequence& tokens, std::size_t seq_len,
                                 double heldout_fraction = 0.1) {
    if (seq_len < 2) throw ConfigError("corpus: sequence length must be at least 2");
    std::vector<Sequence> chunks;
    for (std::size_t i = 0; i + seq_len <= tokens.size(); i += seq_len)
      chunks.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                          tokens.begin() + static_cast<std::ptrdiff_t>(i + seq_len));
    if (chunks.empty()) throw ConfigError("corpus: text shorter than one sequence");
    std::size_t held = static_cast<std::size_t>(static_cast<double>(chunks.size()) * heldout_fraction);
    if (heldout_fraction > 0.0 && held == 0 && chunks.size() > 1) held = 1;
    TokenCorpus c;
    c.train.assign(chunks.begin(), chunks.end() - static_cast<std::ptrdiff_t>(held));
    c.heldout.assign(chunks.end() - static_cast<std::ptrdiff_t>(held), chunks.end());
    return c;
  }

  static TokenCorpus from_file(const std::string& path, std::size_t seq_len,
                               double heldout_fraction = 0.1) {
    return from_tokens(tokenize_bytes(read_text_file(path)), seq_len, heldout_fraction);
  }
};

// Epoch-shuffled minibatches over a fixed set of sequences. Indices inside a
// batch are sorted, so a batch covering the whole set is always identical.
class BatchSampler {
 public:
  BatchSampler(const std::vector<Sequence>& data, std::size_t batch, std::uint64_t seed)
      : data_(&data), batch_(std::min(batch, data.size())), state_(seed) {
    if (data.empty()) throw ConfigError("sampler: no sequences");
    if (batch == 0) throw ConfigError("sampler: batch must be positive");
  }

  std::vector<Sequence> next() {
    std::vector<std::size_t> idx;
    while (idx.size() < batch_) {
      if (cursor_ == order_.size()) reshuffle();
      idx.push_back(order_[cursor_++]);
    }
    std::sort(idx.begin(), idx.end());
    std::vector<Sequence> out;
    for (auto i : idx) out.push_back((*data_)[i]);
    return out;
  }

 private:
  // splitmix64: fixed algorithm so batches do not depend on the standard library.
  std::uint64_t rand() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  void reshuffle() {
    order_.resize(data_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rand() % i]);
    cursor_ = 0;
  }

  const std::vector<Sequence>* data_;
  std::size_t batch_;
  std::uint64_t state_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace kvlatent
