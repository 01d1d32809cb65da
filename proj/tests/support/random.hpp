#pragma once

#include <cstdint>
#include <random>

#include "kvlatent/tensor.hpp"

namespace kvtest {

template <class T = double>
kvlatent::Tensor<T> randn(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                          double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  auto t = kvlatent::Tensor<T>::matrix(rows, cols);
  for (auto& x : t.values()) x = static_cast<T>(n(rng));
  return t;
}

template <class T = double>
std::vector<T> randv(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

}  // namespace kvtest
