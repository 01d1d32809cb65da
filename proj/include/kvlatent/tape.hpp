#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvlatent/error.hpp"
#include "kvlatent/tensor.hpp"

namespace kvlatent {

template <class T>
class Tape;

// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

// Append-only record of primitive operations. backward() walks the records
// in exact reverse order; each record adds its contribution into the grads
// of its inputs, so a value used twice accumulates both contributions.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    require_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
    return {this, nodes_.size() - 1};
  }

  // Records the result of an op. `backward` is kept only when some input
  // needs a gradient.
  Var<T> record(Tensor<T> value, bool needs_grad, Backward backward, const char* op) {
    require_finite(value, op);
    nodes_.push_back(Node{std::move(value), {}, needs_grad ? std::move(backward) : Backward{},
                          needs_grad});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const Tensor<T>& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty() && !n.value.empty()) {
      // never reached by backward: the gradient is zero
      const_cast<Node&>(n).grad = Tensor<T>(n.value.shape());
    }
    return n.grad;
  }

  // Mutable gradient buffer, zero-initialised on first access.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(Var<T> root) {
    if (root.tape != this) throw Error("backward: variable belongs to another tape");
    if (value(root.id).size() != 1)
      throw ShapeError("backward: root must be a scalar, got " +
                       shape_str(value(root.id).shape()));
    grad_buffer(root.id)[0] = T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].grad.empty()) require_finite(nodes_[i].grad, "backward");
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

namespace ops {

namespace detail {

template <class T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw Error(std::string(op) + ": operands live on different tapes");
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (k != b.rows())
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::matrix(m, n);
  kernels::gemm_nn<T>(a.value().values(), b.value().values(), out.values(), m, k, n, false);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), a.requires_grad() || b.requires_grad(),
      [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        if (t.requires_grad(ia))
          kernels::gemm_nt<T>(g.values(), t.value(ib).values(), t.grad_buffer(ia).values(), m, n,
                              k, true);
        if (t.requires_grad(ib))
          kernels::gemm_tn<T>(t.value(ia).values(), g.values(), t.grad_buffer(ib).values(), k, m,
                              n, true);
      },
      "matmul");
}

// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (k != b.cols())
    throw ShapeError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  Tensor<T> out = Tensor<T>::matrix(m, n);
  kernels::gemm_nt<T>(a.value().values(), b.value().values(), out.values(), m, k, n, false);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), a.requires_grad() || b.requires_grad(),
      [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        if (t.requires_grad(ia))
          kernels::gemm_nn<T>(g.values(), t.value(ib).values(), t.grad_buffer(ia).values(), m, n,
                              k, true);
        if (t.requires_grad(ib))
          kernels::gemm_tn<T>(g.values(), t.value(ia).values(), t.grad_buffer(ib).values(), n, m,
                              k, true);
      },
      "matmul_nt");
}

// Probability-weighted sum p * v with the reduction carried in f64.
template <class T>
Var<T> weighted_sum(Var<T> p, Var<T> v) {
  detail::same_tape(p, v, "weighted_sum");
  const std::size_t m = p.rows(), k = p.cols(), n = v.cols();
  if (k != v.rows())
    throw ShapeError("weighted_sum: " + shape_str(p.shape()) + " x " + shape_str(v.shape()));
  Tensor<T> out = Tensor<T>::matrix(m, n);
  kernels::gemm_nn<T, double>(p.value().values(), v.value().values(), out.values(), m, k, n,
                              false);
  const std::size_t ip = p.id, iv = v.id;
  return p.tape->record(
      std::move(out), p.requires_grad() || v.requires_grad(),
      [ip, iv, m, k, n](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        if (t.requires_grad(ip))
          kernels::gemm_nt<T>(g.values(), t.value(iv).values(), t.grad_buffer(ip).values(), m, n,
                              k, true);
        if (t.requires_grad(iv))
          kernels::gemm_tn<T>(t.value(ip).values(), g.values(), t.grad_buffer(iv).values(), k, m,
                              n, true);
      },
      "weighted_sum");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "add");
  if (a.shape() != b.shape())
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), a.requires_grad() || b.requires_grad(),
      [ia, ib](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        if (t.requires_grad(ia)) detail::add_into(t.grad_buffer(ia), g);
        if (t.requires_grad(ib)) detail::add_into(t.grad_buffer(ib), g);
      },
      "add");
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "sub");
  if (a.shape() != b.shape())
    throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), a.requires_grad() || b.requires_grad(),
      [ia, ib](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        if (t.requires_grad(ia)) detail::add_into(t.grad_buffer(ia), g);
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
      },
      "sub");
}

// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "mul");
  if (a.shape() != b.shape())
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), a.requires_grad() || b.requires_grad(),
      [ia, ib](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        if (t.requires_grad(ia)) {
          Tensor<T>& ga = t.grad_buffer(ia);
          const Tensor<T>& bv = t.value(ib);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad_buffer(ib);
          const Tensor<T>& av = t.value(ia);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x *= s;
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), a.requires_grad(),
      [ia, s](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
      },
      "scale");
}

template <class T>
Var<T> silu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x = kernels::silu(x);
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), a.requires_grad(),
      [ia](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& x = t.value(ia);
        Tensor<T>& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const T sg = T{1} / (T{1} + std::exp(-x[i]));
          ga[i] += g[i] * sg * (T{1} + x[i] * (T{1} - sg));
        }
      },
      "silu");
}

template <class T>
Var<T> sum(Var<T> a) {
  double s = 0.0;
  for (T x : a.value().values()) s += x;
  const std::size_t ia = a.id;
  return a.tape->record(
      Tensor<T>({1}, static_cast<T>(s)), a.requires_grad(),
      [ia](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        for (auto& x : t.grad_buffer(ia).values()) x += g;
      },
      "sum");
}

// Row-wise softmax. With causal set, row i only sees columns <= i + offset.
template <class T>
Var<T> softmax_rows(Var<T> a, bool causal = false, std::size_t offset = 0) {
  const std::size_t r = a.rows(), c = a.cols();
  if (c == 0) throw ShapeError("softmax_rows: empty rows");
  Tensor<T> out(a.shape());
  kernels::softmax_rows<T>(a.value().values(), out.values(), r, c, causal, offset);
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), a.requires_grad(),
      [ia, r, c](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += static_cast<double>(g(i, j)) * y(i, j);
          for (std::size_t j = 0; j < c; ++j)
            ga(i, j) += y(i, j) * (g(i, j) - static_cast<T>(dot));
        }
      },
      "softmax_rows");
}

// Row-wise RMS normalisation followed by an elementwise gain w[cols].
template <class T>
Var<T> rms_norm(Var<T> x, Var<T> w) {
  detail::same_tape(x, w, "rms_norm");
  const std::size_t r = x.rows(), c = x.cols();
  if (w.value().size() != c)
    throw ShapeError("rms_norm: gain has " + std::to_string(w.value().size()) + " entries, rows have " +
                     std::to_string(c));
  Tensor<T> out(x.shape());
  std::vector<T> inv(r);
  kernels::rms_norm<T>(x.value().values(), w.value().values(), out.values(), inv, r, c);
  const std::size_t ix = x.id, iw = w.id;
  return x.tape->record(
      std::move(out), x.requires_grad() || w.requires_grad(),
      [ix, iw, r, c, inv = std::move(inv)](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.value(ix);
        const Tensor<T>& wv = t.value(iw);
        if (t.requires_grad(iw)) {
          Tensor<T>& gw = t.grad_buffer(iw);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gw[j] += g(i, j) * xv(i, j) * inv[i];
        }
        if (t.requires_grad(ix)) {
          Tensor<T>& gx = t.grad_buffer(ix);
          for (std::size_t i = 0; i < r; ++i) {
            // y = x * s * w with s = (mean(x^2) + eps)^-1/2; ds/dx_j = -s^3 x_j / c
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j)
              dot += static_cast<double>(g(i, j)) * wv[j] * xv(i, j);
            const T s = inv[i];
            const T k = static_cast<T>(dot) * s * s * s / static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j)
              gx(i, j) += g(i, j) * wv[j] * s - k * xv(i, j);
          }
        }
      },
      "rms_norm");
}

// Gathers rows of `table` at `ids`.
template <class T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
  const std::size_t v = table.rows(), d = table.cols();
  Tensor<T> out = Tensor<T>::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ShapeError("embedding: token id " + std::to_string(ids[i]) + " outside vocab of " +
                       std::to_string(v));
    std::copy_n(table.value().row(ids[i]).data(), d, out.row(i).data());
  }
  const std::size_t it = table.id;
  std::vector<int> saved(ids.begin(), ids.end());
  return table.tape->record(
      std::move(out), table.requires_grad(),
      [it, d, saved = std::move(saved)](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& gt = t.grad_buffer(it);
        for (std::size_t i = 0; i < saved.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) gt(saved[i], j) += g(i, j);
      },
      "embedding");
}

// Columns [begin, begin + count) of a matrix.
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
  const std::size_t r = a.rows(), c = a.cols();
  if (begin + count > c)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + std::to_string(c) +
                     " columns");
  Tensor<T> out = Tensor<T>::matrix(r, count);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(a.value().row(i).data() + begin, count, out.row(i).data());
  const std::size_t ia = a.id;
  return a.tape->record(
      std::move(out), a.requires_grad(),
      [ia, r, begin, count](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < count; ++j) ga(i, begin + j) += g(i, j);
      },
      "slice_cols");
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  bool needs = false;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != r) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
    needs = needs || p.requires_grad();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Tensor<T> out = Tensor<T>::matrix(r, total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.value().row(i).data(), p.cols(), out.row(i).data() + off);
    off += p.cols();
  }
  return parts.front().tape->record(
      std::move(out), needs,
      [r, ids = std::move(ids), widths = std::move(widths)](Tape<T>& t, std::size_t self) {
        const Tensor<T>& g = t.grad(self);
        std::size_t o = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (t.requires_grad(ids[p])) {
            Tensor<T>& gp = t.grad_buffer(ids[p]);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < widths[p]; ++j) gp(i, j) += g(i, o + j);
          }
          o += widths[p];
        }
      },
      "concat_cols");
}

// Mean over elements of (a - b)^2.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "mse");
  if (a.shape() != b.shape())
    throw ShapeError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    s += d * d;
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      Tensor<T>({1}, static_cast<T>(s / static_cast<double>(n))),
      a.requires_grad() || b.requires_grad(),
      [ia, ib, n](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] * T{2} / static_cast<T>(n);
        const Tensor<T>& av = t.value(ia);
        const Tensor<T>& bv = t.value(ib);
        if (t.requires_grad(ia)) {
          Tensor<T>& ga = t.grad_buffer(ia);
          for (std::size_t i = 0; i < n; ++i) ga[i] += g * (av[i] - bv[i]);
        }
        if (t.requires_grad(ib)) {
          Tensor<T>& gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (av[i] - bv[i]);
        }
      },
      "mse");
}

namespace detail {

// log-softmax of one row, in f64.
template <class T>
void log_softmax_row(std::span<const T> x, std::vector<double>& out) {
  out.resize(x.size());
  double mx = x[0];
  for (T v : x) mx = std::max(mx, static_cast<double>(v));
  double s = 0.0;
  for (T v : x) s += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = static_cast<double>(x[j]) - lse;
}

}  // namespace detail

// Mean over rows of -log softmax(logits)[target]. Rows whose target is
// negative are skipped and excluded from the mean.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
  const std::size_t r = logits.rows(), v = logits.cols();
  if (targets.size() != r)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(r) + " rows");
  std::size_t counted = 0;
  double total = 0.0;
  std::vector<double> ls;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= v)
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) +
                       " outside vocab of " + std::to_string(v));
    detail::log_softmax_row<T>(logits.value().row(i), ls);
    total -= ls[targets[i]];
    ++counted;
  }
  if (counted == 0) throw ShapeError("cross_entropy: no targets");
  const std::size_t il = logits.id;
  std::vector<int> saved(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor<T>({1}, static_cast<T>(total / static_cast<double>(counted))), logits.requires_grad(),
      [il, r, v, counted, saved = std::move(saved)](Tape<T>& t, std::size_t self) {
        const double g = static_cast<double>(t.grad(self)[0]) / static_cast<double>(counted);
        Tensor<T>& gl = t.grad_buffer(il);
        std::vector<double> ls;
        for (std::size_t i = 0; i < r; ++i) {
          if (saved[i] < 0) continue;
          detail::log_softmax_row<T>(t.value(il).row(i), ls);
          for (std::size_t j = 0; j < v; ++j)
            gl(i, j) += static_cast<T>(g * (std::exp(ls[j]) - (static_cast<int>(j) == saved[i])));
        }
      },
      "cross_entropy");
}

// Mean over rows of KL(P || Q) where one side is the softmax of the
// differentiable `logits` and the other the softmax of a fixed `reference`.
// reference_first = true computes KL(softmax(reference) || softmax(logits)).
template <class T>
Var<T> kl_divergence(Var<T> logits, const Tensor<T>& reference, bool reference_first = true) {
  const std::size_t r = logits.rows(), v = logits.cols();
  if (reference.shape() != logits.shape())
    throw ShapeError("kl_divergence: " + shape_str(logits.shape()) + " vs " +
                     shape_str(reference.shape()));
  double total = 0.0;
  std::vector<double> lq, lp;
  for (std::size_t i = 0; i < r; ++i) {
    detail::log_softmax_row<T>(logits.value().row(i), lq);
    detail::log_softmax_row<T>(reference.row(i), lp);
    if (!reference_first) std::swap(lq, lp);
    for (std::size_t j = 0; j < v; ++j) total += std::exp(lp[j]) * (lp[j] - lq[j]);
  }
  const std::size_t il = logits.id;
  return logits.tape->record(
      Tensor<T>({1}, static_cast<T>(total / static_cast<double>(r))), logits.requires_grad(),
      [il, r, v, reference, reference_first](Tape<T>& t, std::size_t self) {
        const double g = static_cast<double>(t.grad(self)[0]) / static_cast<double>(r);
        Tensor<T>& gl = t.grad_buffer(il);
        std::vector<double> ls, lr;
        for (std::size_t i = 0; i < r; ++i) {
          detail::log_softmax_row<T>(t.value(il).row(i), ls);
          detail::log_softmax_row<T>(reference.row(i), lr);
          if (reference_first) {
            // d/dz sum p log(p/q) = q - p
            for (std::size_t j = 0; j < v; ++j)
              gl(i, j) += static_cast<T>(g * (std::exp(ls[j]) - std::exp(lr[j])));
          } else {
            // d/dz sum q log(q/p) = q * (log q - log p - KL)
            double kl = 0.0;
            for (std::size_t j = 0; j < v; ++j) kl += std::exp(ls[j]) * (ls[j] - lr[j]);
            for (std::size_t j = 0; j < v; ++j)
              gl(i, j) += static_cast<T>(g * std::exp(ls[j]) * (ls[j] - lr[j] - kl));
          }
        }
      },
      "kl_divergence");
}

// Mean of scalar vars.
template <class T>
Var<T> mean(const std::vector<Var<T>>& scalars) {
  if (scalars.empty()) throw ShapeError("mean: no terms");
  double s = 0.0;
  bool needs = false;
  std::vector<std::size_t> ids;
  for (const auto& v : scalars) {
    if (v.value().size() != 1) throw ShapeError("mean: terms must be scalars");
    s += v.value()[0];
    needs = needs || v.requires_grad();
    ids.push_back(v.id);
  }
  const T inv = T{1} / static_cast<T>(scalars.size());
  return scalars.front().tape->record(
      Tensor<T>({1}, static_cast<T>(s / static_cast<double>(scalars.size()))), needs,
      [ids = std::move(ids), inv](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] * inv;
        for (std::size_t id : ids)
          if (t.requires_grad(id)) t.grad_buffer(id)[0] += g;
      },
      "mean");
}

}  // namespace ops
}  // namespace kvlatent
