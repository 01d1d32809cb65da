#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "kvlatent/error.hpp"
#include "kvlatent/tape.hpp"

namespace kvlatent {

// Floor on the denominator of the relative error, so coordinates whose true
// derivative is ~0 are judged on absolute error instead.
inline constexpr double kGradCheckFloor = 1e-4;

using ScalarFn = std::function<Var<double>(Var<double>)>;

// Max over coordinates of |tape - fd| / max(|tape|, |fd|, floor), with fd the
// central difference (f(x + eps) - f(x - eps)) / 2 eps.
inline double grad_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-5) {
  if (eps < 1e-6 || eps > 1e-3) throw ConfigError("grad_check: eps must lie in [1e-6, 1e-3]");
  Tensor<double> analytic;
  {
    Tape<double> tape;
    Var<double> in = tape.leaf(x, true);
    Var<double> out = f(in);
    if (out.value().size() != 1)
      throw ShapeError("grad_check: function output is " + shape_str(out.shape()) +
                       ", not a scalar");
    tape.backward(out);
    analytic = in.grad();
  }
  auto eval = [&](const Tensor<double>& at) {
    Tape<double> tape;
    return f(tape.leaf(at)).value()[0];
  };
  double worst = 0.0;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval(probe);
    probe[i] = x[i] - eps;
    const double down = eval(probe);
    probe[i] = x[i];
    const double fd = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), kGradCheckFloor});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace kvlatent
