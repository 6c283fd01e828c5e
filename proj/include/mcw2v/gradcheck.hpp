#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mcw2v/autograd.hpp"

namespace mcw2v {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates sampled per parameter; smaller tensors are checked exhaustively.
  std::size_t coords_per_param = 24;
  std::uint64_t seed = 0;
};

// Compares reverse-mode gradients of a scalar function of the store's
// parameters against central finite differences. `fn` builds the function
// on the graph it is given and returns the scalar output. The error of one
// coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename Fn>
GradCheckResult finite_diff_check(ParamStore<double>& store, Fn&& fn, GradCheckOptions opts = {}) {
  auto evaluate = [&]() {
    ag::Graph<double> g(false);
    ag::Var<double> out = fn(g);
    if (out.value().size() != 1) throw Error(Errc::NotScalar, "gradcheck function must return a scalar");
    return out.value()[0];
  };

  const double first = evaluate();
  const double second = evaluate();
  if (first != second && !(std::isnan(first) && std::isnan(second))) {
    throw Error(Errc::NonDeterministicFunction, "two forward passes differ");
  }

  store.zero_grad();
  {
    ag::Graph<double> g;
    ag::Var<double> out = fn(g);
    g.backward(out);
  }

  GradCheckResult result;
  Rng rng(opts.seed);
  for (std::size_t p = 0; p < store.size(); ++p) {
    Parameter<double>& param = store[p];
    const std::size_t n = param.value.size();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > opts.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.coords_per_param);
    }
    for (std::size_t i : coords) {
      const double saved = param.value[i];
      param.value[i] = saved + opts.eps;
      const double plus = evaluate();
      param.value[i] = saved - opts.eps;
      const double minus = evaluate();
      param.value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * opts.eps);
      const double analytic = param.grad[i];
      const double err =
          std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++result.coordinates;
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? INFINITY : err;
        result.worst_param = param.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace mcw2v
