#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmsd/numerics/rng.hpp"
#include "fmsd/numerics/tape.hpp"

namespace fmsd::nn {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  /// Denominator floor so gradients that are both ~0 do not blow up the ratio.
  double abs_floor = 1e-7;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  double max_rel_error = 0;
  double max_abs_analytic = 0;
  double max_abs_numeric = 0;
  std::size_t coords = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t coords = 0;
  std::map<std::string, ParamCheck> per_param;
};

/// Compares tape gradients of a scalar computation against central finite differences
/// (f(p+ε) − f(p−ε)) / 2ε. `build` records the computation on the given tape and returns the loss.
template <typename Build>
GradCheckResult grad_check(ParameterStore<double>& params, Build&& build, GradCheckOptions opt = {}) {
  auto evaluate = [&] {
    Tape<double> tape(false);
    return build(tape).item();
  };

  params.zero_grad();
  double f0;
  {
    Tape<double> tape;
    auto loss = build(tape);
    f0 = loss.item();
    tape.backward(loss);
  }
  if (evaluate() != f0) throw std::runtime_error("grad_check: computation is not deterministic");

  Rng rng(opt.seed, 0x67636b);
  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords_per_param && coords.size() > opt.max_coords_per_param) {
      for (std::size_t i = 0; i < opt.max_coords_per_param; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(opt.max_coords_per_param);
    }
    ParamCheck pc;
    for (auto c : coords) {
      const double orig = p.value[c];
      p.value[c] = orig + opt.eps;
      const double fp = evaluate();
      p.value[c] = orig - opt.eps;
      const double fm = evaluate();
      p.value[c] = orig;
      const double numeric = (fp - fm) / (2 * opt.eps);
      const double analytic = p.grad[c];
      const double denom = std::max(std::abs(analytic) + std::abs(numeric), opt.abs_floor);
      const double rel = std::abs(analytic - numeric) / denom;
      pc.max_rel_error = std::max(pc.max_rel_error, rel);
      pc.max_abs_analytic = std::max(pc.max_abs_analytic, std::abs(analytic));
      pc.max_abs_numeric = std::max(pc.max_abs_numeric, std::abs(numeric));
      ++pc.coords;
    }
    result.coords += pc.coords;
    if (pc.max_rel_error >= result.max_rel_error) {
      result.max_rel_error = pc.max_rel_error;
      result.worst_param = p.name;
    }
    result.per_param[p.name] = pc;
  }
  return result;
}

}  // namespace fmsd::nn
