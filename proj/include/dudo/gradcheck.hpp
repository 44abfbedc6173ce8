#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dudo/ops.hpp"

namespace dudo {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_input;
};

/// Compares reverse-mode gradients against central differences.
///
/// `f` recomputes the checked function from the current values of `inputs` (leaf vars that
/// require grad). The tensor output is reduced with a fixed random projection u, so the check
/// covers the full vector-Jacobian product: for each input and each random direction v,
/// (L(x + eps v) - L(x - eps v)) / (2 eps) is compared with <dL/dx, v>.
///
/// The relative error divides by max(|fd|, |ad|, floor). Inputs whose exact directional
/// derivative is zero leave only round-off in fd, so `floor` should sit above that noise.
template <class F>
GradCheckReport grad_check(F&& f, std::vector<Var<double>> inputs, std::vector<std::string> names = {},
                           double epsilon = 1e-6, std::uint64_t seed = 1, int directions = 2,
                           double floor = 1e-8) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw ParameterError("grad_check epsilon must lie in [1e-6, 1e-3]");
  for (auto& in : inputs) {
    if (!in.requires_grad()) throw ParameterError("grad_check inputs must require gradients");
    if (!in.value().all_finite()) throw NumericalError("grad_check input is not finite");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;

  Var<double> out = f();
  check_graph_finite(out);
  Tensor<double> proj(out.shape());
  for (auto& v : proj.data()) v = normal(rng);
  for (auto& in : inputs) in.zero_grad();
  Var<double> loss = weighted_sum(out, proj);
  backward(loss);

  auto objective = [&]() {
    NoGradGuard guard;
    Var<double> y = f();
    if (!y.value().all_finite()) throw NumericalError("non-finite value produced by op '" + y.op() + "'");
    double acc = 0;
    for (std::size_t i = 0; i < proj.size(); ++i) acc += y.value()[i] * proj[i];
    return acc;
  };

  GradCheckReport report;
  for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
    Var<double>& in = inputs[idx];
    const Tensor<double> grad = in.grad();
    Tensor<double>& x = in.mutable_value();
    const Tensor<double> original = x;
    for (int d = 0; d < directions; ++d) {
      Tensor<double> dir(x.shape());
      for (auto& v : dir.data()) v = normal(rng);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = original[i] + epsilon * dir[i];
      const double up = objective();
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = original[i] - epsilon * dir[i];
      const double down = objective();
      x = original;
      const double fd = (up - down) / (2.0 * epsilon);
      double ad = 0;
      for (std::size_t i = 0; i < x.size(); ++i) ad += grad[i] * dir[i];
      const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), floor});
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = idx < names.size() ? names[idx] : "input " + std::to_string(idx);
      }
    }
  }
  return report;
}

}  // namespace dudo
