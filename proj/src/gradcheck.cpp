#include "mvapad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mvapad/rng.hpp"

namespace mvapad {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {
double eval_scalar(const std::function<Var()>& fn) {
  const Var out = fn();
  if (out.value().numel() != 1) {
    throw ContractError("gradcheck: function output has shape " + shape_string(out.shape()) + ", expected a scalar");
  }
  return out.value().item();
}
}  // namespace

GradcheckReport gradcheck(const std::function<Var()>& fn, const std::vector<std::pair<std::string, Var>>& leaves,
                          const GradcheckOptions& options) {
  for (const auto& [name, leaf] : leaves) {
    if (leaf.dtype() != DType::f64) throw ContractError("gradcheck: input '" + name + "' must be f64");
    if (!leaf.is_leaf() || !leaf.requires_grad()) {
      throw ContractError("gradcheck: input '" + name + "' must be a leaf requiring grad");
    }
    leaf.zero_grad();
  }

  const Var loss = fn();
  if (loss.value().numel() != 1) {
    throw ContractError("gradcheck: function output has shape " + shape_string(loss.shape()) + ", expected a scalar");
  }
  backward(loss);
  const double f0 = loss.value().item();

  GradcheckReport report;
  Rng rng(options.seed);
  NoGradGuard no_grad;
  for (const auto& [name, leaf_ref] : leaves) {
    Var leaf = leaf_ref;
    const Tensor analytic = leaf.grad();
    const std::size_t n = leaf.value().numel();

    // Coordinates in visiting order: all of them, or a lazily drawn random
    // permutation when sampling.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const bool sampled = options.max_coords != 0 && options.max_coords < n;
    const std::size_t wanted = sampled ? options.max_coords : n;

    GradcheckEntry entry;
    entry.name = name;
    auto values = leaf.mutable_value().data<double>();
    for (std::size_t k = 0; k < n && entry.coords_checked < wanted; ++k) {
      if (sampled) std::swap(order[k], order[k + rng.below(n - k)]);
      const std::size_t i = order[k];
      const double original = values[i];
      values[i] = original + options.eps;
      const double plus = eval_scalar(fn);
      values[i] = original - options.eps;
      const double minus = eval_scalar(fn);
      values[i] = original;

      if (options.skip_kinks) {
        const double right = (plus - f0) / options.eps;
        const double left = (f0 - minus) / options.eps;
        if (relative_error(right, left, options.floor) > options.tol) {
          ++entry.kinks_skipped;
          continue;
        }
      }
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic.at(i);
      double err = relative_error(a, numeric, options.floor);
      if (std::isnan(err)) err = INFINITY;
      if (entry.coords_checked == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.worst_analytic = a;
        entry.worst_numeric = numeric;
      }
      ++entry.coords_checked;
    }
    // Every coordinate sat on a kink: nothing was verified.
    if (n > 0 && entry.coords_checked == 0) entry.max_rel_error = INFINITY;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.inputs.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

GradcheckReport gradcheck(const std::function<Var(const std::vector<Var>&)>& fn, const std::vector<Tensor>& inputs,
                          double eps, double tol) {
  std::vector<Var> vars;
  std::vector<std::pair<std::string, Var>> named;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    vars.emplace_back(inputs[i], true);
    named.emplace_back("input" + std::to_string(i), vars.back());
  }
  GradcheckOptions options;
  options.eps = eps;
  options.tol = tol;
  return gradcheck([&] { return fn(vars); }, named, options);
}

}  // namespace mvapad
