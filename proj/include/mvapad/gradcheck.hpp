#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mvapad/autograd.hpp"

namespace mvapad {

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-12);

struct GradcheckOptions {
  double eps = 1e-6;
  double tol = 1e-5;
  /// Coordinates checked per input; 0 checks every element. When limited,
  /// coordinates are drawn without replacement from `seed`.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error. Gradients far below it are
  /// compared absolutely, to within tol * floor.
  double floor = 1e-12;
  /// Skip (and, when sampling, replace) coordinates where the one-sided
  /// slopes (f(x+eps) - f(x)) / eps and (f(x) - f(x-eps)) / eps disagree by
  /// more than tol relative to max(|slope|, floor): a ReLU or max-pool switch
  /// lies within eps, where the central difference is not a derivative.
  bool skip_kinks = false;
};

struct GradcheckEntry {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t kinks_skipped = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> inputs;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares the recorded adjoints of `leaves` against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps). `fn` must rebuild the graph from the
/// current leaf values on every call and return a scalar. Leaves must be f64
/// and are restored bit-exactly afterwards.
GradcheckReport gradcheck(const std::function<Var()>& fn, const std::vector<std::pair<std::string, Var>>& leaves,
                          const GradcheckOptions& options = {});

/// Convenience form over plain input tensors, checked exhaustively.
GradcheckReport gradcheck(const std::function<Var(const std::vector<Var>&)>& fn, const std::vector<Tensor>& inputs,
                          double eps = 1e-6, double tol = 1e-5);

}  // namespace mvapad
