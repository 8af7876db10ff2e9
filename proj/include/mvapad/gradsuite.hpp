#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mvapad/gradcheck.hpp"
#include "mvapad/network_spec.hpp"

namespace mvapad {

/// Small-spec variant that fits a 32x32 input: conv1 stride 1, giving the walk
/// 32 -> 26 -> 12 -> 12 -> 5 -> 5 -> 5 -> 5 -> 2 -> 1.
NetworkSpec gradcheck_spec();

/// Full-model check: f64 model built from `seed`, random [batch,C,S,S] input
/// in [-1,1], alternating labels, train mode. The checked scalar is the
/// cross-entropy plus a fixed random weighted sum of the logits; the second
/// term keeps the gradient O(1) when the softmax saturates. Dropout
/// masks are held fixed across evaluations by restoring the dropout streams
/// before every forward pass. Biases, BN shifts and BN scales are redrawn at
/// random so the check runs at a generic point rather than at the zero-bias
/// initialization. Every parameter tensor is a checked leaf.
///
/// The suite runs it with kModelGradFloor and kink skipping: a ReLU channel
/// that is active on every sample feeds batchnorm a shift its output cannot
/// see, so that bias has a structurally zero gradient and the finite
/// difference is pure rounding noise.
GradcheckReport model_gradcheck(const NetworkSpec& spec, std::uint64_t seed, std::size_t batch,
                                const GradcheckOptions& options);

inline constexpr double kModelGradFloor = 1e-3;

struct SuiteOptions {
  std::size_t instances = 20;
  std::uint64_t seed = 1;
  double tol = 1e-4;
  /// Parameter coordinates sampled per tensor in each full-model instance.
  std::size_t model_coords = 3;
  bool include_model = true;
};

struct SuiteResult {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Gradient checks for every layer (conv 11x11 stride 4, conv 3x3, max pool,
/// average pool, train-mode batchnorm, linear, fixed-mask dropout, softmax
/// cross-entropy) and optionally the whole network on gradcheck_spec().
/// Layer outputs are reduced by a fixed random weighted sum so that every
/// output element carries an O(1) gradient.
std::vector<SuiteResult> run_gradcheck_suite(const SuiteOptions& options = {});

}  // namespace mvapad
