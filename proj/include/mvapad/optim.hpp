#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mvapad/data.hpp"
#include "mvapad/layers.hpp"
#include "mvapad/mvanet.hpp"

namespace mvapad {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Per-parameter moments (parameter shape and dtype, zero at start) and the
/// step counter.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  /// Stores moments as `adam.m.<name>` / `adam.v.<name>` plus the step.
  void export_to(CheckpointData& data, const NamedParameters& params) const;
  /// Inverse of export_to. Throws CheckpointShapeError on missing or
  /// mis-shaped moments.
  void import_from(const CheckpointData& data, const NamedParameters& params);
};

/// One Adam step with coupled weight decay, per element:
///   g <- g + wd * theta
///   m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// Arithmetic is in double; results are stored in the parameter dtype. All
/// gradients are checked before anything is updated: a non-finite entry
/// throws RuntimeFailure naming the parameter and leaves the state untouched.
void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
               const std::vector<std::string>& names = {});

/// Steps the leaves of `params` using their recorded gradients; a parameter
/// with no gradient is treated as having a zero gradient.
void adam_step(const NamedParameters& params, AdamState& state);

struct TrainConfig {
  std::size_t batch = 32;
  AdamConfig adam;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;  ///< percent, from the train-mode forward passes
  double wall_seconds = 0.0;
};

/// Mini-batch training: each epoch visits the set in a fresh order drawn
/// from Rng(seed); a final partial batch is kept, and a batch larger than the
/// set becomes one batch of the whole set. Each step runs a train-mode
/// forward pass, the head cross-entropy, backward and one Adam step.
/// `state` carries optimizer moments across calls when given. `on_epoch` is
/// called after every epoch.
std::vector<EpochLog> train_epochs(Model& model, const ImageSet& data, const TrainConfig& config,
                                   AdamState* state = nullptr,
                                   const std::function<void(const EpochLog&)>& on_epoch = {});

/// `epoch,mean_loss,train_accuracy,wall_seconds` with full precision.
std::string format_training_log(const std::vector<EpochLog>& log);

}  // namespace mvapad
