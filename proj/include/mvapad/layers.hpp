#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvapad/autograd.hpp"
#include "mvapad/rng.hpp"

namespace mvapad {

/// floor((in + 2 pad - k) / stride) + 1; throws DimensionError when < 1.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);
/// Unpadded window count; throws DimensionError when the window exceeds the input.
std::size_t pool_output_size(std::size_t in, std::size_t kernel, std::size_t stride);

// ---------------------------------------------------------------------------
// Differentiable functional forms.

/// Cross-correlation (no kernel flip). x [B,inC,H,W], weight [outC,inC,k,k], bias [outC].
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad);

/// Gradient goes to the first maximum of each window in row-major scan order.
Var maxpool2d(const Var& x, std::size_t kernel, std::size_t stride);
Var avgpool2d(const Var& x, std::size_t kernel, std::size_t stride);

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> biased_var;
  std::size_t count = 0;  ///< values reduced per channel
};

/// Batch-statistics normalization of [B,C] or [B,C,H,W] per channel C with
/// biased (1/N) variance. Writes the statistics to `stats` when given.
Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats = nullptr);
/// Normalization by fixed running statistics.
Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps);

/// x * mask with a constant mask of identical shape.
Var apply_mask(const Var& x, const Tensor& mask);

/// x [B,in] * weight[out,in]^T + bias[out]
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Mean over the batch of -log softmax(logits)[label]. logits [B,K], labels in [0,K).
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);

/// Row-wise softmax of a [B,K] tensor (no graph).
Tensor softmax(const Tensor& logits);

// ---------------------------------------------------------------------------
// Parameterized layers. Each owns its parameters as leaf Vars.

using NamedParameters = std::vector<std::pair<std::string, Var>>;

/// Kaiming-uniform bound for ReLU fan-in: sqrt(6 / fan_in).
double kaiming_uniform_bound(std::size_t fan_in);
Tensor kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng, DType dtype);

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
              std::size_t pad, Rng& rng, DType dtype = DType::f32);

  Var forward(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
  void collect(const std::string& prefix, NamedParameters& out) const;

  Var weight;
  Var bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(std::size_t channels, DType dtype = DType::f32);

  /// Train mode normalizes by batch statistics and folds them into the
  /// running estimates (unbiased variance, momentum-weighted).
  Var forward(const Var& x, Mode mode);
  void collect(const std::string& prefix, NamedParameters& out) const;

  Var gamma;
  Var beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Inverted dropout: train mode keeps units with probability 1 - rate and
/// scales them by 1 / (1 - rate); eval mode is the identity.
class DropoutLayer {
 public:
  DropoutLayer() = default;
  DropoutLayer(double rate, Rng rng);

  Var forward(const Var& x, Mode mode);
  /// Draws the next mask for a tensor of `shape` from the layer's stream.
  Tensor draw_mask(const Shape& shape, DType dtype);

  double rate = 0.0;
  Rng rng;
};

class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::size_t in_features, std::size_t out_features, Rng& rng, DType dtype = DType::f32);

  Var forward(const Var& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, NamedParameters& out) const;

  Var weight;
  Var bias;
};

}  // namespace mvapad
