#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvapad/autograd.hpp"
#include "mvapad/label.hpp"
#include "mvapad/layers.hpp"
#include "mvapad/network_spec.hpp"
#include "mvapad/rng.hpp"

namespace mvapad {

struct ConvBlock {
  Conv2dLayer conv;
  BatchNormLayer bn;
  bool pool_after = false;
};

/// dropout -> fc1 -> ReLU -> dropout -> fc2 -> ReLU -> fc3
struct Branch {
  DropoutLayer drop1;
  LinearLayer fc1;
  DropoutLayer drop2;
  LinearLayer fc2;
  LinearLayer fc3;
};

struct ForwardOptions {
  /// Keep every base stage output in ForwardResult::stages.
  bool record_stages = false;
  /// Per-branch switch for gradient flow into the shared base feature. A
  /// disabled branch sees a detached copy of the feature, so its path adds
  /// nothing to the base gradients. Empty means all enabled.
  std::vector<bool> branch_gradient;
};

struct ForwardResult {
  Var logits;                      ///< [B, head_out]
  std::vector<Var> branch_logits;  ///< N x [B, head_out]
  Var fused;                       ///< [B, N * head_out]
  Var features;                    ///< flattened average-pool output [B, F]
  /// Named base stages (conv1.., pool1.., avgpool) when recorded.
  std::vector<std::pair<std::string, Var>> stages;
  /// Per branch: post-ReLU outputs of fc1 and fc2.
  std::vector<std::vector<Var>> branch_hidden;
};

struct Prediction {
  Label label = Label::attack;
  double score = 0.5;  ///< softmax probability of the attack class
};

/// Argmax over (bonafide, attack) logits; exact ties go to attack.
Prediction decide(double bonafide_logit, double attack_logit);

/// Everything a checkpoint file stores. The model fills the spec, dtype,
/// tensors and RNG states; callers may append further named tensors (e.g.
/// optimizer moments) and the optimizer step.
struct CheckpointData {
  NetworkSpec spec;
  DType dtype = DType::f32;
  std::uint64_t epoch = 0;
  std::vector<std::pair<std::string, Rng::State>> rng_states;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::optional<std::uint64_t> optimizer_step;

  const Tensor* find(const std::string& name) const;
};

inline constexpr int kCheckpointVersion = 1;

/// Text header followed by raw little-endian payloads in header order.
/// Throws IoError when the file cannot be written.
void write_checkpoint(const std::string& path, const CheckpointData& data);
/// Throws CheckpointCorruptError, CheckpointVersionError, or IoError.
CheckpointData read_checkpoint(const std::string& path);

class Model {
 public:
  /// Parameters are drawn from `rng` in layer order (conv blocks, branches,
  /// head); each dropout layer then receives its own split stream.
  Model(const NetworkSpec& spec, Rng& rng, DType dtype = DType::f32);
  Model(const NetworkSpec& spec, std::uint64_t seed, DType dtype = DType::f32);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const NetworkSpec& spec() const { return spec_; }
  DType dtype() const { return dtype_; }
  std::size_t feature_width() const { return feature_width_; }

  /// x: [B, input_channels, input_size, input_size]; converted to the model
  /// dtype when needed. Train mode updates BN running statistics and draws
  /// fresh dropout masks, one independent mask per branch.
  ForwardResult forward(const Tensor& x, Mode mode, const ForwardOptions& options = {});
  ForwardResult forward(const Var& x, Mode mode, const ForwardOptions& options = {});

  /// Cross-entropy on the head logits only.
  Var loss(const ForwardResult& out, std::span<const int> labels) const;

  /// Eval-mode decisions without recording a graph.
  std::vector<Prediction> predict(const Tensor& x);

  NamedParameters named_parameters() const;
  std::vector<Var> parameters() const;
  /// Trainable element count (BN running statistics excluded).
  std::size_t parameter_count() const;
  std::vector<std::pair<std::string, Tensor*>> named_buffers();
  std::vector<std::pair<std::string, Rng*>> named_rngs();

  std::vector<ConvBlock>& blocks() { return blocks_; }
  std::vector<Branch>& branches() { return branches_; }
  LinearLayer& head() { return head_; }

  CheckpointData to_checkpoint(std::uint64_t epoch = 0);
  /// Throws CheckpointShapeError when a tensor is missing or does not match
  /// the shapes implied by the embedded spec.
  static Model from_checkpoint(const CheckpointData& data);

  void save(const std::string& path, std::uint64_t epoch = 0);
  static Model load(const std::string& path);

 private:
  NetworkSpec spec_;
  DType dtype_;
  std::size_t feature_width_ = 0;
  std::vector<ConvBlock> blocks_;
  std::vector<Branch> branches_;
  LinearLayer head_;
};

/// Writes per-channel feature images or feature CSVs for one batch.
///
/// `layer` is `conv1`..`convK` (post-BN block outputs, one min-max normalized
/// PGM per sample and channel, named `<layer>_s<sample>_c<channel>.pgm`),
/// `base` (one CSV row per sample of the flattened average-pool feature), or
/// `branch<i>` (CSV of the branch's fc1 and fc2 activations). A constant map
/// is written as all zeros. Returns the written paths.
std::vector<std::string> export_features(Model& model, const Tensor& x, const std::string& layer,
                                         const std::string& out_dir);

}  // namespace mvapad
