#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mvapad/error.hpp"
#include "mvapad/image.hpp"
#include "mvapad/label.hpp"
#include "mvapad/tensor.hpp"

namespace mvapad {

// ---------------------------------------------------------------------------
// Manifests
//
// CSV with header `path,label,database,sensor,environment`. Lines starting
// with `#` are comments and may carry `key = value` metadata such as the
// generator configuration. Relative paths resolve against the manifest's
// directory.

class ManifestColumnError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ManifestLabelError : public FormatError {
 public:
  using FormatError::FormatError;
};
class EmptyManifestError : public FormatError {
 public:
  using FormatError::FormatError;
};
class DuplicateSampleError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

enum class Environment { controlled, uncontrolled };

std::string to_string(Environment env);

struct Sample {
  std::string path;
  Label label = Label::bonafide;
  std::string database;
  std::string sensor;
  Environment environment = Environment::controlled;
};

struct Manifest {
  static constexpr int kFormatVersion = 1;

  std::vector<Sample> samples;
  /// Comment lines without the leading `#`, in file order.
  std::vector<std::string> comments;
  /// Directory that relative sample paths resolve against.
  std::string base_dir;

  std::size_t size() const { return samples.size(); }
  std::size_t count(Label label) const;
  /// Database ids in order of first appearance.
  std::vector<std::string> databases() const;
  std::string resolve(const Sample& s) const;
};

/// Throws EmptyManifestError, ManifestColumnError, ManifestLabelError (soft
/// lenses included), FormatError, or DuplicateSampleError, each naming the
/// offending line.
Manifest parse_manifest(const std::string& text, const std::string& source = "<manifest>");
Manifest load_manifest(const std::string& path);
std::string format_manifest(const Manifest& manifest);
void save_manifest(const std::string& path, const Manifest& manifest);

/// Throws DuplicateSampleError on a repeated path and ContractError when a
/// class is missing.
void require_trainable(const Manifest& manifest, const std::string& what);

// ---------------------------------------------------------------------------
// In-memory image sets

struct ImageSet {
  Tensor images;  ///< [N,1,S,S] in [0,1]
  std::vector<int> labels;
  std::vector<std::string> paths;  ///< as written in the manifest

  std::size_t size() const { return labels.size(); }
};

/// Decodes every sample, resized to size x size.
ImageSet load_images(const Manifest& manifest, std::size_t size, DType dtype = DType::f32);

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Per-profile appearance: additive brightness offset, box-blur radius,
/// Gaussian noise sigma, and the pitch of the attack lattice in pixels.
struct SynthProfile {
  char id = 'A';
  double brightness_offset = 0.0;
  std::size_t blur_radius = 0;
  double noise_sigma = 0.01;
  double lattice_pitch = 5.0;
  Environment environment = Environment::controlled;
};

/// Profiles A, B, C. Throws ContractError for any other id.
SynthProfile synth_profile(char id);

inline constexpr int kSynthVersion = 1;

struct SynthConfig {
  std::size_t n_per_class = 100;
  char profile = 'A';
  std::uint64_t seed = 0;
  std::size_t size = 64;
};

/// Renders one image. Bonafide: dark pupil, iris ring with radial and smooth
/// angular texture, bright sclera. Attack: the same construction overlaid
/// with a rotated periodic dot lattice inside the iris disc. The result is a
/// pure function of (profile, label, seed, size).
GrayImage synth_image(const SynthProfile& profile, Label label, std::uint64_t seed, std::size_t size);

/// Writes `n_per_class` images per class as PGM files under `out_dir` plus
/// `out_dir/manifest.csv` and returns the manifest. The database id is the
/// profile letter; the generator configuration is recorded in comments.
Manifest synth_generate(const SynthConfig& config, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Protocol splits

struct Split {
  Manifest train;
  std::vector<Manifest> tests;
  std::vector<std::string> test_names;
};

/// Train on every sample of `train_db`; one test manifest per other database.
/// Throws ContractError when `train_db` is absent.
Split split_cross_database(const Manifest& manifest, const std::string& train_db);

/// Seeded split within one database, stratified by label: each class
/// contributes round(count * train_fraction) samples to train. Manifest
/// order is kept inside both parts.
Split split_intra_database(const Manifest& manifest, const std::string& database, double train_fraction,
                           std::uint64_t seed);

/// Throws ContractError if any test manifest shares a path with train, or a
/// cross-database test contains `train_db` (pass empty to skip that check).
void require_disjoint(const Split& split, const std::string& train_db = "");

}  // namespace mvapad
