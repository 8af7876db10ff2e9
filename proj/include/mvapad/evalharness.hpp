#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mvapad/data.hpp"
#include "mvapad/mvanet.hpp"
#include "mvapad/network_spec.hpp"
#include "mvapad/optim.hpp"

namespace mvapad {

// ---------------------------------------------------------------------------
// Metrics

struct Decision {
  std::string path;
  Label label = Label::bonafide;
  Label predicted = Label::bonafide;
  double score = 0.0;  ///< attack probability
};

/// Rates are percentages. A rate whose class is absent from the test set is
/// undefined (std::nullopt), and so is the ACER that depends on it.
struct EvalReport {
  std::string train_db;
  std::string test_db;
  std::size_t n_attack = 0;
  std::size_t n_bonafide = 0;
  std::size_t attack_as_bonafide = 0;
  std::size_t bonafide_as_attack = 0;
  std::optional<double> apcer;
  std::optional<double> bpcer;
  std::optional<double> acer;
  double accuracy = 0.0;  ///< overall, 100 * correct / total
};

/// APCER = attacks accepted as bonafide / attacks, BPCER = bonafide rejected
/// as attacks / bonafide, ACER = (APCER + BPCER) / 2. Throws ContractError on
/// an empty list.
EvalReport compute_metrics(const std::vector<Decision>& decisions);

/// Mean of the defined ACERs. Throws ContractError when there is none.
double average_acer(const std::vector<EvalReport>& reports);
double average_acer(const std::vector<double>& acers);

/// Two-decimal rounding for human-readable tables. The value is first snapped
/// to 1e-6 so that binary noise does not decide a tie, then ties round down:
/// 7.265 -> 7.26, 6.125 -> 6.12, 6.1251 -> 6.13.
double round2(double percent);
/// `round2` printed with two decimals, or `NA`.
std::string format_rate(const std::optional<double>& percent);

/// `train_db,test_db,apcer,bpcer,acer,accuracy,n_attack,n_bonafide`, full
/// precision, `NA` for undefined rates.
std::string format_reports_csv(const std::vector<EvalReport>& reports);

/// `path,label,predicted,score`.
std::string format_decisions_csv(const std::vector<Decision>& decisions);
std::vector<Decision> parse_decisions_csv(const std::string& text, const std::string& source = "<decisions>");

/// Eval-mode predictions for every sample of `manifest`, in manifest order,
/// decoded at the model input size and run in batches of `batch`.
std::vector<Decision> evaluate(Model& model, const Manifest& manifest, std::size_t batch = 64);

// ---------------------------------------------------------------------------
// Run configuration
//
// Flat `key = value` file:
//   spec            default | small | path to a spec file   (small)
//   protocol        cross | intra                            (cross)
//   manifests       comma-separated manifest paths           (required)
//   train_databases comma-separated fold subset              (all)
//   train_fraction  intra-database train share in (0,1)      (0.5)
//   epochs          required, may be 0
//   batch, lr, beta1, beta2, eps, weight_decay, seed, dtype (f32|f64),
//   eval_batch, out
// Relative paths resolve against the directory of the config file.

enum class Protocol { cross, intra };

std::string to_string(Protocol p);

struct RunConfig {
  std::string spec_choice = "small";
  NetworkSpec spec = NetworkSpec::small();
  Protocol protocol = Protocol::cross;
  std::vector<std::string> manifests;
  std::vector<std::string> train_databases;
  double train_fraction = 0.5;
  std::optional<std::size_t> epochs;
  std::size_t batch = 32;
  AdamConfig adam;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  std::size_t eval_batch = 64;
  std::string out_dir;

  /// Canonical text form; parse_run_config(to_text()) reproduces the config.
  std::string to_text() const;
};

/// Throws FormatError on unknown keys or malformed values and
/// ValidationError when a referenced file does not exist or `epochs` is
/// missing.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>",
                           const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

/// All manifests merged in file order.
Manifest load_run_manifests(const RunConfig& config);

/// Independent stream for (seed, purpose, fold).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::size_t fold);

// ---------------------------------------------------------------------------
// Protocol execution
//
// Output layout under config.out_dir:
//   config.txt                 resolved configuration
//   reports.csv                one row per (train, test) pair
//   averages.csv               train_db,average_acer,n_tests
//   summary.txt                two-decimal tables and any fold failures
//   fold_<db>/model.ckpt       trained weights and optimizer state
//   fold_<db>/training_log.csv per-epoch loss, accuracy and wall time
//   fold_<db>/decisions_<test>.csv

struct FoldResult {
  std::string train_db;
  std::vector<EvalReport> reports;
  std::vector<std::vector<Decision>> decisions;  ///< parallel to reports
  std::vector<EpochLog> log;
  std::optional<std::string> error;  ///< set when the fold failed
};

struct ProtocolResult {
  std::vector<FoldResult> folds;

  std::vector<EvalReport> reports() const;
  bool all_succeeded() const;
};

/// Runs every fold; a fold that throws is recorded and the others continue.
/// Progress goes to `log` when given.
ProtocolResult run_protocol(const RunConfig& config, std::ostream* log = nullptr);

/// The human-readable summary written to summary.txt.
std::string format_summary(const RunConfig& config, const ProtocolResult& result);

/// Trains one model on `train` following `config` (model and shuffle seeds
/// derived for `fold`), writing the checkpoint and training log to `dir`.
Model train_model(const RunConfig& config, const Manifest& train, std::size_t fold, const std::string& dir,
                  std::vector<EpochLog>* log_out = nullptr, std::ostream* log = nullptr);

}  // namespace mvapad
