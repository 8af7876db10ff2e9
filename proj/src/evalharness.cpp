#include "mvapad/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "mvapad/keyvalue.hpp"

namespace mvapad {

namespace fs = std::filesystem;

namespace {

std::string full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string full(const std::optional<double>& v) { return v ? full(*v) : "NA"; }

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

EvalReport compute_metrics(const std::vector<Decision>& decisions) {
  if (decisions.empty()) throw ContractError("compute_metrics: no decisions");
  EvalReport r;
  std::size_t correct = 0;
  for (const auto& d : decisions) {
    if (d.label == Label::attack) {
      ++r.n_attack;
      if (d.predicted == Label::bonafide) ++r.attack_as_bonafide;
    } else {
      ++r.n_bonafide;
      if (d.predicted == Label::attack) ++r.bonafide_as_attack;
    }
    if (d.label == d.predicted) ++correct;
  }
  if (r.n_attack > 0) r.apcer = 100.0 * static_cast<double>(r.attack_as_bonafide) / static_cast<double>(r.n_attack);
  if (r.n_bonafide > 0) {
    r.bpcer = 100.0 * static_cast<double>(r.bonafide_as_attack) / static_cast<double>(r.n_bonafide);
  }
  if (r.apcer && r.bpcer) r.acer = (*r.apcer + *r.bpcer) / 2.0;
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(decisions.size());
  return r;
}

double average_acer(const std::vector<double>& acers) {
  if (acers.empty()) throw ContractError("average_acer: no defined ACER to average");
  double sum = 0.0;
  for (double a : acers) sum += a;
  return sum / static_cast<double>(acers.size());
}

double average_acer(const std::vector<EvalReport>& reports) {
  std::vector<double> acers;
  for (const auto& r : reports) {
    if (r.acer) acers.push_back(*r.acer);
  }
  return average_acer(acers);
}

double round2(double percent) {
  const double snapped = std::round(percent * 100.0 * 1e6) / 1e6;
  return std::ceil(snapped - 0.5) / 100.0 + 0.0;  // no negative zero
}

std::string format_rate(const std::optional<double>& percent) {
  if (!percent) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round2(*percent));
  return buf;
}

std::string format_reports_csv(const std::vector<EvalReport>& reports) {
  std::string out = "train_db,test_db,apcer,bpcer,acer,accuracy,n_attack,n_bonafide\n";
  for (const auto& r : reports) {
    out += r.train_db + ',' + r.test_db + ',' + full(r.apcer) + ',' + full(r.bpcer) + ',' + full(r.acer) + ',' +
           full(r.accuracy) + ',' + std::to_string(r.n_attack) + ',' + std::to_string(r.n_bonafide) + '\n';
  }
  return out;
}

std::string format_decisions_csv(const std::vector<Decision>& decisions) {
  std::string out = "path,label,predicted,score\n";
  for (const auto& d : decisions) {
    out += d.path + ',' + to_string(d.label) + ',' + to_string(d.predicted) + ',' + full(d.score) + '\n';
  }
  return out;
}

std::vector<Decision> parse_decisions_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "path,label,predicted,score") {
    throw FormatError(source + ": expected header 'path,label,predicted,score'");
  }
  std::vector<Decision> out;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (trim(line).empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto cols = split(line, ',');
    if (cols.size() != 4) throw FormatError(where + ": expected 4 columns");
    const auto label = parse_label(trim(cols[1]));
    const auto predicted = parse_label(trim(cols[2]));
    if (!label || !predicted) throw FormatError(where + ": unknown label");
    out.push_back({trim(cols[0]), *label, *predicted, parse_double(trim(cols[3]), where + " score")});
  }
  return out;
}

std::vector<Decision> evaluate(Model& model, const Manifest& manifest, std::size_t batch) {
  if (batch == 0) throw ContractError("evaluate: batch size must be positive");
  const std::size_t size = model.spec().input_size;
  std::vector<Decision> out;
  out.reserve(manifest.size());
  for (std::size_t first = 0; first < manifest.size(); first += batch) {
    Manifest chunk;
    chunk.base_dir = manifest.base_dir;
    const std::size_t end = std::min(manifest.size(), first + batch);
    chunk.samples.assign(manifest.samples.begin() + static_cast<std::ptrdiff_t>(first),
                         manifest.samples.begin() + static_cast<std::ptrdiff_t>(end));
    const ImageSet set = load_images(chunk, size, model.dtype());
    const auto preds = model.predict(set.images);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      out.push_back({chunk.samples[i].path, chunk.samples[i].label, preds[i].label, preds[i].score});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

std::string to_string(Protocol p) { return p == Protocol::intra ? "intra" : "cross"; }

namespace {

std::vector<std::string> parse_list(const std::string& value) {
  std::vector<std::string> out;
  for (const auto& item : split(value, ',')) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string resolve_path(const std::string& base_dir, const std::string& path) {
  const fs::path p(path);
  return p.is_absolute() ? path : (fs::path(base_dir) / p).lexically_normal().string();
}

void require_exists(const std::string& path, const std::string& where) {
  if (!fs::exists(path)) throw ValidationError(where + ": file '" + path + "' does not exist");
}

}  // namespace

std::string RunConfig::to_text() const {
  std::string t;
  t += "spec = " + spec_choice + "\n";
  t += "protocol = " + to_string(protocol) + "\n";
  t += "manifests = " + join(manifests) + "\n";
  if (!train_databases.empty()) t += "train_databases = " + join(train_databases) + "\n";
  t += "train_fraction = " + format_double(train_fraction) + "\n";
  if (epochs) t += "epochs = " + std::to_string(*epochs) + "\n";
  t += "batch = " + std::to_string(batch) + "\n";
  t += "lr = " + format_double(adam.lr) + "\n";
  t += "beta1 = " + format_double(adam.beta1) + "\n";
  t += "beta2 = " + format_double(adam.beta2) + "\n";
  t += "eps = " + format_double(adam.eps) + "\n";
  t += "weight_decay = " + format_double(adam.weight_decay) + "\n";
  t += "seed = " + std::to_string(seed) + "\n";
  t += "dtype = " + to_string(dtype) + "\n";
  t += "eval_batch = " + std::to_string(eval_batch) + "\n";
  if (!out_dir.empty()) t += "out = " + out_dir + "\n";
  return t;
}

RunConfig parse_run_config(const std::string& text, const std::string& source, const std::string& base_dir) {
  RunConfig c;
  for (const auto& kv : parse_key_values(text, source)) {
    const std::string where = source + ":" + std::to_string(kv.line) + " " + kv.key;
    const std::string& v = kv.value;
    if (kv.key == "spec") {
      c.spec_choice = v;
      if (v == "default") {
        c.spec = NetworkSpec::full();
      } else if (v == "small") {
        c.spec = NetworkSpec::small();
      } else {
        c.spec_choice = resolve_path(base_dir, v);
        require_exists(c.spec_choice, where);
        c.spec = NetworkSpec::from_text(read_text_file(c.spec_choice));
      }
    } else if (kv.key == "protocol") {
      if (v == "cross") {
        c.protocol = Protocol::cross;
      } else if (v == "intra") {
        c.protocol = Protocol::intra;
      } else {
        throw FormatError(where + ": protocol must be 'cross' or 'intra', got '" + v + "'");
      }
    } else if (kv.key == "manifests") {
      c.manifests.clear();
      for (const auto& m : parse_list(v)) c.manifests.push_back(resolve_path(base_dir, m));
    } else if (kv.key == "train_databases") {
      c.train_databases = parse_list(v);
    } else if (kv.key == "train_fraction") {
      c.train_fraction = parse_double(v, where);
      if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) {
        throw FormatError(where + ": must lie strictly between 0 and 1");
      }
    } else if (kv.key == "epochs") {
      c.epochs = parse_size(v, where);
    } else if (kv.key == "batch") {
      c.batch = parse_size(v, where);
      if (c.batch == 0) throw FormatError(where + ": must be positive");
    } else if (kv.key == "lr") {
      c.adam.lr = parse_double(v, where);
    } else if (kv.key == "beta1") {
      c.adam.beta1 = parse_double(v, where);
    } else if (kv.key == "beta2") {
      c.adam.beta2 = parse_double(v, where);
    } else if (kv.key == "eps") {
      c.adam.eps = parse_double(v, where);
    } else if (kv.key == "weight_decay") {
      c.adam.weight_decay = parse_double(v, where);
    } else if (kv.key == "seed") {
      c.seed = parse_u64(v, where);
    } else if (kv.key == "dtype") {
      if (v == "f32") {
        c.dtype = DType::f32;
      } else if (v == "f64") {
        c.dtype = DType::f64;
      } else {
        throw FormatError(where + ": dtype must be f32 or f64");
      }
    } else if (kv.key == "eval_batch") {
      c.eval_batch = parse_size(v, where);
      if (c.eval_batch == 0) throw FormatError(where + ": must be positive");
    } else if (kv.key == "out") {
      c.out_dir = resolve_path(base_dir, v);
    } else {
      throw FormatError(where + ": unknown key");
    }
  }
  if (c.manifests.empty()) throw ValidationError(source + ": 'manifests' is required");
  for (const auto& m : c.manifests) require_exists(m, source + " manifests");
  if (!c.epochs) throw ValidationError(source + ": 'epochs' is required");
  return c;
}

RunConfig load_run_config(const std::string& path) {
  if (!fs::exists(path)) throw ValidationError("config file '" + path + "' does not exist");
  const fs::path parent = fs::path(path).parent_path();
  return parse_run_config(read_text_file(path), path, parent.empty() ? "." : parent.string());
}

Manifest load_run_manifests(const RunConfig& config) {
  Manifest merged;
  for (const auto& path : config.manifests) {
    Manifest m = load_manifest(path);
    for (auto& s : m.samples) s.path = m.resolve(s);
    merged.samples.insert(merged.samples.end(), m.samples.begin(), m.samples.end());
  }
  // Re-validate across files: the same image listed twice is a duplicate.
  return parse_manifest(format_manifest(merged), "manifests of the run config");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose, std::size_t fold) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s);
  s = h ^ (purpose << 48) ^ static_cast<std::uint64_t>(fold);
  return splitmix64(s);
}

// ---------------------------------------------------------------------------
// Protocol execution

namespace {

enum : std::uint64_t { kInitStream = 1, kShuffleStream = 2, kSplitStream = 3 };

std::string fold_label(const Split& split, std::size_t i, const std::string& train_db, Protocol p) {
  return p == Protocol::intra ? train_db : split.test_names[i];
}

}  // namespace

std::vector<EvalReport> ProtocolResult::reports() const {
  std::vector<EvalReport> out;
  for (const auto& f : folds) out.insert(out.end(), f.reports.begin(), f.reports.end());
  return out;
}

bool ProtocolResult::all_succeeded() const {
  return std::none_of(folds.begin(), folds.end(), [](const FoldResult& f) { return f.error.has_value(); });
}

Model train_model(const RunConfig& config, const Manifest& train, std::size_t fold, const std::string& dir,
                  std::vector<EpochLog>* log_out, std::ostream* log) {
  require_trainable(train, "training manifest");
  config.spec.validate();
  const ImageSet set = load_images(train, config.spec.input_size, config.dtype);
  Model model(config.spec, derive_seed(config.seed, kInitStream, fold), config.dtype);

  TrainConfig tc;
  tc.batch = config.batch;
  tc.adam = config.adam;
  tc.epochs = config.epochs.value_or(0);
  tc.seed = derive_seed(config.seed, kShuffleStream, fold);
  AdamState state;
  state.config = config.adam;
  const auto epochs = train_epochs(model, set, tc, &state, [&](const EpochLog& e) {
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "  epoch %zu/%zu  loss %.4f  train acc %.2f%%  %.1fs\n", e.epoch, tc.epochs,
                    e.mean_loss, e.train_accuracy, e.wall_seconds);
      *log << buf << std::flush;
    }
  });

  fs::create_directories(dir);
  CheckpointData ckpt = model.to_checkpoint(epochs.size());
  state.export_to(ckpt, model.named_parameters());
  write_checkpoint((fs::path(dir) / "model.ckpt").string(), ckpt);
  write_file(fs::path(dir) / "training_log.csv", format_training_log(epochs));
  if (log_out) *log_out = epochs;
  return model;
}

ProtocolResult run_protocol(const RunConfig& config, std::ostream* log) {
  if (config.out_dir.empty()) throw ValidationError("run-protocol: no output directory given");
  const Manifest all = load_run_manifests(config);
  const std::vector<std::string> databases = all.databases();
  std::vector<std::string> train_dbs = config.train_databases.empty() ? databases : config.train_databases;
  for (const auto& db : train_dbs) {
    if (std::find(databases.begin(), databases.end(), db) == databases.end()) {
      throw ValidationError("train database '" + db + "' does not occur in the manifests");
    }
  }
  if (config.protocol == Protocol::cross && databases.size() < 2) {
    throw ValidationError("cross-database protocol needs at least two databases, found " +
                          std::to_string(databases.size()));
  }

  fs::create_directories(config.out_dir);
  const fs::path out(config.out_dir);
  write_file(out / "config.txt", config.to_text());

  ProtocolResult result;
  for (const auto& train_db : train_dbs) {
    // Fold index from the database order, so a fold subset reproduces the
    // matching folds of a full run.
    const auto fold = static_cast<std::size_t>(std::find(databases.begin(), databases.end(), train_db) -
                                               databases.begin());
    FoldResult fr;
    fr.train_db = train_db;
    if (log) *log << "fold " << train_db << " (" << to_string(config.protocol) << ")\n" << std::flush;
    try {
      const Split split = config.protocol == Protocol::cross
                              ? split_cross_database(all, train_db)
                              : split_intra_database(all, train_db, config.train_fraction,
                                                     derive_seed(config.seed, kSplitStream, fold));
      require_disjoint(split, config.protocol == Protocol::cross ? train_db : "");
      const fs::path dir = out / ("fold_" + train_db);
      Model model = train_model(config, split.train, fold, dir.string(), &fr.log, log);
      for (std::size_t i = 0; i < split.tests.size(); ++i) {
        const std::string test_db = fold_label(split, i, train_db, config.protocol);
        auto decisions = evaluate(model, split.tests[i], config.eval_batch);
        EvalReport r = compute_metrics(decisions);
        r.train_db = train_db;
        r.test_db = test_db;
        write_file(dir / ("decisions_" + test_db + ".csv"), format_decisions_csv(decisions));
        if (log) *log << "  test " << test_db << "  ACER " << format_rate(r.acer) << "%  accuracy "
                      << format_rate(r.accuracy) << "%\n" << std::flush;
        fr.reports.push_back(std::move(r));
        fr.decisions.push_back(std::move(decisions));
      }
    } catch (const std::exception& e) {
      fr.error = e.what();
      if (log) *log << "  fold " << train_db << " failed: " << e.what() << '\n' << std::flush;
    }
    result.folds.push_back(std::move(fr));
  }

  write_file(out / "reports.csv", format_reports_csv(result.reports()));
  std::string averages = "train_db,average_acer,n_tests\n";
  for (const auto& f : result.folds) {
    const bool any = std::any_of(f.reports.begin(), f.reports.end(), [](const EvalReport& r) { return r.acer; });
    averages += f.train_db + ',' + (any ? full(average_acer(f.reports)) : "NA") + ',' +
                std::to_string(f.reports.size()) + '\n';
  }
  write_file(out / "averages.csv", averages);
  write_file(out / "summary.txt", format_summary(config, result));
  return result;
}

std::string format_summary(const RunConfig& config, const ProtocolResult& result) {
  std::ostringstream s;
  s << "protocol " << to_string(config.protocol) << ", spec " << config.spec_choice << ", seed " << config.seed
    << ", epochs " << config.epochs.value_or(0) << ", batch " << config.batch << ", lr "
    << format_double(config.adam.lr) << "\n\n";

  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %-10s %8s %8s %8s %9s %8s %10s\n", "train", "test", "APCER", "BPCER", "ACER",
                "accuracy", "attacks", "bonafide");
  s << buf;
  for (const auto& r : result.reports()) {
    std::snprintf(buf, sizeof buf, "%-10s %-10s %8s %8s %8s %9s %8zu %10zu\n", r.train_db.c_str(),
                  r.test_db.c_str(), format_rate(r.apcer).c_str(), format_rate(r.bpcer).c_str(),
                  format_rate(r.acer).c_str(), format_rate(r.accuracy).c_str(), r.n_attack, r.n_bonafide);
    s << buf;
  }

  // ACER matrix: rows train, columns test, last column the row average.
  std::vector<std::string> tests;
  for (const auto& r : result.reports()) {
    if (std::find(tests.begin(), tests.end(), r.test_db) == tests.end()) tests.push_back(r.test_db);
  }
  s << "\nACER (%) by training database\n";
  std::snprintf(buf, sizeof buf, "%-10s", "train");
  s << buf;
  for (const auto& t : tests) {
    std::snprintf(buf, sizeof buf, " %8s", t.c_str());
    s << buf;
  }
  s << "  average\n";
  for (const auto& f : result.folds) {
    std::snprintf(buf, sizeof buf, "%-10s", f.train_db.c_str());
    s << buf;
    for (const auto& t : tests) {
      std::optional<double> acer;
      bool present = false;
      for (const auto& r : f.reports) {
        if (r.test_db == t) {
          acer = r.acer;
          present = true;
        }
      }
      std::snprintf(buf, sizeof buf, " %8s", present ? format_rate(acer).c_str() : "-");
      s << buf;
    }
    const bool any = std::any_of(f.reports.begin(), f.reports.end(), [](const EvalReport& r) { return r.acer; });
    s << "  " << (any ? format_rate(average_acer(f.reports)) : "NA") << '\n';
  }

  for (const auto& f : result.folds) {
    if (f.error) s << "\nfold " << f.train_db << " FAILED: " << *f.error << '\n';
  }
  return s.str();
}

}  // namespace mvapad
