#include "mvapad/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>

#include "mvapad/evalharness.hpp"
#include "mvapad/gradsuite.hpp"

namespace mvapad {

namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw IoError("cannot write '" + path.string() + "'");
}

struct Options {
  // shared
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  // synth
  std::size_t n = 0;
  std::string profile;
  std::size_t size = 64;
  // eval / export-features
  std::string checkpoint;
  std::string manifest;
  std::string image;
  std::string layer;
  std::string train_db = "model";
  std::size_t batch = 64;
  std::size_t limit = 1;
  // gradcheck
  std::size_t instances = 20;
  double tol = 1e-4;
  bool no_model = false;
};

RunConfig config_with_overrides(const Options& o) {
  RunConfig c = load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  if (c.out_dir.empty()) throw ValidationError("no output directory: pass --out or set 'out' in the config");
  return c;
}

int cmd_synth(const Options& o, std::ostream& out) {
  if (o.profile.size() != 1) throw ValidationError("--profile must be one of A, B, C");
  SynthConfig c;
  c.n_per_class = o.n;
  c.profile = o.profile[0];
  c.seed = o.seed.value_or(0);
  c.size = o.size;
  const Manifest m = synth_generate(c, o.out);
  out << "wrote " << m.size() << " images and " << (fs::path(o.out) / "manifest.csv").string() << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = config_with_overrides(o);
  Manifest all = load_run_manifests(c);
  if (!c.train_databases.empty()) {
    std::erase_if(all.samples, [&](const Sample& s) {
      return std::find(c.train_databases.begin(), c.train_databases.end(), s.database) == c.train_databases.end();
    });
  }
  fs::create_directories(c.out_dir);
  write_file(fs::path(c.out_dir) / "config.txt", c.to_text());
  std::vector<EpochLog> log;
  train_model(c, all, 0, c.out_dir, &log, &err);
  out << "trained " << log.size() << " epochs on " << all.size() << " images; checkpoint "
      << (fs::path(c.out_dir) / "model.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  Model model = Model::load(o.checkpoint);
  Manifest m = load_manifest(o.manifest);
  const auto decisions = evaluate(model, m, o.batch);
  std::map<std::string, std::vector<Decision>> by_db;
  for (std::size_t i = 0; i < m.size(); ++i) by_db[m.samples[i].database].push_back(decisions[i]);
  std::vector<EvalReport> reports;
  for (const auto& db : m.databases()) {
    EvalReport r = compute_metrics(by_db[db]);
    r.train_db = o.train_db;
    r.test_db = db;
    reports.push_back(r);
  }
  fs::create_directories(o.out);
  write_file(fs::path(o.out) / "reports.csv", format_reports_csv(reports));
  write_file(fs::path(o.out) / "decisions.csv", format_decisions_csv(decisions));
  for (const auto& r : reports) {
    out << r.test_db << ": APCER " << format_rate(r.apcer) << "  BPCER " << format_rate(r.bpcer) << "  ACER "
        << format_rate(r.acer) << "  accuracy " << format_rate(r.accuracy) << '\n';
  }
  return kExitOk;
}

int cmd_run_protocol(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = config_with_overrides(o);
  const ProtocolResult result = run_protocol(c, &err);
  out << format_summary(c, result);
  return result.all_succeeded() ? kExitOk : kExitRuntime;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  SuiteOptions so;
  so.instances = o.instances;
  so.seed = o.seed.value_or(1);
  so.tol = o.tol;
  so.include_model = !o.no_model;
  const auto results = run_gradcheck_suite(so);
  std::string csv = "layer,instances,max_rel_error,passed\n";
  bool ok = true;
  for (const auto& r : results) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-24s %4zu  max rel error %.3e  %s\n", r.name.c_str(), r.instances,
                  r.max_rel_error, r.passed ? "ok" : "FAIL");
    out << buf;
    std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%d\n", r.name.c_str(), r.instances, r.max_rel_error,
                  r.passed ? 1 : 0);
    csv += buf;
    ok = ok && r.passed;
  }
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_file(fs::path(o.out) / "gradcheck.csv", csv);
  }
  return ok ? kExitOk : kExitRuntime;
}

int cmd_export_features(const Options& o, std::ostream& out) {
  if (o.image.empty() == o.manifest.empty()) throw ValidationError("give exactly one of --image and --manifest");
  Model model = Model::load(o.checkpoint);
  const std::size_t size = model.spec().input_size;
  Tensor x;
  if (!o.image.empty()) {
    const Tensor img = decode_image(o.image, size, model.dtype());
    x = img.reshaped({1, img.dim(0), size, size});
  } else {
    Manifest m = load_manifest(o.manifest);
    if (m.samples.size() > o.limit) m.samples.resize(o.limit);
    x = load_images(m, size, model.dtype()).images;
  }
  const auto paths = export_features(model, x, o.layer, o.out);
  out << "wrote " << paths.size() << " files to " << o.out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Iris presentation-attack detection: training, evaluation and tooling", "mvapad"};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* c, const std::string& help) { c->add_option("--seed", o.seed, help); };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic bonafide/attack corpus");
  synth->add_option("--n", o.n, "Images per class")->required()->check(CLI::PositiveNumber);
  synth->add_option("--profile", o.profile, "Appearance profile: A, B or C")->required();
  synth->add_option("--size", o.size, "Image side in pixels")->capture_default_str();
  synth->add_option("--out", o.out, "Output directory")->required();
  add_seed(synth, "Generator seed (default 0)");

  auto* train = app.add_subcommand("train", "Train one model on the manifests of a run config");
  train->add_option("--config", o.config, "Run config file")->required();
  train->add_option("--out", o.out, "Output directory (overrides 'out')");
  add_seed(train, "Master seed (overrides 'seed')");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  eval->add_option("--manifest", o.manifest, "Test manifest")->required();
  eval->add_option("--out", o.out, "Output directory")->required();
  eval->add_option("--train-db", o.train_db, "Value of the train_db column")->capture_default_str();
  eval->add_option("--batch", o.batch, "Evaluation batch size")->capture_default_str()->check(CLI::PositiveNumber);

  auto* protocol = app.add_subcommand("run-protocol", "Run a cross- or intra-database protocol");
  protocol->add_option("--config", o.config, "Run config file")->required();
  protocol->add_option("--out", o.out, "Output directory (overrides 'out')");
  add_seed(protocol, "Master seed (overrides 'seed')");

  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  grad->add_option("--instances", o.instances, "Seeded instances per case")->capture_default_str();
  grad->add_option("--tol", o.tol, "Relative error tolerance")->capture_default_str();
  grad->add_flag("--no-model", o.no_model, "Skip the full-network check");
  grad->add_option("--out", o.out, "Also write gradcheck.csv here");
  add_seed(grad, "Suite seed (default 1)");

  auto* feats = app.add_subcommand("export-features", "Dump intermediate activations");
  feats->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  feats->add_option("--image", o.image, "Single PGM input");
  feats->add_option("--manifest", o.manifest, "Manifest input (first --limit samples)");
  feats->add_option("--limit", o.limit, "Samples taken from --manifest")->capture_default_str();
  feats->add_option("--layer", o.layer, "conv1..conv5, base or branch1..branch3")->required();
  feats->add_option("--out", o.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out);
    if (train->parsed()) return cmd_train(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out);
    if (protocol->parsed()) return cmd_run_protocol(o, out, err);
    if (grad->parsed()) return cmd_gradcheck(o, out);
    if (feats->parsed()) return cmd_export_features(o, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace mvapad
