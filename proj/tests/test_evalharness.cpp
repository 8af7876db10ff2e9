#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mvapad/evalharness.hpp"
#include "mvapad/keyvalue.hpp"

using namespace mvapad;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("mvapad_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// `errors` of `n` attacks accepted plus `berrors` of `nb` bonafide rejected.
std::vector<Decision> decisions(std::size_t n, std::size_t errors, std::size_t nb, std::size_t berrors) {
  std::vector<Decision> d;
  for (std::size_t i = 0; i < n; ++i) {
    d.push_back({"a" + std::to_string(i), Label::attack, i < errors ? Label::bonafide : Label::attack, 0.5});
  }
  for (std::size_t i = 0; i < nb; ++i) {
    d.push_back({"b" + std::to_string(i), Label::bonafide, i < berrors ? Label::attack : Label::bonafide, 0.5});
  }
  return d;
}

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

NetworkSpec tiny_spec() {
  NetworkSpec s;
  s.input_size = 32;
  s.base_channels = {4, 4, 6, 6, 6};
  s.conv_strides = {1, 1, 1, 1, 1};
  s.avgpool_kernel = 2;
  s.branch_widths = {{12, 8, 2}, {8, 6, 2}, {6, 4, 2}};
  return s;
}

/// Three synthetic profiles plus a tiny spec file and a cross-protocol config.
std::string tiny_run(const TempDir& dir, std::size_t n, std::size_t epochs) {
  for (char p : {'A', 'B', 'C'}) synth_generate({n, p, 5, 32}, dir.file(std::string("synth_") + p));
  write(dir.file("tiny.spec"), tiny_spec().to_text());
  write(dir.file("run.cfg"), "spec = tiny.spec\nprotocol = cross\n"
                             "manifests = synth_A/manifest.csv, synth_B/manifest.csv, synth_C/manifest.csv\n"
                             "epochs = " + std::to_string(epochs) + "\nbatch = 8\nlr = 1e-3\nseed = 4\nout = out\n");
  return dir.file("run.cfg");
}

}  // namespace

TEST_CASE("metric examples") {
  // 1 of 30 attacks and 9 of 101 bonafide misclassified.
  const EvalReport a = compute_metrics(decisions(30, 1, 101, 9));
  CHECK(format_rate(a.apcer) == "3.33");
  CHECK(format_rate(a.bpcer) == "8.91");
  CHECK(format_rate(a.acer) == "6.12");
  const EvalReport b = compute_metrics(decisions(285, 44, 290, 4));
  CHECK(format_rate(b.apcer) == "15.44");
  CHECK(format_rate(b.bpcer) == "1.38");
  CHECK(format_rate(b.acer) == "8.41");
  CHECK(round2(average_acer(std::vector<double>{8.41, 6.12})) == 7.26);

  const EvalReport ok = compute_metrics(decisions(10, 0, 12, 0));
  CHECK(*ok.apcer == 0.0);
  CHECK(*ok.bpcer == 0.0);
  CHECK(*ok.acer == 0.0);
  CHECK(ok.accuracy == 100.0);
  CHECK(average_acer(std::vector<double>{0.0, 100.0}) == 50.0);
  CHECK(average_acer(std::vector<double>{6.12}) == 6.12);
  CHECK_THROWS_AS(average_acer(std::vector<double>{}), ContractError);
  CHECK_THROWS_AS(compute_metrics({}), ContractError);
}

TEST_CASE("metric invariants") {
  for (std::size_t e = 0; e <= 50; e += 7) {
    for (std::size_t be = 0; be <= 50; be += 9) {
      const EvalReport r = compute_metrics(decisions(50, e, 50, be));
      CHECK(*r.acer == (*r.apcer + *r.bpcer) / 2);
      CHECK(r.accuracy == doctest::Approx(100.0 - *r.acer).epsilon(1e-12));
      CHECK(r.attack_as_bonafide == e);
      CHECK(r.bonafide_as_attack == be);
    }
  }
  const EvalReport only_attacks = compute_metrics(decisions(4, 1, 0, 0));
  CHECK(only_attacks.apcer == 25.0);
  CHECK_FALSE(only_attacks.bpcer.has_value());
  CHECK_FALSE(only_attacks.acer.has_value());
  CHECK(format_rate(only_attacks.bpcer) == "NA");
  CHECK_THROWS_AS(average_acer(std::vector<EvalReport>{only_attacks}), ContractError);
  CHECK(average_acer(std::vector<EvalReport>{only_attacks, compute_metrics(decisions(2, 1, 2, 0))}) == 25.0);
}

TEST_CASE("two-decimal rounding") {
  CHECK(round2(7.265) == 7.26);
  CHECK(round2((8.41 + 6.12) / 2) == 7.26);
  CHECK(round2(6.125) == 6.12);
  CHECK(round2(6.1251) == 6.13);
  CHECK(round2(15.475) == 15.47);
  CHECK(round2(26.765) == 26.76);
  CHECK(round2(3.3333333) == 3.33);
  CHECK(round2(0.0) == 0.0);
  CHECK(round2(100.0) == 100.0);
  CHECK(format_rate(100.0) == "100.00");
}

TEST_CASE("report and decision files") {
  EvalReport r = compute_metrics(decisions(3, 1, 0, 0));
  r.train_db = "X";
  r.test_db = "Y";
  CHECK(format_reports_csv({r}) ==
        "train_db,test_db,apcer,bpcer,acer,accuracy,n_attack,n_bonafide\nX,Y,33.333333333333336,NA,NA,"
        "66.666666666666671,3,0\n");

  auto d = decisions(7, 2, 5, 1);
  d[3].score = 0.123456789012345678;
  const auto back = parse_decisions_csv(format_decisions_csv(d));
  REQUIRE(back.size() == d.size());
  CHECK(back[3].score == d[3].score);
  const EvalReport x = compute_metrics(d), y = compute_metrics(back);
  CHECK(x.apcer == y.apcer);
  CHECK(x.bpcer == y.bpcer);
  CHECK(x.accuracy == y.accuracy);
  CHECK_THROWS_AS(parse_decisions_csv("path,label\n"), FormatError);
  CHECK_THROWS_AS(parse_decisions_csv("path,label,predicted,score\na,attack,print,0.1\n"), FormatError);
}

TEST_CASE("run config") {
  TempDir dir("cfg");
  write(dir.file("m.csv"), "path,label,database,sensor,environment\na.pgm,attack,A,s,controlled\n");
  const RunConfig c = parse_run_config("manifests = m.csv\nepochs = 3\nlr = 1e-4\nprotocol = intra\n"
                                       "train_databases = A\nspec = default\n",
                                       "c.cfg", dir.path.string());
  CHECK(c.manifests == std::vector<std::string>{dir.file("m.csv")});
  CHECK(c.epochs == 3u);
  CHECK(c.adam.lr == 1e-4);
  CHECK(c.adam.weight_decay == 0.01);
  CHECK(c.protocol == Protocol::intra);
  CHECK(c.spec.input_size == 224);
  CHECK(c.batch == 32);
  const RunConfig again = parse_run_config(c.to_text(), "again", dir.path.string());
  CHECK(again.to_text() == c.to_text());

  auto message = [&](const std::string& text) -> std::string {
    try {
      parse_run_config(text, "c.cfg", dir.path.string());
    } catch (const ValidationError& e) {
      return e.what();
    }
    return "<no error>";
  };
  CHECK(message("manifests = m.csv\n").find("epochs") != std::string::npos);
  CHECK(message("epochs = 1\n").find("manifests") != std::string::npos);
  CHECK(message("manifests = nope.csv\nepochs = 1\n").find("nope.csv") != std::string::npos);
  CHECK(message("manifests = m.csv\nepochs = 1\nlearning_rate = 1\n").find("learning_rate") != std::string::npos);
  CHECK(message("manifests = m.csv\nepochs = 1\nprotocol = both\n").find("protocol") != std::string::npos);
  CHECK(message("manifests = m.csv\nepochs = 1\nspec = missing.spec\n").find("missing.spec") != std::string::npos);
  CHECK(message("manifests = m.csv\nepochs = -1\n").find("c.cfg:2") != std::string::npos);
  CHECK(derive_seed(1, 1, 0) != derive_seed(1, 2, 0));
  CHECK(derive_seed(1, 1, 0) != derive_seed(1, 1, 1));
  CHECK(derive_seed(1, 1, 0) == derive_seed(1, 1, 0));
}

TEST_CASE("cross-database protocol end to end") {
  TempDir dir("protocol");
  const std::string cfg_path = tiny_run(dir, 6, 1);
  const RunConfig cfg = load_run_config(cfg_path);
  const ProtocolResult result = run_protocol(cfg);
  CHECK(result.all_succeeded());
  const auto reports = result.reports();
  REQUIRE(reports.size() == 6);
  for (const auto& r : reports) {
    CHECK(r.train_db != r.test_db);
    CHECK(r.n_attack == 6);
    CHECK(r.n_bonafide == 6);
  }
  const fs::path out = dir.path / "out";
  for (const char* f : {"config.txt", "reports.csv", "averages.csv", "summary.txt", "fold_A/model.ckpt",
                        "fold_A/training_log.csv", "fold_A/decisions_B.csv", "fold_C/decisions_A.csv"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  const std::string averages = read_text_file((out / "averages.csv").string());
  CHECK(std::count(averages.begin(), averages.end(), '\n') == 4);

  // Recomputing from the persisted decisions reproduces the report.
  const auto persisted = parse_decisions_csv(read_text_file((out / "fold_B/decisions_C.csv").string()));
  EvalReport re = compute_metrics(persisted);
  re.train_db = "B";
  re.test_db = "C";
  const EvalReport& orig = reports[3];
  CHECK(orig.train_db == "B");
  CHECK(format_reports_csv({re}) == format_reports_csv({orig}));

  // Same seed and config: byte-identical reports and decisions.
  const std::string first_reports = read_text_file((out / "reports.csv").string());
  const std::string first_decisions = read_text_file((out / "fold_A/decisions_C.csv").string());
  RunConfig rerun = cfg;
  rerun.out_dir = dir.file("out2");
  run_protocol(rerun);
  CHECK(read_text_file(dir.file("out2/reports.csv")) == first_reports);
  CHECK(read_text_file(dir.file("out2/fold_A/decisions_C.csv")) == first_decisions);
  CHECK(read_text_file(dir.file("out2/summary.txt")) == read_text_file((out / "summary.txt").string()));

  // A fold subset reproduces the matching fold of the full run.
  RunConfig subset = cfg;
  subset.out_dir = dir.file("out3");
  subset.train_databases = {"B"};
  const auto sub = run_protocol(subset);
  REQUIRE(sub.folds.size() == 1);
  CHECK(read_text_file(dir.file("out3/fold_B/decisions_A.csv")) ==
        read_text_file((out / "fold_B/decisions_A.csv").string()));
}

TEST_CASE("fold failures are isolated") {
  TempDir dir("isolate");
  const std::string cfg_path = tiny_run(dir, 4, 1);
  // Database D holds only bonafide images: it cannot be trained on but can be
  // tested on.
  Manifest d = load_manifest(dir.file("synth_A/manifest.csv"));
  std::erase_if(d.samples, [](const Sample& s) { return s.label == Label::attack; });
  for (auto& s : d.samples) {
    s.path = "../synth_A/" + s.path;
    s.database = "D";
  }
  fs::create_directories(dir.file("d"));
  save_manifest(dir.file("d/manifest.csv"), d);
  RunConfig cfg = load_run_config(cfg_path);
  cfg.manifests = {dir.file("synth_A/manifest.csv"), dir.file("d/manifest.csv")};
  const ProtocolResult result = run_protocol(cfg);
  REQUIRE(result.folds.size() == 2);
  CHECK_FALSE(result.all_succeeded());
  CHECK_FALSE(result.folds[0].error.has_value());
  REQUIRE(result.folds[1].error.has_value());
  CHECK(result.folds[1].error->find("attack") != std::string::npos);
  REQUIRE(result.folds[0].reports.size() == 1);
  CHECK_FALSE(result.folds[0].reports[0].apcer.has_value());
  const std::string summary = read_text_file(dir.file("out/summary.txt"));
  CHECK(summary.find("fold D FAILED") != std::string::npos);
  CHECK(read_text_file(dir.file("out/averages.csv")).find("D,NA,0") != std::string::npos);
}

TEST_CASE("untrained network scores near the class prior") {
  TempDir dir("chance");
  synth_generate({250, 'A', 21, 64}, dir.file("A"));
  synth_generate({250, 'B', 22, 64}, dir.file("B"));
  write(dir.file("run.cfg"), "spec = small\nmanifests = A/manifest.csv, B/manifest.csv\nepochs = 0\n"
                             "train_databases = A\nseed = 2\nout = out\n");
  const ProtocolResult result = run_protocol(load_run_config(dir.file("run.cfg")));
  REQUIRE(result.folds.at(0).reports.size() == 1);
  const EvalReport& r = result.folds[0].reports[0];
  CHECK(r.n_attack + r.n_bonafide == 500);
  CHECK(r.accuracy >= 40.0);
  CHECK(r.accuracy <= 60.0);
  CHECK(result.folds[0].log.empty());
  CHECK(read_text_file(dir.file("out/fold_A/training_log.csv")) == "epoch,mean_loss,train_accuracy,wall_seconds\n");
}

TEST_CASE("intra-database protocol") {
  TempDir dir("intra");
  tiny_run(dir, 8, 1);
  RunConfig cfg = load_run_config(dir.file("run.cfg"));
  cfg.protocol = Protocol::intra;
  cfg.train_fraction = 0.75;
  const ProtocolResult result = run_protocol(cfg);
  REQUIRE(result.all_succeeded());
  const auto reports = result.reports();
  REQUIRE(reports.size() == 3);
  for (const auto& r : reports) {
    CHECK(r.train_db == r.test_db);
    CHECK(r.n_attack + r.n_bonafide == 4);
  }
  CHECK(fs::exists(dir.file("out/fold_C/decisions_C.csv")));
}
