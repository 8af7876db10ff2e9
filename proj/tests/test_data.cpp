#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "mvapad/data.hpp"
#include "mvapad/keyvalue.hpp"
#include "mvapad/rng.hpp"

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

const char* kHeader = "path,label,database,sensor,environment\n";

template <typename E>
std::string error_of(const std::string& text) {
  try {
    parse_manifest(text, "m.csv");
  } catch (const E& e) {
    return e.what();
  }
  return "<no error>";
}

double disc_mean(const GrayImage& img, double radius) {
  double sum = 0;
  std::size_t n = 0;
  const double c = static_cast<double>(img.width) / 2;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      if (std::hypot(x + 0.5 - c, y + 0.5 - c) < radius) {
        sum += img.at(y, x);
        ++n;
      }
  return sum / static_cast<double>(n);
}

double mean(const GrayImage& img) {
  double s = 0;
  for (auto p : img.pixels) s += p;
  return s / static_cast<double>(img.pixels.size()) / 255.0;
}

}  // namespace

TEST_CASE("manifest parsing") {
  const auto m = parse_manifest(std::string("# note\n") + kHeader +
                                "a.pgm,bonafide,X,s1,controlled\nb.pgm,attack,Y,s2,uncontrolled\n");
  REQUIRE(m.size() == 2);
  CHECK(m.samples[1].label == Label::attack);
  CHECK(m.samples[1].environment == Environment::uncontrolled);
  CHECK(m.comments == std::vector<std::string>{"note"});
  CHECK(m.databases() == std::vector<std::string>{"X", "Y"});
  CHECK(parse_manifest(format_manifest(m)).samples.size() == 2);

  const auto reordered = parse_manifest("label,path,environment,database,sensor\nattack,q.pgm,controlled,Z,s\n");
  CHECK(reordered.samples[0].path == "q.pgm");
  CHECK(reordered.samples[0].database == "Z");

  CHECK(error_of<EmptyManifestError>("") .find("empty") != std::string::npos);
  CHECK(error_of<EmptyManifestError>("# only a comment\n").find("m.csv") != std::string::npos);
  CHECK(error_of<EmptyManifestError>(kHeader).find("no samples") != std::string::npos);
  CHECK(error_of<ManifestColumnError>("path,label,database,sensor\n").find("environment") != std::string::npos);
  CHECK(error_of<ManifestLabelError>(std::string(kHeader) + "a.pgm,bonafide,X,s,controlled\nb.pgm,soft-lens,X,s,controlled\n")
            .find("m.csv:3") != std::string::npos);
  CHECK(error_of<ManifestLabelError>(std::string(kHeader) + "a.pgm,print,X,s,controlled\n").find("print") !=
        std::string::npos);
  CHECK(error_of<DuplicateSampleError>(std::string(kHeader) + "a.pgm,bonafide,X,s,controlled\n\na.pgm,attack,X,s,controlled\n")
            .find("m.csv:4") != std::string::npos);
  CHECK(error_of<FormatError>(std::string(kHeader) + "a.pgm,bonafide,X,s\n").find("m.csv:2") != std::string::npos);
  CHECK(error_of<FormatError>(std::string(kHeader) + "a.pgm,bonafide,X,s,outdoors\n").find("outdoors") !=
        std::string::npos);
  CHECK(error_of<FormatError>(std::string("# format_version = 9\n") + kHeader + "a.pgm,bonafide,X,s,controlled\n")
            .find("version") != std::string::npos);
}

TEST_CASE("PGM decoding") {
  GrayImage img{2, 2, {0, 255, 0, 255}};
  const Tensor t = image_to_tensor(decode_pgm(encode_pgm(img)));
  CHECK(t.shape() == Shape{1, 2, 2});
  CHECK(t.to_vector() == std::vector<double>{0, 1, 0, 1});

  const auto commented = decode_pgm(std::string("P5\n# c\n2 1\n255\n") + std::string("\x10\x20", 2));
  CHECK(commented.pixels == std::vector<std::uint8_t>{16, 32});
  const auto low = decode_pgm(std::string("P5 1 1 15\n") + std::string("\x0f", 1));
  CHECK(low.pixels[0] == 255);

  CHECK_THROWS_AS(decode_pgm("P2\n1 1\n255\n0"), FormatError);
  CHECK_THROWS_AS(decode_pgm("\x89PNG\r\n\x1a\nrest"), FormatError);
  CHECK_THROWS_AS(decode_pgm("P5\n4 4\n255\nabc"), FormatError);
  CHECK_THROWS_AS(decode_pgm("P5\n4\n"), FormatError);
  CHECK_THROWS_AS(decode_pgm("P5\n1 1\n65535\n\0\0"), FormatError);

  Rng rng(3);
  GrayImage random{9, 7, std::vector<std::uint8_t>(63)};
  Tensor values({1, 7, 9});
  for (std::size_t i = 0; i < 63; ++i) values.set(i, rng.uniform());
  const Tensor back = image_to_tensor(decode_pgm(encode_pgm(tensor_to_image(values))));
  for (std::size_t i = 0; i < 63; ++i) CHECK(std::abs(back.at(i) - values.at(i)) <= 1.0 / 255 + 1e-7);
}

TEST_CASE("bilinear resize") {
  const Tensor constant = Tensor::full({1, 5, 7}, 0.375);
  for (auto [h, w] : {std::pair{3, 3}, std::pair{10, 14}, std::pair{1, 1}}) {
    const Tensor r = resize_bilinear(constant, h, w);
    CHECK(r.shape() == Shape{1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    for (std::size_t i = 0; i < r.numel(); ++i) CHECK(r.at(i) == doctest::Approx(0.375).epsilon(1e-6));
  }
  const Tensor ramp = Tensor::from({1, 1, 2}, std::vector<float>{0.0f, 1.0f});
  const Tensor up = resize_bilinear(ramp, 1, 4);
  CHECK(up.to_vector() == std::vector<double>{0.0, 0.25, 0.75, 1.0});
  const Tensor same = resize_bilinear(constant, 5, 7);
  CHECK(same.identical(constant));
  CHECK_THROWS_AS(resize_bilinear(Tensor({5, 7}), 2, 2), DimensionError);
}

TEST_CASE("synthetic generator") {
  TempDir a("synth_a"), b("synth_b");
  const auto m1 = synth_generate({6, 'A', 7, 64}, a.file("one"));
  const auto m2 = synth_generate({6, 'A', 7, 64}, a.file("two"));
  REQUIRE(m1.size() == 12);
  CHECK(m1.count(Label::attack) == 6);
  for (const auto& s : m1.samples) {
    CHECK(read_text_file(m1.resolve(s)) == read_text_file(m2.resolve(s)));
  }
  CHECK(read_text_file(a.file("one/manifest.csv")) == read_text_file(a.file("two/manifest.csv")));
  const auto loaded = load_manifest(a.file("one/manifest.csv"));
  CHECK(loaded.size() == 12);
  bool has_seed = false;
  for (const auto& c : loaded.comments) has_seed = has_seed || c == "seed = 7";
  CHECK(has_seed);
  const auto other = synth_generate({6, 'A', 8, 64}, a.file("three"));
  CHECK(read_text_file(m1.resolve(m1.samples[0])) != read_text_file(other.resolve(other.samples[0])));

  const auto set = load_images(loaded, 64);
  CHECK(set.images.shape() == Shape{12, 1, 64, 64});
  CHECK(load_images(loaded, 32).images.shape() == Shape{12, 1, 32, 32});
  CHECK_THROWS_AS(synth_profile('D'), ContractError);
}

TEST_CASE("synthetic classes and profiles differ as configured") {
  for (char p : {'A', 'B', 'C'}) {
    const SynthProfile prof = synth_profile(p);
    double diff = 0;
    for (std::uint64_t s = 0; s < 40; ++s) {
      // Same seed: the attack image is the bonafide construction plus the lens.
      diff += std::abs(disc_mean(synth_image(prof, Label::attack, s, 64), 20) -
                       disc_mean(synth_image(prof, Label::bonafide, s, 64), 20));
    }
    CHECK(diff / 40 > 0.0);
  }
  // Profile brightness shift: same seeds, so only offset, blur and noise differ.
  for (char p : {'B', 'C'}) {
    double shift = 0;
    const int n = 60;
    for (std::uint64_t s = 0; s < n; ++s) {
      shift += mean(synth_image(synth_profile(p), Label::bonafide, s, 64)) -
               mean(synth_image(synth_profile('A'), Label::bonafide, s, 64));
    }
    shift /= n;
    CHECK(std::abs(shift - synth_profile(p).brightness_offset) < 0.01);
  }
}

TEST_CASE("protocol splits") {
  Manifest m;
  for (std::string db : {"A", "B", "C"}) {
    for (int i = 0; i < 50; ++i) {
      m.samples.push_back({db + std::to_string(i), i % 2 ? Label::attack : Label::bonafide, db, "s", Environment::controlled});
    }
  }
  const Split cross = split_cross_database(m, "A");
  CHECK(cross.train.size() == 50);
  for (const auto& s : cross.train.samples) CHECK(s.database == "A");
  CHECK(cross.test_names == std::vector<std::string>{"B", "C"});
  CHECK_NOTHROW(require_disjoint(cross, "A"));
  CHECK_THROWS_AS(split_cross_database(m, "Q"), ContractError);

  Manifest balanced;
  for (int i = 0; i < 100; ++i) {
    balanced.samples.push_back({"x" + std::to_string(i), i < 50 ? Label::attack : Label::bonafide, "A", "s", Environment::controlled});
  }
  const Split intra = split_intra_database(balanced, "A", 0.5, 3);
  CHECK(intra.train.size() == 50);
  CHECK(intra.tests[0].size() == 50);
  CHECK(std::abs(static_cast<int>(intra.train.count(Label::attack)) - 25) <= 1);
  CHECK_NOTHROW(require_disjoint(intra));
  const Split again = split_intra_database(balanced, "A", 0.5, 3);
  CHECK(format_manifest(again.train) == format_manifest(intra.train));
  CHECK(format_manifest(split_intra_database(balanced, "A", 0.5, 4).train) != format_manifest(intra.train));
  CHECK_THROWS_AS(split_intra_database(balanced, "B", 0.5, 3), ContractError);

  Split leaky = intra;
  leaky.tests[0].samples.push_back(leaky.train.samples[0]);
  CHECK_THROWS_AS(require_disjoint(leaky), ContractError);
  CHECK_THROWS_AS(require_disjoint(cross, "B"), ContractError);
}
