#include "mvapad/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "mvapad/keyvalue.hpp"
#include "mvapad/rng.hpp"

namespace mvapad {

namespace fs = std::filesystem;

std::string to_string(Environment env) { return env == Environment::controlled ? "controlled" : "uncontrolled"; }

std::size_t Manifest::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.label == label; }));
}

std::vector<std::string> Manifest::databases() const {
  std::vector<std::string> out;
  for (const auto& s : samples) {
    if (std::find(out.begin(), out.end(), s.database) == out.end()) out.push_back(s.database);
  }
  return out;
}

std::string Manifest::resolve(const Sample& s) const {
  const fs::path p(s.path);
  if (p.is_absolute() || base_dir.empty()) return p.string();
  return (fs::path(base_dir) / p).string();
}

// ---------------------------------------------------------------------------
// Manifest text

namespace {

const std::vector<std::string> kColumns{"path", "label", "database", "sensor", "environment"};

}  // namespace

Manifest parse_manifest(const std::string& text, const std::string& source) {
  Manifest m;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  std::vector<std::size_t> column_of;  // index of each kColumns entry in the header
  std::size_t n_fields = 0;
  std::map<std::string, std::size_t> seen;
  auto where = [&] { return source + ":" + std::to_string(line_no); };

  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '#') {
      const std::string comment = trim(std::string_view(line).substr(1));
      if (comment.rfind("format_version", 0) == 0) {
        const auto eq = comment.find('=');
        if (eq == std::string::npos || trim(std::string_view(comment).substr(eq + 1)) != std::to_string(Manifest::kFormatVersion)) {
          throw FormatError(where() + ": unsupported manifest format version (" + comment + ")");
        }
      }
      m.comments.push_back(comment);
      continue;
    }
    const auto fields = split(line, ',');
    if (column_of.empty()) {
      for (const auto& col : kColumns) {
        const auto it = std::find(fields.begin(), fields.end(), col);
        if (it == fields.end()) throw ManifestColumnError(where() + ": header lacks column '" + col + "'");
        column_of.push_back(static_cast<std::size_t>(it - fields.begin()));
      }
      n_fields = fields.size();
      continue;
    }
    if (fields.size() != n_fields) {
      throw FormatError(where() + ": expected " + std::to_string(n_fields) + " fields, got " +
                        std::to_string(fields.size()));
    }
    Sample s;
    s.path = fields[column_of[0]];
    const std::string& label = fields[column_of[1]];
    s.database = fields[column_of[2]];
    s.sensor = fields[column_of[3]];
    const std::string& env = fields[column_of[4]];

    if (s.path.empty()) throw FormatError(where() + ": empty path");
    if (s.database.empty()) throw FormatError(where() + ": empty database id");
    if (const auto parsed = parse_label(label)) {
      s.label = *parsed;
    } else {
      std::string folded;
      for (char c : label) {
        if (std::isalnum(static_cast<unsigned char>(c))) folded += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      }
      if (folded == "softlens" || folded == "soft") {
        throw ManifestLabelError(where() + ": soft-lens samples are not part of the task (labels: bonafide, attack)");
      }
      throw ManifestLabelError(where() + ": unknown label '" + label + "' (labels: bonafide, attack)");
    }
    if (env == "controlled") {
      s.environment = Environment::controlled;
    } else if (env == "uncontrolled") {
      s.environment = Environment::uncontrolled;
    } else {
      throw FormatError(where() + ": unknown environment '" + env + "' (controlled, uncontrolled)");
    }
    if (const auto [it, fresh] = seen.emplace(s.path, line_no); !fresh) {
      throw DuplicateSampleError(where() + ": duplicate path '" + s.path + "' (first on line " +
                                 std::to_string(it->second) + ")");
    }
    m.samples.push_back(std::move(s));
  }
  if (column_of.empty()) throw EmptyManifestError(source + ": empty manifest (no header line)");
  if (m.samples.empty()) throw EmptyManifestError(source + ":" + std::to_string(line_no) + ": manifest has no samples");
  return m;
}

Manifest load_manifest(const std::string& path) {
  Manifest m = parse_manifest(read_text_file(path), path);
  m.base_dir = fs::path(path).parent_path().string();
  return m;
}

std::string format_manifest(const Manifest& manifest) {
  std::ostringstream out;
  for (const auto& c : manifest.comments) out << "# " << c << '\n';
  out << "path,label,database,sensor,environment\n";
  for (const auto& s : manifest.samples) {
    for (const auto* field : {&s.path, &s.database, &s.sensor}) {
      if (field->find_first_of(",\n") != std::string::npos) {
        throw ContractError("manifest field '" + *field + "' contains a comma or newline");
      }
    }
    out << s.path << ',' << to_string(s.label) << ',' << s.database << ',' << s.sensor << ','
        << to_string(s.environment) << '\n';
  }
  return out.str();
}

void save_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  out << format_manifest(manifest);
  if (!out) throw IoError("cannot write '" + path + "'");
}

void require_trainable(const Manifest& manifest, const std::string& what) {
  std::set<std::string> paths;
  for (const auto& s : manifest.samples) {
    if (!paths.insert(s.path).second) throw DuplicateSampleError(what + ": duplicate path '" + s.path + "'");
  }
  for (Label l : {Label::bonafide, Label::attack}) {
    if (manifest.count(l) == 0) throw ContractError(what + ": no " + to_string(l) + " samples");
  }
}

ImageSet load_images(const Manifest& manifest, std::size_t size, DType dtype) {
  if (manifest.samples.empty()) throw ContractError("load_images: empty manifest");
  ImageSet set;
  set.images = Tensor({manifest.size(), 1, size, size}, dtype);
  const std::size_t plane = size * size;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const Sample& s = manifest.samples[i];
    const Tensor img = decode_image(manifest.resolve(s), size, dtype);
    set.images.visit([&](auto dst) {
      using T = typename decltype(dst)::value_type;
      const auto src = img.data<T>();
      std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * plane));
    });
    set.labels.push_back(class_index(s.label));
    set.paths.push_back(s.path);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Synthetic generator

SynthProfile synth_profile(char id) {
  switch (id) {
    case 'A':
      return {'A', 0.0, 1, 0.02, 5.0, Environment::controlled};
    case 'B':
      return {'B', 0.06, 0, 0.01, 5.5, Environment::controlled};
    case 'C':
      return {'C', -0.06, 1, 0.03, 6.0, Environment::uncontrolled};
    default:
      throw ContractError(std::string("unknown synthetic profile '") + id + "' (A, B, C)");
  }
}

namespace {

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

std::vector<double> box_blur(const std::vector<double>& src, std::size_t n, std::size_t radius) {
  if (radius == 0) return src;
  const auto r = static_cast<long>(radius);
  const auto ln = static_cast<long>(n);
  auto pass = [&](const std::vector<double>& in, bool horizontal) {
    std::vector<double> out(in.size());
    for (long y = 0; y < ln; ++y) {
      for (long x = 0; x < ln; ++x) {
        double acc = 0;
        for (long d = -r; d <= r; ++d) {
          const long xx = horizontal ? std::clamp(x + d, 0L, ln - 1) : x;
          const long yy = horizontal ? y : std::clamp(y + d, 0L, ln - 1);
          acc += in[static_cast<std::size_t>(yy * ln + xx)];
        }
        out[static_cast<std::size_t>(y * ln + x)] = acc / static_cast<double>(2 * r + 1);
      }
    }
    return out;
  };
  return pass(pass(src, true), false);
}

std::uint64_t sample_seed(std::uint64_t seed, char profile, Label label, std::size_t index) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s);
  s = h ^ (static_cast<std::uint64_t>(static_cast<unsigned char>(profile)) << 32) ^
      (static_cast<std::uint64_t>(class_index(label)) << 40) ^ static_cast<std::uint64_t>(index);
  return splitmix64(s);
}

}  // namespace

GrayImage synth_image(const SynthProfile& profile, Label label, std::uint64_t seed, std::size_t size) {
  if (size < 8) throw ContractError("synth_image: size must be at least 8");
  Rng rng(seed);
  const double n = static_cast<double>(size);
  const double cx = 0.5 + rng.uniform(-0.03, 0.03);
  const double cy = 0.5 + rng.uniform(-0.03, 0.03);
  const double r_pupil = rng.uniform(0.10, 0.14);
  const double r_iris = rng.uniform(0.36, 0.42);
  const double sclera = 0.72 + rng.uniform(-0.03, 0.03);
  const double iris_base = 0.42 + rng.uniform(-0.05, 0.05);
  const double pupil = 0.08 + rng.uniform(-0.02, 0.02);

  struct Harmonic {
    double k, amp, phase;
  };
  std::vector<Harmonic> angular(6);
  for (auto& h : angular) h = {static_cast<double>(3 + rng.below(18)), rng.uniform(0.0, 0.035), rng.uniform(0.0, 2 * std::numbers::pi)};
  const double ripple_len = rng.uniform(0.03, 0.06);
  const double ripple_phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double fibers = static_cast<double>(40 + rng.below(41));
  const double fiber_phase = rng.uniform(0.0, 2 * std::numbers::pi);

  // Attack lattice, in pixel units of the rendered image.
  const double pitch = profile.lattice_pitch * rng.uniform(0.85, 1.2);
  const double angle = rng.uniform(0.0, std::numbers::pi / 2);
  const double phase_x = rng.uniform(0.0, 1.0), phase_y = rng.uniform(0.0, 1.0);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<double> v(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / n - cx;
      const double w = (static_cast<double>(y) + 0.5) / n - cy;
      const double r = std::hypot(u, w);
      const double theta = std::atan2(w, u);

      double tex = 0.0;
      for (const auto& h : angular) tex += h.amp * std::cos(h.k * theta + h.phase);
      tex += 0.035 * std::cos(2 * std::numbers::pi * r / ripple_len + ripple_phase);
      tex += 0.025 * std::cos(fibers * theta + 3.0 * std::sin(5.0 * theta + fiber_phase));
      const double limbus_dark = -0.08 * smoothstep(r_iris - 0.08, r_iris, r);
      double iris = iris_base + tex + limbus_dark;

      const double in_iris = 1.0 - smoothstep(r_iris - 0.01, r_iris + 0.01, r);
      const double in_pupil = 1.0 - smoothstep(r_pupil - 0.01, r_pupil + 0.01, r);
      if (label == Label::attack) {
        const double px = static_cast<double>(x) - cx * n, py = static_cast<double>(y) - cy * n;
        const double qx = (ca * px + sa * py) / pitch + phase_x;
        const double qy = (-sa * px + ca * py) / pitch + phase_y;
        const double dx = qx - std::floor(qx) - 0.5, dy = qy - std::floor(qy) - 0.5;
        const double dot = std::exp(-(dx * dx + dy * dy) / (2 * 0.2 * 0.2));
        const double ring = (1.0 - in_pupil);
        iris = 0.8 * iris + 0.2 * 0.40 - 0.40 * dot * ring;
      }
      double value = sclera * (1.0 - in_iris) + iris * in_iris;
      value = value * (1.0 - in_pupil) + pupil * in_pupil;
      v[y * size + x] = value;
    }
  }
  v = box_blur(v, size, profile.blur_radius);

  GrayImage img{size, size, std::vector<std::uint8_t>(size * size)};
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double value = v[i] + profile.brightness_offset + profile.noise_sigma * rng.normal();
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
  }
  return img;
}

Manifest synth_generate(const SynthConfig& config, const std::string& out_dir) {
  if (config.n_per_class == 0) throw ContractError("synth: n per class must be at least 1");
  const SynthProfile profile = synth_profile(config.profile);
  fs::create_directories(out_dir);

  Manifest m;
  m.base_dir = out_dir;
  m.comments = {"format_version = " + std::to_string(Manifest::kFormatVersion),
                "generator = mvapad-synth",
                "generator_version = " + std::to_string(kSynthVersion),
                std::string("profile = ") + profile.id,
                "seed = " + std::to_string(config.seed),
                "n_per_class = " + std::to_string(config.n_per_class),
                "size = " + std::to_string(config.size),
                "brightness_offset = " + format_double(profile.brightness_offset),
                "blur_radius = " + std::to_string(profile.blur_radius),
                "noise_sigma = " + format_double(profile.noise_sigma),
                "lattice_pitch = " + format_double(profile.lattice_pitch)};
  for (Label label : {Label::bonafide, Label::attack}) {
    for (std::size_t i = 0; i < config.n_per_class; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%c_%s_%05zu.pgm", profile.id, to_string(label).c_str(), i);
      write_pgm((fs::path(out_dir) / name).string(),
                synth_image(profile, label, sample_seed(config.seed, profile.id, label, i), config.size));
      m.samples.push_back({name, label, std::string(1, profile.id), std::string("sensor-") + profile.id,
                           profile.environment});
    }
  }
  save_manifest((fs::path(out_dir) / "manifest.csv").string(), m);
  return m;
}

// ---------------------------------------------------------------------------
// Splits

namespace {

Manifest subset(const Manifest& m, const std::vector<std::size_t>& indices) {
  Manifest out;
  out.base_dir = m.base_dir;
  out.comments = m.comments;
  for (auto i : indices) out.samples.push_back(m.samples[i]);
  return out;
}

}  // namespace

Split split_cross_database(const Manifest& manifest, const std::string& train_db) {
  const auto dbs = manifest.databases();
  if (std::find(dbs.begin(), dbs.end(), train_db) == dbs.end()) {
    throw ContractError("split: training database '" + train_db + "' not in manifest");
  }
  Split split;
  for (const auto& db : dbs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      if (manifest.samples[i].database == db) idx.push_back(i);
    }
    if (db == train_db) {
      split.train = subset(manifest, idx);
    } else {
      split.tests.push_back(subset(manifest, idx));
      split.test_names.push_back(db);
    }
  }
  return split;
}

Split split_intra_database(const Manifest& manifest, const std::string& database, double train_fraction,
                           std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ContractError("split: train fraction must be in (0,1)");
  std::vector<std::size_t> train_idx, test_idx;
  Rng rng(seed);
  bool found = false;
  for (Label label : {Label::bonafide, Label::attack}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      if (manifest.samples[i].database == database && manifest.samples[i].label == label) idx.push_back(i);
    }
    found = found || !idx.empty();
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * train_fraction));
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  if (!found) throw ContractError("split: database '" + database + "' not in manifest");
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  Split split;
  split.train = subset(manifest, train_idx);
  split.tests.push_back(subset(manifest, test_idx));
  split.test_names.push_back(database);
  return split;
}

void require_disjoint(const Split& split, const std::string& train_db) {
  std::set<std::string> train_paths;
  for (const auto& s : split.train.samples) train_paths.insert(split.train.resolve(s));
  for (std::size_t t = 0; t < split.tests.size(); ++t) {
    for (const auto& s : split.tests[t].samples) {
      if (train_paths.count(split.tests[t].resolve(s))) {
        throw ContractError("split: test set '" + split.test_names[t] + "' shares sample '" + s.path + "' with train");
      }
      if (!train_db.empty() && s.database == train_db) {
        throw ContractError("split: cross-database test set '" + split.test_names[t] + "' contains training database '" +
                            train_db + "'");
      }
    }
  }
}

}  // namespace mvapad
