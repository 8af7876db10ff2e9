#include "mvapad/mvanet.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvapad/image.hpp"
#include "mvapad/keyvalue.hpp"

namespace mvapad {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host byte order");

Prediction decide(double bonafide_logit, double attack_logit) {
  Prediction p;
  p.label = attack_logit >= bonafide_logit ? Label::attack : Label::bonafide;
  p.score = 1.0 / (1.0 + std::exp(bonafide_logit - attack_logit));
  return p;
}

// ---------------------------------------------------------------------------
// Model

namespace {
// Lets a temporary generator bind to the Rng& constructor for the duration of
// the delegating call.
Rng& seed_rng(Rng&& rng) { return rng; }
}  // namespace

Model::Model(const NetworkSpec& spec, Rng& rng, DType dtype) : spec_(spec), dtype_(dtype) {
  spec_.validate();
  feature_width_ = spec_.feature_width();

  std::size_t in_c = spec_.input_channels;
  for (std::size_t i = 0; i < spec_.base_channels.size(); ++i) {
    ConvBlock block;
    block.conv = Conv2dLayer(in_c, spec_.base_channels[i], spec_.conv_kernels[i], spec_.conv_strides[i],
                             spec_.conv_pads[i], rng, dtype);
    block.bn = BatchNormLayer(spec_.base_channels[i], dtype);
    for (auto idx : spec_.maxpool_after) block.pool_after = block.pool_after || idx == i + 1;
    blocks_.push_back(std::move(block));
    in_c = spec_.base_channels[i];
  }
  for (const auto& w : spec_.branch_widths) {
    Branch b;
    b.fc1 = LinearLayer(feature_width_, w[0], rng, dtype);
    b.fc2 = LinearLayer(w[0], w[1], rng, dtype);
    b.fc3 = LinearLayer(w[1], w[2], rng, dtype);
    branches_.push_back(std::move(b));
  }
  head_ = LinearLayer(spec_.fusion_width(), spec_.head_out, rng, dtype);
  for (auto& b : branches_) {
    b.drop1 = DropoutLayer(spec_.dropout_rate, rng.split());
    b.drop2 = DropoutLayer(spec_.dropout_rate, rng.split());
  }
}

Model::Model(const NetworkSpec& spec, std::uint64_t seed, DType dtype) : Model(spec, seed_rng(Rng(seed)), dtype) {}

ForwardResult Model::forward(const Tensor& x, Mode mode, const ForwardOptions& options) {
  return forward(Var(x.dtype() == dtype_ ? x : x.to(dtype_)), mode, options);
}

ForwardResult Model::forward(const Var& x, Mode mode, const ForwardOptions& options) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != spec_.input_channels || s[2] != spec_.input_size || s[3] != spec_.input_size) {
    throw DimensionError("model input must be [B," + std::to_string(spec_.input_channels) + "," +
                         std::to_string(spec_.input_size) + "," + std::to_string(spec_.input_size) + "], got " +
                         shape_string(s));
  }
  if (x.dtype() != dtype_) throw DimensionError("model input dtype " + to_string(x.dtype()) + ", model is " + to_string(dtype_));
  if (!options.branch_gradient.empty() && options.branch_gradient.size() != branches_.size()) {
    throw ContractError("branch_gradient has " + std::to_string(options.branch_gradient.size()) + " entries for " +
                        std::to_string(branches_.size()) + " branches");
  }

  ForwardResult out;
  Var h = x;
  std::size_t pools = 0;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& block = blocks_[i];
    h = block.bn.forward(relu(block.conv.forward(h)), mode);
    if (options.record_stages) out.stages.emplace_back("conv" + std::to_string(i + 1), h);
    if (block.pool_after) {
      h = maxpool2d(h, spec_.maxpool_kernel, spec_.maxpool_stride);
      if (options.record_stages) out.stages.emplace_back("pool" + std::to_string(++pools), h);
    }
  }
  h = avgpool2d(h, spec_.avgpool_kernel, spec_.avgpool_kernel);
  if (options.record_stages) out.stages.emplace_back("avgpool", h);
  out.features = reshape(h, {s[0], feature_width_});

  for (std::size_t b = 0; b < branches_.size(); ++b) {
    auto& br = branches_[b];
    const bool flows = options.branch_gradient.empty() || options.branch_gradient[b];
    Var in = flows ? out.features : detach(out.features);
    Var a1 = relu(br.fc1.forward(br.drop1.forward(in, mode)));
    Var a2 = relu(br.fc2.forward(br.drop2.forward(a1, mode)));
    out.branch_logits.push_back(br.fc3.forward(a2));
    out.branch_hidden.push_back({a1, a2});
  }
  out.fused = concat(out.branch_logits, 1);
  out.logits = head_.forward(out.fused);
  return out;
}

Var Model::loss(const ForwardResult& out, std::span<const int> labels) const {
  if (labels.empty()) throw ContractError("loss: empty batch");
  if (labels.size() != out.logits.shape()[0]) {
    throw ContractError("loss: " + std::to_string(labels.size()) + " labels for a batch of " +
                        std::to_string(out.logits.shape()[0]));
  }
  return softmax_cross_entropy(out.logits, labels);
}

std::vector<Prediction> Model::predict(const Tensor& x) {
  NoGradGuard guard;
  const Tensor logits = forward(x, Mode::eval).logits.value();
  const std::size_t k = logits.dim(1);
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    out.push_back(decide(logits.at(i * k + class_index(Label::bonafide)), logits.at(i * k + class_index(Label::attack))));
  }
  return out;
}

NamedParameters Model::named_parameters() const {
  NamedParameters out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].conv.collect("conv" + std::to_string(i + 1), out);
    blocks_[i].bn.collect("bn" + std::to_string(i + 1), out);
  }
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    const std::string p = "branch" + std::to_string(b + 1);
    branches_[b].fc1.collect(p + ".fc1", out);
    branches_[b].fc2.collect(p + ".fc2", out);
    branches_[b].fc3.collect(p + ".fc3", out);
  }
  head_.collect("head", out);
  return out;
}

std::vector<Var> Model::parameters() const {
  std::vector<Var> out;
  for (auto& [name, v] : named_parameters()) out.push_back(v);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : named_parameters()) n += v.value().numel();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "bn" + std::to_string(i + 1);
    out.emplace_back(p + ".running_mean", &blocks_[i].bn.running_mean);
    out.emplace_back(p + ".running_var", &blocks_[i].bn.running_var);
  }
  return out;
}

std::vector<std::pair<std::string, Rng*>> Model::named_rngs() {
  std::vector<std::pair<std::string, Rng*>> out;
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    const std::string p = "branch" + std::to_string(b + 1);
    out.emplace_back(p + ".drop1", &branches_[b].drop1.rng);
    out.emplace_back(p + ".drop2", &branches_[b].drop2.rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

const Tensor* CheckpointData::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

CheckpointData Model::to_checkpoint(std::uint64_t epoch) {
  CheckpointData data;
  data.spec = spec_;
  data.dtype = dtype_;
  data.epoch = epoch;
  for (const auto& [name, v] : named_parameters()) data.tensors.emplace_back(name, v.value());
  for (const auto& [name, t] : named_buffers()) data.tensors.emplace_back(name, *t);
  for (const auto& [name, r] : named_rngs()) data.rng_states.emplace_back(name, r->state());
  return data;
}

Model Model::from_checkpoint(const CheckpointData& data) {
  Rng scratch(0);
  Model model(data.spec, scratch, data.dtype);
  auto restore = [&](const std::string& name, Tensor& dst) {
    const Tensor* src = data.find(name);
    if (src == nullptr) throw CheckpointShapeError("checkpoint lacks tensor '" + name + "'");
    if (src->shape() != dst.shape() || src->dtype() != dst.dtype()) {
      throw CheckpointShapeError("checkpoint tensor '" + name + "' is " + shape_string(src->shape()) + " " +
                                 to_string(src->dtype()) + ", spec expects " + shape_string(dst.shape()) + " " +
                                 to_string(dst.dtype()));
    }
    dst = *src;
  };
  for (auto& [name, v] : model.named_parameters()) restore(name, v.mutable_value());
  for (auto& [name, t] : model.named_buffers()) restore(name, *t);
  for (auto& [name, r] : model.named_rngs()) {
    bool found = false;
    for (const auto& [n, state] : data.rng_states) {
      if (n == name) {
        *r = Rng::from_state(state);
        found = true;
      }
    }
    if (!found) throw CheckpointCorruptError("checkpoint lacks rng state '" + name + "'");
  }
  return model;
}

void Model::save(const std::string& path, std::uint64_t epoch) { write_checkpoint(path, to_checkpoint(epoch)); }

Model Model::load(const std::string& path) { return from_checkpoint(read_checkpoint(path)); }

namespace {

constexpr const char* kMagic = "MVAPADCKPT";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::size_t element_size(DType d) { return d == DType::f64 ? sizeof(double) : sizeof(float); }

DType parse_dtype(const std::string& s, const std::string& path) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw CheckpointCorruptError(path + ": unknown dtype '" + s + "'");
}

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ostringstream head;
  head << kMagic << '\n'
       << "version = " << kCheckpointVersion << '\n'
       << "dtype = " << to_string(data.dtype) << '\n'
       << "epoch = " << data.epoch << '\n';
  if (data.optimizer_step) head << "optimizer.step = " << *data.optimizer_step << '\n';
  for (const auto& kv : parse_key_values(data.spec.to_text())) head << "spec." << kv.key << " = " << kv.value << '\n';
  for (const auto& [name, state] : data.rng_states) {
    head << "rng." << name << " = " << hex64(state[0]) << ',' << hex64(state[1]) << ',' << hex64(state[2]) << ','
         << hex64(state[3]) << '\n';
  }
  for (const auto& [name, t] : data.tensors) {
    std::string dims;
    for (std::size_t i = 0; i < t.rank(); ++i) dims += (i ? "," : "") + std::to_string(t.dim(i));
    head << "tensor = " << name << ' ' << to_string(t.dtype()) << ' ' << (dims.empty() ? "scalar" : dims) << '\n';
  }
  head << "end\n";

  std::ofstream out(path, std::ios::binary);
  const std::string h = head.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, t] : data.tensors) {
    t.visit([&](auto s) {
      out.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size_bytes()));
    });
  }
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
}

CheckpointData read_checkpoint(const std::string& path) {
  const std::string bytes = read_text_file(path);
  const std::string magic_line = std::string(kMagic) + "\n";
  if (bytes.compare(0, magic_line.size(), magic_line) != 0) {
    throw CheckpointCorruptError(path + ": not a checkpoint (bad magic)");
  }
  const auto end_pos = bytes.find("\nend\n");
  if (end_pos == std::string::npos) throw CheckpointCorruptError(path + ": header has no end marker");
  const std::string header = bytes.substr(magic_line.size(), end_pos + 1 - magic_line.size());
  const std::size_t payload_start = end_pos + 5;

  std::vector<KeyValue> entries;
  try {
    entries = parse_key_values(header, path);
  } catch (const FormatError& e) {
    throw CheckpointCorruptError(e.what());
  }
  if (entries.empty() || entries.front().key != "version") {
    throw CheckpointCorruptError(path + ": header lacks a version line");
  }
  if (entries.front().value != std::to_string(kCheckpointVersion)) {
    throw CheckpointVersionError(path + ": checkpoint version " + entries.front().value + ", this build reads " +
                                 std::to_string(kCheckpointVersion));
  }

  CheckpointData data;
  std::string spec_text;
  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
  };
  std::vector<Entry> table;
  bool have_dtype = false;
  try {
    for (std::size_t i = 1; i < entries.size(); ++i) {
      const auto& kv = entries[i];
      const std::string what = path + ": header line " + std::to_string(kv.line + 1);
      if (kv.key == "dtype") {
        data.dtype = parse_dtype(kv.value, path);
        have_dtype = true;
      } else if (kv.key == "epoch") {
        data.epoch = parse_u64(kv.value, what);
      } else if (kv.key == "optimizer.step") {
        data.optimizer_step = parse_u64(kv.value, what);
      } else if (kv.key.rfind("spec.", 0) == 0) {
        spec_text += kv.key.substr(5) + " = " + kv.value + "\n";
      } else if (kv.key.rfind("rng.", 0) == 0) {
        const auto words = split(kv.value, ',');
        if (words.size() != 4) throw CheckpointCorruptError(what + ": rng state needs 4 words");
        Rng::State st{};
        for (std::size_t w = 0; w < 4; ++w) {
          std::size_t used = 0;
          st[w] = std::stoull(words[w], &used, 16);
          if (used != words[w].size()) throw CheckpointCorruptError(what + ": bad rng word '" + words[w] + "'");
        }
        data.rng_states.emplace_back(kv.key.substr(4), st);
      } else if (kv.key == "tensor") {
        std::istringstream in(kv.value);
        std::string name, dt, dims, extra;
        if (!(in >> name >> dt >> dims) || (in >> extra)) throw CheckpointCorruptError(what + ": bad tensor entry");
        Entry e{name, parse_dtype(dt, path), {}};
        if (dims != "scalar") {
          for (const auto& d : split(dims, ',')) {
            e.shape.push_back(parse_size(d, what));
            if (e.shape.back() == 0) throw CheckpointCorruptError(what + ": zero dimension");
          }
        }
        table.push_back(std::move(e));
      } else {
        throw CheckpointCorruptError(what + ": unknown header key '" + kv.key + "'");
      }
    }
  } catch (const CheckpointCorruptError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointCorruptError(path + ": " + e.what());
  }
  if (!have_dtype) throw CheckpointCorruptError(path + ": header lacks dtype");
  try {
    data.spec = NetworkSpec::from_text(spec_text);
  } catch (const ValidationError& e) {
    throw CheckpointCorruptError(path + ": embedded spec invalid: " + e.what());
  }

  std::size_t expected = payload_start;
  for (const auto& e : table) expected += shape_numel(e.shape) * element_size(e.dtype);
  if (bytes.size() != expected) {
    throw CheckpointCorruptError(path + ": payload is " + std::to_string(bytes.size() - payload_start) +
                                 " bytes, header describes " + std::to_string(expected - payload_start));
  }
  std::size_t pos = payload_start;
  for (const auto& e : table) {
    Tensor t(e.shape, e.dtype);
    t.visit([&](auto s) {
      std::memcpy(s.data(), bytes.data() + pos, s.size_bytes());
      pos += s.size_bytes();
    });
    data.tensors.emplace_back(e.name, std::move(t));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Feature export

std::vector<std::string> export_features(Model& model, const Tensor& x, const std::string& layer,
                                         const std::string& out_dir) {
  NoGradGuard guard;
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  auto path_of = [&](const std::string& file) { return (std::filesystem::path(out_dir) / file).string(); };
  auto write_csv = [&](const std::string& file, const std::vector<Tensor>& parts) {
    std::ofstream out(path_of(file));
    const std::size_t rows = parts.front().dim(0);
    std::vector<std::string> cols;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      for (std::size_t c = 0; c < parts[p].dim(1); ++c) {
        cols.push_back((parts.size() > 1 ? "fc" + std::to_string(p + 1) + "_" : "f") + std::to_string(c));
      }
    }
    out << "sample";
    for (const auto& c : cols) out << ',' << c;
    out << '\n';
    for (std::size_t r = 0; r < rows; ++r) {
      out << r;
      for (const auto& t : parts) {
        const std::size_t w = t.dim(1);
        for (std::size_t c = 0; c < w; ++c) out << ',' << format_double(t.at(r * w + c));
      }
      out << '\n';
    }
    if (!out) throw IoError("cannot write '" + path_of(file) + "'");
    written.push_back(path_of(file));
  };

  const bool is_conv = layer.rfind("conv", 0) == 0;
  const bool is_branch = layer.rfind("branch", 0) == 0;
  std::size_t index = 0;
  if (is_conv || is_branch) {
    const std::string digits = layer.substr(is_conv ? 4 : 6);
    const std::size_t limit = is_conv ? model.blocks().size() : model.branches().size();
    bool ok = !digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos && digits.size() < 6;
    if (ok) index = std::stoul(digits);
    if (!ok || index < 1 || index > limit) throw ContractError("export_features: unknown layer id '" + layer + "'");
  } else if (layer != "base") {
    throw ContractError("export_features: unknown layer id '" + layer + "' (conv1..conv" +
                        std::to_string(model.blocks().size()) + ", base, branch1..branch" +
                        std::to_string(model.branches().size()) + ")");
  }

  ForwardOptions options;
  options.record_stages = is_conv;
  const ForwardResult out = model.forward(x, Mode::eval, options);
  if (layer == "base") {
    write_csv("base_features.csv", {out.features.value()});
  } else if (is_branch) {
    const auto& hidden = out.branch_hidden[index - 1];
    write_csv(layer + "_features.csv", {hidden[0].value(), hidden[1].value()});
  } else {
    Tensor map;
    for (const auto& [name, v] : out.stages) {
      if (name == layer) map = v.value();
    }
    const std::size_t b = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
    std::vector<double> plane(h * w);
    for (std::size_t s = 0; s < b; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (s * c + ch) * h * w;
        for (std::size_t i = 0; i < h * w; ++i) plane[i] = map.at(base + i);
        const std::string file = path_of(layer + "_s" + std::to_string(s) + "_c" + std::to_string(ch) + ".pgm");
        write_pgm(file, normalize_to_image(plane, h, w));
        written.push_back(file);
      }
    }
  }
  return written;
}

}  // namespace mvapad
