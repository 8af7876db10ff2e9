#include "mvapad/network_spec.hpp"

#include <algorithm>
#include <sstream>

#include "mvapad/keyvalue.hpp"
#include "mvapad/layers.hpp"

namespace mvapad {

NetworkSpec NetworkSpec::small() {
  NetworkSpec s;
  s.input_size = 64;
  s.base_channels = {16, 24, 32, 32, 32};
  s.conv_strides = {2, 1, 1, 1, 1};
  s.avgpool_kernel = 2;
  s.branch_widths = {{128, 64, 2}, {64, 32, 2}, {32, 16, 2}};
  return s;
}

std::size_t NetworkSpec::fusion_width() const {
  std::size_t w = 0;
  for (const auto& b : branch_widths) w += b.empty() ? 0 : b.back();
  return w;
}

void NetworkSpec::validate() const {
  const std::size_t blocks = base_channels.size();
  if (blocks == 0) throw ContractError("network spec: no conv blocks");
  if (conv_kernels.size() != blocks || conv_strides.size() != blocks || conv_pads.size() != blocks) {
    throw ContractError("network spec: base_channels, conv_kernels, conv_strides and conv_pads need equal lengths");
  }
  if (input_channels == 0 || input_size == 0) throw ContractError("network spec: empty input geometry");
  for (std::size_t i = 0; i < blocks; ++i) {
    if (base_channels[i] == 0 || conv_kernels[i] == 0 || conv_strides[i] == 0) {
      throw ContractError("network spec: conv block " + std::to_string(i + 1) + " has a zero size");
    }
  }
  for (auto idx : maxpool_after) {
    if (idx < 1 || idx > blocks) {
      throw ContractError("network spec: maxpool_after index " + std::to_string(idx) + " outside 1.." +
                          std::to_string(blocks));
    }
  }
  if (maxpool_kernel == 0 || maxpool_stride == 0 || avgpool_kernel == 0) {
    throw ContractError("network spec: pool sizes must be positive");
  }
  if (branch_widths.empty()) throw ContractError("network spec: at least one classifier branch is required");
  for (std::size_t b = 0; b < branch_widths.size(); ++b) {
    const auto& w = branch_widths[b];
    if (w.size() != 3) {
      throw ContractError("network spec: branch " + std::to_string(b + 1) + " needs exactly 3 FC widths");
    }
    if (std::find(w.begin(), w.end(), std::size_t{0}) != w.end()) {
      throw ContractError("network spec: branch " + std::to_string(b + 1) + " has a zero width");
    }
    if (w.back() != head_out) {
      throw ContractError("network spec: branch " + std::to_string(b + 1) + " must end in width " +
                          std::to_string(head_out));
    }
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ContractError("network spec: dropout_rate not in [0,1)");
  if (head_out < 2) throw ContractError("network spec: head_out must be at least 2");
}

std::vector<StageShape> NetworkSpec::shape_walk() const {
  validate();
  std::vector<StageShape> stages;
  std::size_t h = input_size;
  std::size_t pools = 0;
  for (std::size_t i = 0; i < base_channels.size(); ++i) {
    h = conv_output_size(h, conv_kernels[i], conv_strides[i], conv_pads[i]);
    stages.push_back({"conv" + std::to_string(i + 1), base_channels[i], h, h});
    if (std::find(maxpool_after.begin(), maxpool_after.end(), i + 1) != maxpool_after.end()) {
      h = pool_output_size(h, maxpool_kernel, maxpool_stride);
      stages.push_back({"pool" + std::to_string(++pools), base_channels[i], h, h});
    }
  }
  h = pool_output_size(h, avgpool_kernel, avgpool_kernel);
  stages.push_back({"avgpool", base_channels.back(), h, h});
  return stages;
}

std::size_t NetworkSpec::feature_width() const {
  const auto last = shape_walk().back();
  return last.channels * last.height * last.width;
}

namespace {
std::string join(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}
}  // namespace

std::string NetworkSpec::to_text() const {
  std::ostringstream os;
  os << "input_channels = " << input_channels << '\n'
     << "input_size = " << input_size << '\n'
     << "base_channels = " << join(base_channels) << '\n'
     << "conv_kernels = " << join(conv_kernels) << '\n'
     << "conv_strides = " << join(conv_strides) << '\n'
     << "conv_pads = " << join(conv_pads) << '\n'
     << "maxpool_after = " << join(maxpool_after) << '\n'
     << "maxpool_kernel = " << maxpool_kernel << '\n'
     << "maxpool_stride = " << maxpool_stride << '\n'
     << "avgpool_kernel = " << avgpool_kernel << '\n'
     << "branch_widths = ";
  for (std::size_t b = 0; b < branch_widths.size(); ++b) os << (b ? "; " : "") << join(branch_widths[b]);
  os << '\n'
     << "dropout_rate = " << format_double(dropout_rate) << '\n'
     << "head_out = " << head_out << '\n';
  return os.str();
}

NetworkSpec NetworkSpec::from_text(const std::string& text, const NetworkSpec& base) {
  NetworkSpec s = base;
  for (const auto& kv : parse_key_values(text, "network spec")) {
    const std::string what = "network spec line " + std::to_string(kv.line) + " (" + kv.key + ")";
    if (kv.key == "input_channels") s.input_channels = parse_size(kv.value, what);
    else if (kv.key == "input_size") s.input_size = parse_size(kv.value, what);
    else if (kv.key == "base_channels") s.base_channels = parse_size_list(kv.value, what);
    else if (kv.key == "conv_kernels") s.conv_kernels = parse_size_list(kv.value, what);
    else if (kv.key == "conv_strides") s.conv_strides = parse_size_list(kv.value, what);
    else if (kv.key == "conv_pads") s.conv_pads = parse_size_list(kv.value, what);
    else if (kv.key == "maxpool_after") s.maxpool_after = parse_size_list(kv.value, what);
    else if (kv.key == "maxpool_kernel") s.maxpool_kernel = parse_size(kv.value, what);
    else if (kv.key == "maxpool_stride") s.maxpool_stride = parse_size(kv.value, what);
    else if (kv.key == "avgpool_kernel") s.avgpool_kernel = parse_size(kv.value, what);
    else if (kv.key == "branch_widths") {
      s.branch_widths.clear();
      for (const auto& branch : split(kv.value, ';')) s.branch_widths.push_back(parse_size_list(branch, what));
    } else if (kv.key == "dropout_rate") s.dropout_rate = parse_double(kv.value, what);
    else if (kv.key == "head_out") s.head_out = parse_size(kv.value, what);
    else throw FormatError("network spec line " + std::to_string(kv.line) + ": unknown key '" + kv.key + "'");
  }
  s.validate();
  return s;
}

NetworkSpec NetworkSpec::from_text(const std::string& text) { return from_text(text, NetworkSpec{}); }

}  // namespace mvapad
