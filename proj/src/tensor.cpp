#include "mvapad/tensor.hpp"

#include <cstring>
#include <sstream>

namespace mvapad {

std::string to_string(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
  }
  const auto n = shape_numel(shape_);
  if (dtype == DType::f64) {
    data_ = std::vector<double>(n, 0.0);
  } else {
    data_ = std::vector<float>(n, 0.0f);
  }
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.visit([&](auto s) {
    using T = typename decltype(s)::value_type;
    std::fill(s.begin(), s.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (shape_numel(t.shape_) != values.size()) {
    throw DimensionError("shape " + shape_string(t.shape_) + " needs " + std::to_string(shape_numel(t.shape_)) +
                         " values, got " + std::to_string(values.size()));
  }
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (shape_numel(t.shape_) != values.size()) {
    throw DimensionError("shape " + shape_string(t.shape_) + " needs " + std::to_string(shape_numel(t.shape_)) +
                         " values, got " + std::to_string(values.size()));
  }
  t.data_ = std::move(values);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Tensor::at(std::size_t flat) const {
  return visit([&](auto s) { return static_cast<double>(s[flat]); });
}

void Tensor::set(std::size_t flat, double value) {
  visit([&](auto s) { s[flat] = static_cast<typename decltype(s)::value_type>(value); });
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return visit([](auto s) { return std::vector<double>(s.begin(), s.end()); });
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return *this;
  Tensor out(shape_, target);
  visit([&](auto src) {
    out.visit([&](auto dst) {
      using D = typename decltype(dst)::value_type;
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

bool Tensor::identical(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype() != other.dtype() || numel() != other.numel()) return false;
  return visit([&](auto a) {
    using T = typename decltype(a)::value_type;
    auto b = other.data<T>();
    return std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
  });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " +
                         to_string(b.dtype()));
  }
}

}  // namespace mvapad
