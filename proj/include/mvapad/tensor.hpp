#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "mvapad/error.hpp"

namespace mvapad {

enum class DType { f32, f64 };

using Shape = std::vector<std::size_t>;

std::string to_string(DType dtype);
std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
inline constexpr DType dtype_of = std::is_same_v<T, double> ? DType::f64 : DType::f32;

/// Dense row-major N-d array of f32 or f64 scalars.
///
/// A Tensor is a value: copies are deep and no operation in the library
/// mutates its inputs. The element count always equals the product of the
/// shape dimensions; a rank-0 tensor built through a factory holds one
/// scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);

  static Tensor zeros(Shape shape, DType dtype = DType::f32) { return Tensor(std::move(shape), dtype); }
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32) { return full({}, value, dtype); }
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor from(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  DType dtype() const { return std::holds_alternative<std::vector<double>>(data_) ? DType::f64 : DType::f32; }
  /// True only for a default-constructed tensor, which holds no storage.
  bool empty() const {
    return std::visit([](const auto& v) { return v.empty(); }, data_);
  }

  template <typename T>
  std::span<T> data() {
    check_type<T>();
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <typename T>
  std::span<const T> data() const {
    check_type<T>();
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  /// Applies `fn` to the typed storage span (float or double).
  template <typename F>
  decltype(auto) visit(F&& fn) {
    return std::visit([&](auto& v) -> decltype(auto) { return fn(std::span(v)); }, data_);
  }
  template <typename F>
  decltype(auto) visit(F&& fn) const {
    return std::visit([&](const auto& v) -> decltype(auto) { return fn(std::span(v)); }, data_);
  }

  double at(std::size_t flat) const;
  void set(std::size_t flat, double value);
  double item() const;

  std::vector<double> to_vector() const;
  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;

  /// Bitwise equality of shape, dtype and payload.
  bool identical(const Tensor& other) const;

 private:
  template <typename T>
  void check_type() const {
    if (dtype() != dtype_of<T>) {
      throw ContractError("tensor dtype is " + to_string(dtype()) + ", accessed as " + to_string(dtype_of<T>));
    }
  }

  Shape shape_;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

/// Throws DimensionError unless both tensors share shape and dtype.
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace mvapad
