#pragma once

#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

#include "iekd/error.hpp"
#include "iekd/rng.hpp"

namespace iekd {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit floats. `grad`, when allocated, mirrors
/// `data` and is the accumulation target for Tape::backward on bound parameters.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless this tensor is a tracked parameter

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0);
  /// Kaiming-uniform fan-in init with leaky-ReLU gain, a = negative slope.
  static Tensor kaiming_uniform(Shape s, std::int64_t fan_in, Rng& rng, double a = 0.1);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
  std::int64_t extent(std::int64_t axis) const { return shape[static_cast<std::size_t>(axis)]; }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool is_scalar() const { return numel() == 1; }
  double scalar_value() const;

  void ensure_grad();  // allocates zeros if absent
  void zero_grad();

  /// Reinterpret as a new shape with identical element count.
  Tensor reshaped(Shape s) const;
};

/// Binary layout: magic "IEKT", u32 version, u32 rank, i64 extents[rank],
/// f64 data[numel]; every field little-endian. See docs/FORMATS.md.
void save_tensor(std::ostream& out, const Tensor& t);
Tensor load_tensor(std::istream& in);
void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace iekd
