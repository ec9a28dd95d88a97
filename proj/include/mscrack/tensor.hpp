#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mscrack/error.hpp"

namespace mscrack {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major array. Values are held in double precision; the dtype tag
// selects the on-disk width and F32 tensors have their values rounded to float.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::F64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::F64);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), t.dtype()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  DType dtype() const { return dtype_; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Tensor reshaped(Shape shape) const;
  Tensor as_dtype(DType dtype) const;

  void fill(double v);
  Tensor& operator+=(const Tensor& o);
  Tensor& operator*=(double s);

  bool all_finite() const;
  bool operator==(const Tensor& o) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::F64;
};

void require_shape(const Tensor& t, const Shape& expected, const char* what);

// Named views onto learnable tensors, in a fixed order.
using ParamList = std::vector<std::pair<std::string, Tensor*>>;
using ConstParamList = std::vector<std::pair<std::string, const Tensor*>>;

// MSCM binary format: "MSCM", u8 dtype code, u8 rank, rank x u64 LE extents,
// then LE scalars row-major.
void write_mscm(std::ostream& os, const Tensor& t);
Tensor read_mscm(std::istream& is);
void save_mscm(const std::filesystem::path& path, const Tensor& t);
Tensor load_mscm(const std::filesystem::path& path);

}  // namespace mscrack
