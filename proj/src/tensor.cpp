#include "mscrack/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mscrack {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, DType dtype)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0), dtype_(dtype) {}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
  if (dtype_ == DType::F32) {
    for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_, dtype_);
}

Tensor Tensor::as_dtype(DType dtype) const { return Tensor(shape_, data_, dtype); }

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (o.shape_ != shape_) {
    throw ShapeError("add: shape " + shape_str(o.shape_) + " vs " + shape_str(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& x : data_) x *= s;
  return *this;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " +
                     shape_str(t.shape()));
  }
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "MSCM I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  auto offset = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw ParseError(std::string("MSCM: truncated ") + what + " at byte offset " +
                     std::to_string(offset));
  }
  return v;
}

}  // namespace

void write_mscm(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw ShapeError("MSCM: rank exceeds 255");
  os.write("MSCM", 4);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint64_t>(os, e);
  if (t.dtype() == DType::F64) {
    os.write(reinterpret_cast<const char*>(t.ptr()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    std::vector<float> buf(t.data().begin(), t.data().end());
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
}

Tensor read_mscm(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MSCM", 4) != 0) {
    throw ParseError("MSCM: bad magic at byte offset 0");
  }
  auto code = get<std::uint8_t>(is, "dtype code");
  if (code != 1 && code != 2) {
    throw ParseError("MSCM: unknown dtype code " + std::to_string(code) + " at byte offset 4");
  }
  auto rank = get<std::uint8_t>(is, "rank");
  Shape shape(rank);
  for (auto& e : shape) e = get<std::uint64_t>(is, "extent");
  const auto n = shape_numel(shape);
  std::vector<double> data(n);
  auto offset = static_cast<long long>(is.tellg());
  if (code == 2) {
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(n * sizeof(double)))) {
      throw ParseError("MSCM: truncated payload starting at byte offset " +
                       std::to_string(offset));
    }
    return Tensor(std::move(shape), std::move(data), DType::F64);
  }
  std::vector<float> buf(n);
  if (!is.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(n * sizeof(float)))) {
    throw ParseError("MSCM: truncated payload starting at byte offset " + std::to_string(offset));
  }
  for (std::size_t i = 0; i < n; ++i) data[i] = buf[i];
  return Tensor(std::move(shape), std::move(data), DType::F32);
}

void save_mscm(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_mscm(os, t);
  if (!os) throw Error("write failed: " + path.string());
}

Tensor load_mscm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_mscm(is);
}

}  // namespace mscrack
