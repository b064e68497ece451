// Dense row-major tensors, the small set of kernels the rest of the library
// needs, and the BCT1 container format.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace bcosvit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NonFiniteError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

using Dims = std::vector<std::size_t>;

inline std::string dims_str(const Dims& d) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "x" : "") << d[i];
  os << ']';
  return os.str();
}

inline std::size_t dims_product(const Dims& d) {
  return std::accumulate(d.begin(), d.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major dense tensor. The last extent varies fastest.
template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Dims dims, T fill = T(0)) : dims_(std::move(dims)), data_(dims_product(dims_), fill) {
    check_dims();
  }
  Tensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != dims_product(dims_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match extents " +
                       dims_str(dims_));
  }

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
  static Tensor scalar(T v) { return Tensor(Dims{1}, std::vector<T>{v}); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    std::vector<T> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged rows");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Dims{rows.size(), cols}, std::move(data));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(Dims{n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T(1);
    return t;
  }

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return rank() == 0 ? 0 : dims_[0]; }
  std::size_t cols() const { return rank() < 2 ? 1 : numel() / std::max<std::size_t>(dims_[0], 1); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * dims_.back() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * dims_.back() + j]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * dims_[1] + j) * dims_[2] + k]; }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  Tensor reshaped(Dims d) const {
    if (dims_product(d) != numel())
      throw ShapeError("cannot reshape " + dims_str(dims_) + " to " + dims_str(d));
    return Tensor(std::move(d), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }
  void require_finite(const char* what) const {
    if (!all_finite()) throw NonFiniteError(std::string("non-finite value in ") + what);
  }

  T max_abs() const {
    T m = 0;
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }
  T sum() const {
    T s = 0;
    for (T v : data_) s += v;
    return s;
  }

  Tensor& operator+=(const Tensor& o) {
    same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }
  friend Tensor operator*(T s, Tensor a) { return a *= s; }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.dims_ == b.dims_ && a.data_ == b.data_; }

  void same_shape(const Tensor& o, const char* op) const {
    if (o.dims_ != dims_) throw ShapeError(std::string(op) + ": " + dims_str(dims_) + " vs " + dims_str(o.dims_));
  }

 private:
  void check_dims() const {
    for (auto d : dims_)
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + dims_str(dims_));
  }

  Dims dims_;
  std::vector<T> data_;
};

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

/// Views a tensor as rows x cols, with cols the product of all trailing extents.
template <class T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}
template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols()));
}

inline void require_rank2(const Dims& d, const char* op) {
  if (d.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + dims_str(d));
}

/// a[m x k] * b[k x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.dims(), "matmul");
  require_rank2(b.dims(), "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner extents differ " + dims_str(a.dims()) + " * " + dims_str(b.dims()));
  Tensor<T> out(Dims{a.dim(0), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

/// a[m x k] * b[n x k]^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.dims(), "matmul_nt");
  require_rank2(b.dims(), "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: inner extents differ " + dims_str(a.dims()) + " * " + dims_str(b.dims()) + "^T");
  Tensor<T> out(Dims{a.dim(0), b.dim(0)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return out;
}

/// a[k x m]^T * b[k x n]
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.dims(), "matmul_tn");
  require_rank2(b.dims(), "matmul_tn");
  if (a.dim(0) != b.dim(0))
    throw ShapeError("matmul_tn: inner extents differ " + dims_str(a.dims()) + "^T * " + dims_str(b.dims()));
  Tensor<T> out(Dims{a.dim(1), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a).transpose() * as_matrix(b);
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a.dims(), "transpose");
  Tensor<T> out(Dims{a.dim(1), a.dim(0)});
  as_matrix(out) = as_matrix(a).transpose();
  return out;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) throw ShapeError("max_abs_diff: size mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// BCT1 container: "BCT1", u8 dtype (0 = f32, 1 = f64), u8 rank, 2 reserved
// bytes, rank little-endian u64 extents, row-major little-endian payload.

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U> || std::is_floating_point_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

}  // namespace detail

template <class T>
void write_bct1(std::ostream& os, const Tensor<T>& t) {
  os.write("BCT1", 4);
  detail::put_le<std::uint8_t>(os, std::is_same_v<T, float> ? 0 : 1);
  if (t.rank() > 255) throw FormatError("rank too large for BCT1");
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  detail::put_le<std::uint16_t>(os, 0);
  for (auto d : t.dims()) detail::put_le<std::uint64_t>(os, d);
  for (T v : t.values()) detail::put_le<T>(os, v);
  if (!os) throw FormatError("write failed");
}

/// Reads a BCT1 tensor of either dtype, converting to T.
template <class T>
Tensor<T> read_bct1(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "BCT1", 4) != 0) throw FormatError("bad BCT1 magic");
  auto dtype = detail::get_le<std::uint8_t>(is);
  auto rank = detail::get_le<std::uint8_t>(is);
  detail::get_le<std::uint16_t>(is);
  if (dtype > 1) throw FormatError("unknown BCT1 dtype " + std::to_string(dtype));
  Dims dims(rank);
  for (auto& d : dims) {
    d = detail::get_le<std::uint64_t>(is);
    if (d == 0 || d > (std::uint64_t{1} << 40)) throw FormatError("implausible BCT1 extent");
  }
  std::vector<T> data(dims_product(dims));
  for (auto& v : data) v = dtype == 0 ? T(detail::get_le<float>(is)) : T(detail::get_le<double>(is));
  return Tensor<T>(std::move(dims), std::move(data));
}

}  // namespace bcosvit
