#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vik {

// Error taxonomy. The CLI maps these onto its exit-code contract:
// config/shape/usage -> 2, data/format -> 3, numerical -> 4.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

// Dense row-major tensor. Element count always equals the product of the
// extents; the 64-bit instantiation exists for gradient checks and oracles.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), S(0)) {}

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("data length does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& storage() { return data_; }
  const std::vector<S>& storage() const { return data_; }

  S& operator[](std::int64_t i) { return data_[i]; }
  const S& operator[](std::int64_t i) const { return data_[i]; }

  S& operator()(int a) { return data_[a]; }
  const S& operator()(int a) const { return data_[a]; }
  S& operator()(int a, int b) { return data_[static_cast<std::int64_t>(a) * shape_[1] + b]; }
  const S& operator()(int a, int b) const {
    return data_[static_cast<std::int64_t>(a) * shape_[1] + b];
  }
  S& operator()(int a, int b, int c) {
    return data_[(static_cast<std::int64_t>(a) * shape_[1] + b) * shape_[2] + c];
  }
  const S& operator()(int a, int b, int c) const {
    return data_[(static_cast<std::int64_t>(a) * shape_[1] + b) * shape_[2] + c];
  }
  S& operator()(int a, int b, int c, int d) {
    return data_[((static_cast<std::int64_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  const S& operator()(int a, int b, int c, int d) const {
    return data_[((static_cast<std::int64_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }

  void fill(S value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<T>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

// Views a contiguous tensor (or a slice of it) as a rows x cols matrix.
template <typename S>
MatMap<S> as_matrix(Tensor<S>& t, std::int64_t rows, std::int64_t cols, std::int64_t offset = 0) {
  return MatMap<S>(t.data() + offset, rows, cols);
}

template <typename S>
ConstMatMap<S> as_matrix(const Tensor<S>& t, std::int64_t rows, std::int64_t cols,
                         std::int64_t offset = 0) {
  return ConstMatMap<S>(t.data() + offset, rows, cols);
}

template <typename S>
ArrMap<S> as_array(Tensor<S>& t) {
  return ArrMap<S>(t.data(), t.size());
}

template <typename S>
ConstArrMap<S> as_array(const Tensor<S>& t) {
  return ConstArrMap<S>(t.data(), t.size());
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (std::int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

template <typename S>
void require_finite(const Tensor<S>& t, const std::string& what) {
  if (!all_finite(t)) throw NumericalError("non-finite values in " + what);
}

// Deterministic random source. Draw algorithms are pinned here (rather than
// relying on std distributions) so the same seed reproduces the same bytes
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(static_cast<std::mt19937::result_type>(seed)) {}

  std::uint32_t next_u32() { return gen_(); }

  // uniform in [0, 1) with 24 bits of resolution
  double uniform01() { return static_cast<double>(next_u32() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; one fresh pair of uniforms per draw
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 <= 0.0) u1 = 1.0 / 16777216.0;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // uniform integer in [0, n)
  int below(int n) { return static_cast<int>(uniform01() * n) % n; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = below(i + 1);
      std::swap(v[i], v[j]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (!is) throw FormatError("invalid RNG state string");
  }

 private:
  std::mt19937 gen_;
};

template <typename S>
Tensor<S> random_uniform(Shape shape, Rng& rng, S lo, S hi) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return t;
}

template <typename S>
Tensor<S> random_normal(Shape shape, Rng& rng, S mean = S(0), S stddev = S(1)) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(static_cast<double>(mean) +
                          static_cast<double>(stddev) * rng.normal());
  return t;
}

// Learnable tensor paired with its gradient accumulator.
template <typename S>
struct Param {
  Tensor<S> value;
  Tensor<S> grad;

  Param() = default;
  explicit Param(Tensor<S> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(S(0)); }
  std::int64_t size() const { return value.size(); }
};

}  // namespace vik
