#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace facedyn {

#ifdef FACEDYN_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

// Error taxonomy. The CLI maps these onto its exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};

// Dense row-major tensor. Shape product always equals data length.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<real> data);
  explicit Tensor(std::vector<std::size_t> shape);  // zero-filled

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, real value);
  static Tensor scalar(real value) { return Tensor({1}, {value}); }
  static Tensor vector(std::vector<real> values);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return data_.empty(); }

  // 2-D helpers; a 1-D tensor behaves as a single row.
  std::size_t rows() const { return ndim() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const { return ndim() >= 2 ? shape_[1] : numel(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& values() { return data_; }
  const std::vector<real>& values() const { return data_; }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }
  real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(real value);

  // Bitwise equality of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<real> data_;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Deterministic RNG used everywhere randomness is needed. Child streams are
// derived by hashing so that independent components never share a stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  real uniform(real lo, real hi);
  real normal(real mean, real stddev);
  std::size_t below(std::size_t n);  // uniform in [0, n)
  Rng derive(std::uint64_t tag) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace facedyn
