#include "facedyn/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace facedyn {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimension must be positive, got shape " + shape_to_string(shape_));
  }
  if (product(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimension must be positive, got shape " + shape_to_string(shape_));
  }
  data_.assign(product(shape_), real(0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, real value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::vector(std::vector<real> values) {
  std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = real(1);
  return t;
}

bool Tensor::all_finite() const {
  for (real v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(real value) { data_.assign(data_.size(), value); }

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0xa5a5a5a5deadbeefULL)) {}

std::uint64_t Rng::next_u64() {
  state_ = splitmix64(state_);
  return state_;
}

real Rng::uniform(real lo, real hi) {
  // 53 random bits into [0,1).
  const double u = double(next_u64() >> 11) * 0x1.0p-53;
  return real(lo + (hi - lo) * u);
}

real Rng::normal(real mean, real stddev) {
  // Box-Muller; one sample per call keeps the stream layout simple.
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = double(next_u64() >> 11) * 0x1.0p-53;
  const double u2 = double(next_u64() >> 11) * 0x1.0p-53;
  const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  return real(mean + stddev * z);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw Error("Rng::below requires n > 0");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return std::size_t(v % n);
}

Rng Rng::derive(std::uint64_t tag) const {
  return Rng(splitmix64(state_ ^ splitmix64(tag ^ 0x517cc1b727220a95ULL)));
}

}  // namespace facedyn
