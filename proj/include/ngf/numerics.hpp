#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ngf::numerics {

using Vector = std::vector<double>;

/// Dense row-major array of doubles with rank <= 4.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  // Rank-2 element access.
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  /// Slice along the first axis.
  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;
  std::size_t row_size() const noexcept;

  bool all_finite() const noexcept;
  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

class SquareMatrix {
 public:
  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t dim, double fill = 0.0);
  SquareMatrix(std::size_t dim, std::vector<double> data);

  static SquareMatrix identity(std::size_t dim);
  static SquareMatrix diagonal(std::span<const double> diag);

  std::size_t dim() const noexcept { return dim_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * dim_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * dim_ + j]; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  double trace() const noexcept;
  Vector diag() const;
  /// Replaces A with (A + A^T) / 2.
  void symmetrize() noexcept;
  bool is_symmetric(double rel_tol = 1e-12) const noexcept;
  Vector multiply(std::span<const double> x) const;
  Tensor as_tensor() const;

 private:
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

/// Counter-based splittable generator. Draw i of stream s under seed k is a
/// fixed function of (k, s, i), so sequences do not depend on platform or on
/// how other streams were consumed.
class RngState {
 public:
  RngState() = default;
  explicit RngState(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Independent child stream; does not advance this state.
  RngState split(std::uint64_t child) const noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, bound); bound must be positive.
  std::uint64_t below(std::uint64_t bound) noexcept;
  double gaussian() noexcept;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

Vector draw_gaussian(RngState& rng, std::size_t n);
Vector draw_rademacher(RngState& rng, std::size_t n);

/// In-place Fisher-Yates shuffle driven by rng.
template <typename T>
void shuffle(std::vector<T>& items, RngState& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b);

/// Solves (a + damping I) x = b by Cholesky factorization. Throws
/// FactorizationError carrying the failing pivot when the damped matrix is
/// not positive definite.
Vector cholesky_solve(const SquareMatrix& a, double damping, std::span<const double> b);

struct SymmetricEigen {
  Vector values;        // ascending
  SquareMatrix vectors; // column j is the eigenvector of values[j]
};

SymmetricEigen symmetric_eigen(const SquareMatrix& a);

// Small vector helpers.
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double norm_inf(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
/// Summation with Neumaier compensation.
double compensated_sum(std::span<const double> values);

/// FNV-1a 64-bit digest over raw bytes, rendered as 16 hex digits.
std::uint64_t fnv1a64(const void* bytes, std::size_t size, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::string hex_digest(std::uint64_t value);
std::string digest_of(std::span<const double> values);

}  // namespace ngf::numerics
