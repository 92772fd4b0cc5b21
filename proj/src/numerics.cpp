#include "ngf/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ngf/errors.hpp"

namespace ngf::numerics {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_rank(const std::vector<std::size_t>& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw DimensionError("tensor rank must be in [1, 4], got shape " + shape_string(shape));
  }
}

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::size_t kCompensatedThreshold = 4096;

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_rank(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_rank(shape_);
  if (data_.size() != product(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

std::size_t Tensor::row_size() const noexcept {
  return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0];
}

std::span<double> Tensor::row(std::size_t i) {
  std::size_t w = row_size();
  return std::span<double>(data_).subspan(i * w, w);
}

std::span<const double> Tensor::row(std::size_t i) const {
  std::size_t w = row_size();
  return std::span<const double>(data_).subspan(i * w, w);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- SquareMatrix

SquareMatrix::SquareMatrix(std::size_t dim, double fill) : dim_(dim), data_(dim * dim, fill) {}

SquareMatrix::SquareMatrix(std::size_t dim, std::vector<double> data)
    : dim_(dim), data_(std::move(data)) {
  if (data_.size() != dim * dim) {
    throw DimensionError("square matrix of dim " + std::to_string(dim) + " needs " +
                         std::to_string(dim * dim) + " entries, got " +
                         std::to_string(data_.size()));
  }
}

SquareMatrix SquareMatrix::identity(std::size_t dim) {
  SquareMatrix m(dim);
  for (std::size_t i = 0; i < dim; ++i) m(i, i) = 1.0;
  return m;
}

SquareMatrix SquareMatrix::diagonal(std::span<const double> diag) {
  SquareMatrix m(diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

double SquareMatrix::trace() const noexcept {
  double t = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) t += (*this)(i, i);
  return t;
}

Vector SquareMatrix::diag() const {
  Vector d(dim_);
  for (std::size_t i = 0; i < dim_; ++i) d[i] = (*this)(i, i);
  return d;
}

void SquareMatrix::symmetrize() noexcept {
  for (std::size_t i = 0; i < dim_; ++i) {
    for (std::size_t j = i + 1; j < dim_; ++j) {
      double m = 0.5 * ((*this)(i, j) + (*this)(j, i));
      (*this)(i, j) = m;
      (*this)(j, i) = m;
    }
  }
}

bool SquareMatrix::is_symmetric(double rel_tol) const noexcept {
  for (std::size_t i = 0; i < dim_; ++i) {
    for (std::size_t j = i + 1; j < dim_; ++j) {
      double a = (*this)(i, j);
      if (std::abs(a - (*this)(j, i)) > rel_tol * std::max(1.0, std::abs(a))) return false;
    }
  }
  return true;
}

Vector SquareMatrix::multiply(std::span<const double> x) const {
  if (x.size() != dim_) {
    throw DimensionError("matrix-vector product: dim " + std::to_string(dim_) +
                         " vs vector length " + std::to_string(x.size()));
  }
  Vector y(dim_, 0.0);
  for (std::size_t i = 0; i < dim_; ++i) {
    y[i] = dot(std::span<const double>(data_).subspan(i * dim_, dim_), x);
  }
  return y;
}

Tensor SquareMatrix::as_tensor() const { return Tensor({dim_, dim_}, data_); }

// ---------------------------------------------------------------- RngState

RngState RngState::split(std::uint64_t child) const noexcept {
  return RngState(seed_, mix64(mix64(stream_) ^ mix64(child + 0x632be59bd9b4e019ULL)));
}

std::uint64_t RngState::next_u64() noexcept {
  std::uint64_t key = mix64(seed_ ^ mix64(stream_ + 0xd1b54a32d192ed03ULL));
  return mix64(key + 0x9e3779b97f4a7c15ULL * (counter_++));
}

double RngState::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngState::below(std::uint64_t bound) noexcept {
  // Rejection keeps the result exactly uniform.
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                        std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % bound;
}

double RngState::gaussian() noexcept {
  // Box-Muller, one output per pair of uniforms so draws stay counter-aligned.
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Vector draw_gaussian(RngState& rng, std::size_t n) {
  if (n == 0) throw EmptyDrawError("draw_gaussian: n must be at least 1");
  Vector out(n);
  for (auto& v : out) v = rng.gaussian();
  return out;
}

Vector draw_rademacher(RngState& rng, std::size_t n) {
  if (n == 0) throw EmptyDrawError("draw_rademacher: n must be at least 1");
  Vector out(n);
  for (auto& v : out) v = (rng.next_u64() >> 63) ? 1.0 : -1.0;
  return out;
}

// ---------------------------------------------------------------- algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor c({m, n});
  if (k > kCompensatedThreshold) {
    Vector terms(k);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < k; ++p) terms[p] = a(i, p) * b(p, j);
        c(i, j) = compensated_sum(terms);
      }
    }
    return c;
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  }
  return c;
}

Vector cholesky_solve(const SquareMatrix& a, double damping, std::span<const double> b) {
  const std::size_t n = a.dim();
  if (b.size() != n) {
    throw DimensionError("cholesky_solve: matrix dim " + std::to_string(n) +
                         " vs rhs length " + std::to_string(b.size()));
  }
  if (!(damping >= 0.0)) throw DimensionError("cholesky_solve: damping must be non-negative");

  // Lower-triangular factor L with (a + damping I) = L L^T.
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j) + damping;
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw FactorizationError("cholesky_solve: matrix not positive definite at pivot " +
                                   std::to_string(j),
                               j);
    }
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }

  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * y[k];
    y[i] = s / l[i * n + i];
  }
  Vector x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l[k * n + ii] * x[k];
    x[ii] = s / l[ii * n + ii];
  }
  return x;
}

SymmetricEigen symmetric_eigen(const SquareMatrix& a) {
  const auto n = static_cast<Eigen::Index>(a.dim());
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = a(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) {
    throw FactorizationError("symmetric_eigen: eigensolver did not converge", 0);
  }
  SymmetricEigen out;
  out.values.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  out.vectors = SquareMatrix(a.dim());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out.vectors(i, j) = solver.eigenvectors()(i, j);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("axpy: lengths " + std::to_string(x.size()) + " and " +
                         std::to_string(y.size()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double compensated_sum(std::span<const double> values) {
  double sum = 0.0, c = 0.0;
  for (double v : values) {
    double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) {
      c += (sum - t) + v;
    } else {
      c += (v - t) + sum;
    }
    sum = t;
  }
  return sum + c;
}

std::uint64_t fnv1a64(const void* bytes, std::size_t size, std::uint64_t basis) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_digest(std::uint64_t value) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kHex[value & 0xf];
    value >>= 4;
  }
  return s;
}

std::string digest_of(std::span<const double> values) {
  return hex_digest(fnv1a64(values.data(), values.size_bytes()));
}

}  // namespace ngf::numerics
