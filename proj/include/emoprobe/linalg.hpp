#pragma once

// Dense 64-bit linear algebra and the deterministic random stream used by
// every other module. Accumulation order is fixed everywhere (row-major,
// inner-index innermost) so results are reproducible run to run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "emoprobe/errors.hpp"

namespace emoprobe {

namespace detail {

inline void require_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << what << ": non-finite entry at index " << i;
      throw PreconditionError(os.str());
    }
  }
}

}  // namespace detail

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  Vector(std::initializer_list<double> init) : values_(init) {
    detail::require_finite(values_, "Vector");
  }
  explicit Vector(std::vector<double> values) : values_(std::move(values)) {
    detail::require_finite(values_, "Vector");
  }

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> values_;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    detail::require_finite(data_, "Matrix");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    detail::require_finite(data_, "Matrix");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  // Columns of the result are the given vectors, all of equal dimension.
  static Matrix from_columns(std::span<const Vector> columns) {
    if (columns.empty()) return {};
    const std::size_t d = columns[0].size();
    Matrix m(d, columns.size());
    for (std::size_t j = 0; j < columns.size(); ++j) {
      if (columns[j].size() != d) throw ShapeError("from_columns: column dimension mismatch");
      for (std::size_t i = 0; i < d; ++i) m(i, j) = columns[j][i];
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  Vector column(std::size_t j) const {
    Vector v(rows_);
    for (std::size_t i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
    return v;
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double x : m.data()) best = std::max(best, std::abs(x));
  return best;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff: shape mismatch");
  double best = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
  return best;
}

// Row-major product with the k index innermost: c(i,j) = sum_k a(i,k) b(k,j),
// summed in increasing k.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

inline Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * x[k];
    y[i] = acc;
  }
  return y;
}

inline double dot(std::span<const double> u, std::span<const double> w) {
  if (u.size() != w.size()) throw ShapeError("dot: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * w[i];
  return acc;
}

inline double dot(const Vector& u, const Vector& w) { return dot(u.span(), w.span()); }
inline double norm(const Vector& u) { return std::sqrt(dot(u, u)); }

inline Vector operator+(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("vector add: dimension mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline Vector operator-(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("vector sub: dimension mismatch");
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline Vector operator*(double s, const Vector& a) {
  Vector r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = s * a[i];
  return r;
}

// Solves A X = B for symmetric positive definite A by Cholesky (A = L Lᵀ).
inline Matrix solve_spd(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError("solve_spd: A is not square");
  if (b.rows() != n) throw ShapeError("solve_spd: B row count does not match A");
  const double scale = std::max(1.0, max_abs(a));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-10 * scale)
        throw PreconditionError("solve_spd: A is not symmetric");

  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) {
      throw SingularityError("solve_spd: non-positive pivot " + std::to_string(diag) +
                             " at column " + std::to_string(j));
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }

  Matrix x(n, b.cols());
  for (std::size_t c = 0; c < b.cols(); ++c) {
    // forward: L y = b
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = b(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
      y[i] = s / l(i, i);
    }
    // backward: Lᵀ x = y
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
      x(ii, c) = s / l(ii, ii);
    }
  }
  return x;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
inline std::vector<double> symmetric_eigenvalues(Matrix a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError("symmetric_eigenvalues: not square");
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off < 1e-30 * std::max(1.0, max_abs(a))) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

inline constexpr double kMaxGramCondition = 1e10;

// Gram matrix VᵀV after checking that the columns of V are independent.
inline Matrix checked_gram(const Matrix& v) {
  if (v.cols() == 0) throw ShapeError("gram: V has no columns");
  Matrix g = matmul(v.transpose(), v);
  const auto ev = symmetric_eigenvalues(g);
  const double lo = ev.front(), hi = ev.back();
  const double cond = lo > 0.0 ? hi / lo : INFINITY;
  if (!(cond <= kMaxGramCondition)) {
    std::ostringstream os;
    os << "rank-deficient column set: Gram condition number " << cond << " exceeds "
       << kMaxGramCondition;
    throw RankError(os.str());
  }
  return g;
}

// P = V (VᵀV)⁻¹ Vᵀ, the orthogonal projector onto the column space of V.
inline Matrix projection_matrix(const Matrix& v) {
  const Matrix g = checked_gram(v);
  const Matrix coef = solve_spd(g, v.transpose());  // k x d
  return matmul(v, coef);
}

// (I - P) x without forming I - P.
inline Vector project_out(const Matrix& v, const Vector& x) {
  if (v.cols() == 0) return x;
  if (v.rows() != x.size()) throw ShapeError("project_out: dimension mismatch");
  const Matrix g = checked_gram(v);
  Matrix vtx(v.cols(), 1);
  for (std::size_t j = 0; j < v.cols(); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < v.rows(); ++i) acc += v(i, j) * x[i];
    vtx(j, 0) = acc;
  }
  const Matrix coef = solve_spd(g, vtx);
  Vector r = x;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < v.cols(); ++j) acc += v(i, j) * coef(j, 0);
    r[i] -= acc;
  }
  return r;
}

inline double cosine_similarity(const Vector& u, const Vector& w) {
  if (u.size() != w.size()) throw ShapeError("cosine_similarity: dimension mismatch");
  const double nu = norm(u), nw = norm(w);
  if (nu == 0.0 || nw == 0.0) throw DegenerateError("cosine_similarity: zero-norm input");
  return std::clamp(dot(u, w) / (nu * nw), -1.0, 1.0);
}

inline Vector softmax(const Vector& v) {
  Vector out(v.size());
  if (v.empty()) return out;
  const double m = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    total += out[i];
  }
  for (std::size_t i = 0; i < v.size(); ++i) out[i] /= total;
  return out;
}

inline Vector rmsnorm(const Vector& v, const Vector& gain, double eps) {
  if (gain.size() != v.size()) throw ShapeError("rmsnorm: gain dimension mismatch");
  if (eps < 0.0) throw PreconditionError("rmsnorm: eps must be nonnegative");
  double ms = 0.0;
  for (double x : v) ms += x * x;
  ms /= static_cast<double>(std::max<std::size_t>(v.size(), 1));
  const double denom = std::sqrt(ms + eps);
  Vector out(v.size());
  if (denom == 0.0) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * v[i] / denom;
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline Vector silu(const Vector& v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = silu(v[i]);
  return out;
}

// splitmix64 step, used for seeding and for deriving independent sub-seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t s = master ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  return splitmix64(s);
}

// xoshiro256** with splitmix64 seeding. Integer-only state transitions, so the
// raw stream is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) by rejection, unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw PreconditionError("Rng::below: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Box–Muller; the second variate of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Vector gaussian_vector(Rng& rng, std::size_t d) {
  if (d == 0) throw PreconditionError("gaussian_vector: dimension must be at least 1");
  Vector v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = rng.normal();
  return v;
}

}  // namespace emoprobe
