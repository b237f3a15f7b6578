#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tape.hpp"

namespace ima {

/// Dense row-major matrix over double or ad::Var.
template <class S>
class Mat {
 public:
  Mat() : rows_(0), cols_(0) {}
  Mat(int rows, int cols) : rows_(rows), cols_(cols), e_(static_cast<std::size_t>(rows) * cols) {
    if (rows < 1 || cols < 1) throw DomainError("matrix dimensions must be >= 1");
  }
  Mat(int rows, int cols, const S& fill)
      : rows_(rows), cols_(cols), e_(static_cast<std::size_t>(rows) * cols, fill) {
    if (rows < 1 || cols < 1) throw DomainError("matrix dimensions must be >= 1");
  }

  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = S(1.0);
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  S& operator()(int r, int c) { return e_[static_cast<std::size_t>(r) * cols_ + c]; }
  const S& operator()(int r, int c) const { return e_[static_cast<std::size_t>(r) * cols_ + c]; }

  std::span<S> row(int r) { return {e_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }
  std::span<const S> row(int r) const {
    return {e_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }

  std::span<S> data() { return e_; }
  std::span<const S> data() const { return e_; }

 private:
  int rows_, cols_;
  std::vector<S> e_;
};

using Matrix = Mat<double>;
using ADMatrix = Mat<ad::Var>;

inline double log_abs(double x) { return std::log(std::fabs(x)); }
using ad::log_abs;
using ad::value_of;

inline bool all_finite(const Matrix& m) {
  for (double x : m.data()) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

template <class S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
  Mat<S> c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int k = 0; k < a.cols(); ++k) {
      const S& aik = a(i, k);
      for (int j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

namespace detail {

/// In-place LU with partial pivoting; pivots chosen on plain values.
/// Returns the row permutation. Degeneracy is judged per pivot relative to
/// the matrix magnitude, never on |det|: deep compositions reach |det| of
/// 1e-30 and below while staying comfortably invertible, so any absolute
/// determinant cutoff would misfire on well-conditioned input.
template <class S>
std::vector<int> lu_factor(Mat<S>& a) {
  const int n = a.rows();
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  double amax = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) amax = std::max(amax, std::fabs(value_of(a(i, j))));
  const double negligible = std::max(amax * 1e-13, 1e-300);
  for (int k = 0; k < n; ++k) {
    int piv = k;
    double best = std::fabs(value_of(a(k, k)));
    for (int i = k + 1; i < n; ++i) {
      const double cand = std::fabs(value_of(a(i, k)));
      if (cand > best) {
        best = cand;
        piv = i;
      }
    }
    if (best <= negligible)
      throw SingularJacobian("matrix is numerically singular (negligible pivot)",
                             best > 0.0 ? amax / best : INFINITY);
    if (piv != k) {
      for (int j = 0; j < n; ++j) std::swap(a(k, j), a(piv, j));
      std::swap(perm[k], perm[piv]);
    }
    for (int i = k + 1; i < n; ++i) {
      a(i, k) /= a(k, k);
      const S& lik = a(i, k);
      for (int j = k + 1; j < n; ++j) a(i, j) -= lik * a(k, j);
    }
  }
  return perm;
}

template <class S>
void lu_solve_inplace(const Mat<S>& lu, const std::vector<int>& perm, std::span<const S> b,
                      std::span<S> x) {
  const int n = lu.rows();
  std::vector<S> y(n);
  for (int i = 0; i < n; ++i) {
    S acc = b[static_cast<std::size_t>(perm[i])];
    for (int j = 0; j < i; ++j) acc -= lu(i, j) * y[j];
    y[static_cast<std::size_t>(i)] = acc;
  }
  for (int i = n - 1; i >= 0; --i) {
    S acc = y[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j) acc -= lu(i, j) * x[static_cast<std::size_t>(j)];
    x[static_cast<std::size_t>(i)] = acc / lu(i, i);
  }
}

}  // namespace detail

/// log |det m| via LU; exact at these sizes, differentiable over ad::Var.
template <class S>
S logabsdet(const Mat<S>& m) {
  if (m.rows() != m.cols()) throw DomainError("logabsdet requires a square matrix");
  Mat<S> lu = m;
  detail::lu_factor(lu);
  S acc(0.0);
  for (int i = 0; i < m.rows(); ++i) acc += log_abs(lu(i, i));
  return acc;
}

template <class S>
Mat<S> matinv(const Mat<S>& m) {
  if (m.rows() != m.cols()) throw DomainError("matinv requires a square matrix");
  const int n = m.rows();
  Mat<S> lu = m;
  const std::vector<int> perm = detail::lu_factor(lu);
  Mat<S> inv(n, n);
  std::vector<S> e(n), col(n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) e[static_cast<std::size_t>(i)] = S(i == j ? 1.0 : 0.0);
    detail::lu_solve_inplace(lu, perm, std::span<const S>(e), std::span<S>(col));
    for (int i = 0; i < n; ++i) inv(i, j) = col[static_cast<std::size_t>(i)];
  }
  return inv;
}

template <class S>
Mat<S> transpose(const Mat<S>& m) {
  Mat<S> t(m.cols(), m.rows());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

template <class S>
void solve(const Mat<S>& m, std::span<const S> b, std::span<S> x) {
  Mat<S> lu = m;
  const std::vector<int> perm = detail::lu_factor(lu);
  detail::lu_solve_inplace(lu, perm, b, x);
}

template <class S>
std::vector<S> solve(const Mat<S>& m, const std::vector<S>& b) {
  std::vector<S> x(b.size(), S(0.0));
  solve(m, std::span<const S>(b), std::span<S>(x));
  return x;
}

/// Signed determinant; returns 0 for singular input rather than throwing.
inline double det(const Matrix& m) {
  if (m.rows() != m.cols()) throw DomainError("det requires a square matrix");
  const int n = m.rows();
  Matrix lu = m;
  double d = 1.0;
  for (int k = 0; k < n; ++k) {
    int piv = k;
    for (int i = k + 1; i < n; ++i)
      if (std::abs(lu(i, k)) > std::abs(lu(piv, k))) piv = i;
    if (lu(piv, k) == 0.0) return 0.0;
    if (piv != k) {
      for (int j = 0; j < n; ++j) std::swap(lu(k, j), lu(piv, j));
      d = -d;
    }
    d *= lu(k, k);
    for (int i = k + 1; i < n; ++i) {
      const double f = lu(i, k) / lu(k, k);
      for (int j = k + 1; j < n; ++j) lu(i, j) -= f * lu(k, j);
    }
  }
  return d;
}

/// Euclidean norm of column j.
template <class S>
S column_norm(const Mat<S>& m, int j) {
  S acc(0.0);
  for (int i = 0; i < m.rows(); ++i) acc += m(i, j) * m(i, j);
  using std::sqrt;
  using ad::sqrt;
  return sqrt(acc);
}

/// Q factor of a Householder QR, sign-fixed so diag(R) > 0.
/// The result is orthogonal to machine precision.
inline Matrix qr_orthogonal(const Matrix& a) {
  const int n = a.rows();
  Matrix r = a;
  Matrix q = Matrix::identity(n);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int k = 0; k < n - 1; ++k) {
    double norm = 0.0;
    for (int i = k; i < n; ++i) norm += r(i, k) * r(i, k);
    norm = std::sqrt(norm);
    if (norm < 1e-300) continue;
    const double alpha = r(k, k) >= 0.0 ? -norm : norm;
    double vnorm2 = 0.0;
    for (int i = k; i < n; ++i) {
      v[static_cast<std::size_t>(i)] = r(i, k) - (i == k ? alpha : 0.0);
      vnorm2 += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
    }
    if (vnorm2 < 1e-300) continue;
    // r <- (I - 2vv^T/v^Tv) r ; q <- q (I - 2vv^T/v^Tv)
    for (int j = k; j < n; ++j) {
      double s = 0.0;
      for (int i = k; i < n; ++i) s += v[static_cast<std::size_t>(i)] * r(i, j);
      s *= 2.0 / vnorm2;
      for (int i = k; i < n; ++i) r(i, j) -= s * v[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = k; j < n; ++j) s += q(i, j) * v[static_cast<std::size_t>(j)];
      s *= 2.0 / vnorm2;
      for (int j = k; j < n; ++j) q(i, j) -= s * v[static_cast<std::size_t>(j)];
    }
  }
  for (int j = 0; j < n; ++j) {
    if (r(j, j) < 0.0) {
      for (int i = 0; i < n; ++i) q(i, j) = -q(i, j);
    }
  }
  return q;
}

}  // namespace ima
