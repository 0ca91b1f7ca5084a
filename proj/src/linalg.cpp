#include "rosetta/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

namespace rosetta {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw LinalgError("matrix data size " + std::to_string(data_.size()) + " does not match " +
                      std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw LinalgError("ragged matrix initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::row_vector(std::span<const double> v) {
  return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

Matrix Matrix::column_vector(std::span<const double> v) {
  return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Vector Matrix::row_copy(std::size_t r) const {
  auto s = row(r);
  return Vector(s.begin(), s.end());
}

Vector Matrix::col_copy(std::size_t c) const {
  Vector out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (!same_shape(other)) throw LinalgError("shape mismatch in +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  if (!same_shape(other)) throw LinalgError("shape mismatch in -=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (auto& x : data_) x *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw LinalgError("matmul shape mismatch: " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw LinalgError("matmul_tn shape mismatch");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw LinalgError("matmul_nt shape mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(arow, b.row(j));
  }
  return out;
}

Vector matvec(const Matrix& a, std::span<const double> v) {
  if (a.cols() != v.size()) throw LinalgError("matvec shape mismatch");
  Vector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), v);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double x : m.data()) best = std::max(best, std::abs(x));
  return best;
}

Matrix hstack(const Matrix& left, const Matrix& right) {
  if (left.rows() != right.rows()) throw LinalgError("hstack row mismatch");
  Matrix out(left.rows(), left.cols() + right.cols());
  for (std::size_t r = 0; r < left.rows(); ++r) {
    std::copy(left.row(r).begin(), left.row(r).end(), out.row(r).begin());
    std::copy(right.row(r).begin(), right.row(r).end(), out.row(r).begin() + left.cols());
  }
  return out;
}

Matrix vstack(const Matrix& top, const Matrix& bottom) {
  if (top.empty()) return bottom;
  if (bottom.empty()) return top;
  if (top.cols() != bottom.cols()) throw LinalgError("vstack column mismatch");
  std::vector<double> data(top.storage());
  data.insert(data.end(), bottom.storage().begin(), bottom.storage().end());
  return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) throw LinalgError("row index out of range");
    std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  }
  return out;
}

namespace {

// In-place Cholesky of a symmetric matrix; returns false when a pivot is not
// safely positive relative to the matrix scale.
bool cholesky_in_place(Matrix& g) {
  const std::size_t n = g.rows();
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(g(i, i)));
  const double pivot_floor = std::max(scale, 1e-300) * 1e-13;
  for (std::size_t j = 0; j < n; ++j) {
    double d = g(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= g(j, k) * g(j, k);
    if (!(d > pivot_floor)) return false;
    const double ljj = std::sqrt(d);
    g(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = g(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= g(i, k) * g(j, k);
      g(i, j) = s / ljj;
    }
    for (std::size_t k = j + 1; k < n; ++k) g(j, k) = 0.0;
  }
  return true;
}

// Solves L L^T x = b for each column of rhs.
Matrix cholesky_solve(const Matrix& l, Matrix rhs) {
  const std::size_t n = l.rows();
  for (std::size_t c = 0; c < rhs.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = rhs(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * rhs(k, c);
      rhs(i, c) = s / l(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = rhs(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * rhs(k, c);
      rhs(ii, c) = s / l(ii, ii);
    }
  }
  return rhs;
}

}  // namespace

LeastSquaresResult solve_least_squares(const Matrix& design, const Matrix& targets) {
  if (design.rows() != targets.rows()) {
    throw LinalgError("least squares: design has " + std::to_string(design.rows()) +
                      " rows but targets has " + std::to_string(targets.rows()));
  }
  if (design.rows() < design.cols()) {
    throw LinalgError("least squares: fewer rows than unknowns");
  }
  const Matrix gram = matmul_tn(design, design);
  const Matrix rhs = matmul_tn(design, targets);

  Matrix factor = gram;
  if (cholesky_in_place(factor)) {
    return {cholesky_solve(factor, rhs), false};
  }

  // Pseudoinverse of the Gram matrix.
  const SymmetricEigen eig = symmetric_eigen(gram);
  const std::size_t n = gram.rows();
  const double cutoff =
      std::max(eig.values.empty() ? 0.0 : eig.values.front(), 0.0) * 1e-12 * static_cast<double>(n);
  Matrix pinv(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    if (eig.values[k] <= cutoff) continue;
    const double inv = 1.0 / eig.values[k];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        pinv(i, j) += inv * eig.vectors(i, k) * eig.vectors(j, k);
  }
  return {matmul(pinv, rhs), true};
}

namespace {

// Columns of `u` not marked valid are filled with unit vectors orthogonal to
// every other column, by Gram-Schmidt over the standard basis.
void complete_orthonormal_columns(Matrix& u, const std::vector<bool>& valid) {
  const std::size_t m = u.rows();
  const std::size_t k = u.cols();
  std::vector<bool> filled = valid;
  std::size_t basis = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (filled[c]) continue;
    while (basis < m) {
      Vector cand(m, 0.0);
      cand[basis++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < k; ++o) {
          if (!filled[o]) continue;
          double proj = 0.0;
          for (std::size_t r = 0; r < m; ++r) proj += u(r, o) * cand[r];
          for (std::size_t r = 0; r < m; ++r) cand[r] -= proj * u(r, o);
        }
      }
      const double nrm = norm2(cand);
      if (nrm > 1e-8) {
        for (std::size_t r = 0; r < m; ++r) u(r, c) = cand[r] / nrm;
        filled[c] = true;
        break;
      }
    }
    if (!filled[c]) throw LinalgError("svd: could not complete orthonormal basis");
  }
}

SvdResult svd_tall(const Matrix& m, const SvdOptions& options) {
  const std::size_t rows = m.rows();
  const std::size_t n = m.cols();
  // Work on columns: store A^T so that each column is a contiguous row.
  Matrix cols = m.transpose();
  Matrix v = Matrix::identity(n);

  bool converged = n < 2;
  int sweep = 0;
  for (; sweep < options.max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto cp = cols.row(p);
        auto cq = cols.row(q);
        const double alpha = dot(cp, cp);
        const double beta = dot(cq, cq);
        const double gamma = dot(cp, cq);
        if (gamma == 0.0 || alpha == 0.0 || beta == 0.0) continue;
        const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, rel);
        if (rel < options.tolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double a = cp[i];
          const double b = cq[i];
          cp[i] = c * a - s * b;
          cq[i] = s * a + c * b;
        }
        auto vp = v.row(p);
        auto vq = v.row(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i];
          const double b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
      }
    }
    if (off < options.tolerance) converged = true;
  }
  if (!converged) {
    throw LinalgError("svd did not converge after " + std::to_string(sweep) + " sweeps");
  }

  // v currently holds V^T rows (each row is a right singular vector).
  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = norm2(cols.row(j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdResult out{Matrix(rows, n), Vector(n), Matrix(n, n)};
  const double smax = n > 0 ? sigma[order[0]] : 0.0;
  const double zero_cut = std::max(smax, 1e-300) * 1e-15 * static_cast<double>(std::max(rows, n));
  std::vector<bool> valid(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sigma[j];
    std::copy(v.row(j).begin(), v.row(j).end(), out.vt.row(k).begin());
    if (sigma[j] > zero_cut) {
      for (std::size_t i = 0; i < rows; ++i) out.u(i, k) = cols(j, i) / sigma[j];
      valid[k] = true;
    }
  }
  complete_orthonormal_columns(out.u, valid);
  return out;
}

}  // namespace

SvdResult svd(const Matrix& m, SvdOptions options) {
  if (!m.all_finite()) throw LinalgError("svd: non-finite input");
  if (m.rows() >= m.cols()) return svd_tall(m, options);
  SvdResult t = svd_tall(m.transpose(), options);
  return {t.vt.transpose(), std::move(t.s), t.u.transpose()};
}

PolarResult polar_decompose(const Matrix& a) {
  if (a.rows() != a.cols()) throw LinalgError("polar decomposition requires a square matrix");
  const SvdResult f = svd(a);
  const std::size_t n = a.rows();
  Matrix p(n, n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) p(i, j) += f.vt(k, i) * f.s[k] * f.vt(k, j);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (p(i, j) + p(j, i));
      p(i, j) = avg;
      p(j, i) = avg;
    }
  return {matmul(f.u, f.vt), std::move(p)};
}

SymmetricEigen symmetric_eigen(const Matrix& m, int max_sweeps, double tolerance) {
  if (m.rows() != m.cols()) throw LinalgError("eigen: matrix not square");
  const std::size_t n = m.rows();
  Matrix a = m;
  Matrix v = Matrix::identity(n);
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    double diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      diag += a(i, i) * a(i, i);
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    }
    if (off <= tolerance * tolerance * std::max(diag, 1e-300) || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t =
            std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (sweep == max_sweeps) {
    throw LinalgError("eigen solver did not converge after " + std::to_string(sweep) + " sweeps");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

Matrix covariance(const Matrix& samples) {
  const std::size_t count = samples.rows();
  const std::size_t d = samples.cols();
  if (count < 2) throw LinalgError("covariance needs at least 2 samples");
  // Welford accumulation of the co-moment matrix.
  Vector mean(d, 0.0);
  Matrix comoment(d, d);
  Vector delta(d);
  for (std::size_t r = 0; r < count; ++r) {
    auto x = samples.row(r);
    const double inv = 1.0 / static_cast<double>(r + 1);
    for (std::size_t j = 0; j < d; ++j) delta[j] = x[j] - mean[j];
    for (std::size_t j = 0; j < d; ++j) mean[j] += delta[j] * inv;
    for (std::size_t i = 0; i < d; ++i) {
      const double after = x[i] - mean[i];
      for (std::size_t j = 0; j < d; ++j) comoment(j, i) += delta[j] * after;
    }
  }
  const double denom = static_cast<double>(count - 1);
  Matrix cov(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const double c = 0.5 * (comoment(i, j) + comoment(j, i)) / denom;
      cov(i, j) = c;
      cov(j, i) = c;
    }
  return cov;
}

double log_det_psd(const Matrix& m, double eigen_floor) {
  if (m.rows() != m.cols()) throw LinalgError("log_det_psd: matrix not square");
  if (!(eigen_floor > 0.0)) throw LinalgError("log_det_psd: eigen floor must be positive");
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > 1e-9) {
        throw LinalgError("log_det_psd: matrix is not symmetric");
      }
  double total = 0.0;
  for (double lambda : symmetric_eigen(m).values) total += std::log(std::max(lambda, eigen_floor));
  return total;
}

Matrix build_cholesky(std::span<const double> diag_raw, std::span<const double> lower_flat) {
  const std::size_t d = diag_raw.size();
  if (lower_flat.size() != lower_triangle_size(d)) {
    throw LinalgError("build_cholesky: expected " + std::to_string(lower_triangle_size(d)) +
                      " lower entries, got " + std::to_string(lower_flat.size()));
  }
  Matrix l(d, d);
  std::size_t k = 0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) l(i, j) = lower_flat[k++];
    l(i, i) = std::exp(diag_raw[i]);
  }
  return l;
}

}  // namespace rosetta
