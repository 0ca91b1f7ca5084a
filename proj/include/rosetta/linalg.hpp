#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rosetta {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);
  static Matrix row_vector(std::span<const double> v);
  static Matrix column_vector(std::span<const double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector row_copy(std::size_t r) const;
  Vector col_copy(std::size_t c) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Matrix transpose() const;
  bool all_finite() const;
  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class LinalgError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> v);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double squared_distance(std::span<const double> a, std::span<const double> b);

/// Horizontal concatenation; both inputs must have the same number of rows.
Matrix hstack(const Matrix& left, const Matrix& right);
/// Vertical concatenation; both inputs must have the same number of columns.
Matrix vstack(const Matrix& top, const Matrix& bottom);
Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows);

struct LeastSquaresResult {
  Matrix coefficients;
  /// Set when the normal matrix was singular and the pseudoinverse was used.
  bool rank_deficient = false;
};

/// Minimizes ||design * X - targets||_F over X.
///
/// Solves the normal equations with a Cholesky factorization. When the Gram
/// matrix is not numerically positive definite the pseudoinverse (through
/// the symmetric eigendecomposition) is used instead and the result is flagged.
LeastSquaresResult solve_least_squares(const Matrix& design, const Matrix& targets);

struct SvdResult {
  Matrix u;   // m x k, orthonormal columns
  Vector s;   // k, nonincreasing, nonnegative
  Matrix vt;  // k x n, orthonormal rows
};

struct SvdOptions {
  int max_sweeps = 100;
  double tolerance = 1e-12;
};

/// Thin SVD by one-sided Jacobi rotations, k = min(m, n).
SvdResult svd(const Matrix& m, SvdOptions options = {});

struct PolarResult {
  Matrix u;  // orthogonal
  Matrix p;  // symmetric positive semi-definite
};

/// a = u * p with u orthogonal and p = V diag(S) V^T.
PolarResult polar_decompose(const Matrix& a);

struct SymmetricEigen {
  Vector values;  // nonincreasing
  Matrix vectors;  // columns are eigenvectors
};

/// Cyclic Jacobi eigensolver for symmetric matrices.
SymmetricEigen symmetric_eigen(const Matrix& m, int max_sweeps = 100, double tolerance = 1e-14);

/// Sample covariance of the rows of `samples`, denominator M - 1.
Matrix covariance(const Matrix& samples);

/// Sum of log(max(lambda_i, eigen_floor)) over eigenvalues of a symmetric matrix.
double log_det_psd(const Matrix& m, double eigen_floor = 1e-12);

/// Lower-triangular L with exp(diag_raw) on the diagonal and `lower_flat`
/// filling the strict lower triangle row by row.
Matrix build_cholesky(std::span<const double> diag_raw, std::span<const double> lower_flat);

constexpr std::size_t lower_triangle_size(std::size_t d) { return d * (d - 1) / 2; }

}  // namespace rosetta
