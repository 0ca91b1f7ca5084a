#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rosetta/linalg.hpp"

using namespace rosetta;

namespace {

double orthonormality_error(const Matrix& q_columns) {
  const Matrix g = matmul_tn(q_columns, q_columns);
  return oracle::max_abs_diff(g, Matrix::identity(g.rows()));
}

Matrix reconstruct(const SvdResult& f) {
  Matrix us = f.u;
  for (std::size_t r = 0; r < us.rows(); ++r)
    for (std::size_t c = 0; c < us.cols(); ++c) us(r, c) *= f.s[c];
  return matmul(us, f.vt);
}

}  // namespace

TEST_CASE("matrix basics") {
  const Matrix a{{1, 2, 3}, {4, 5, 6}};
  CHECK(a.rows() == 2);
  CHECK(a.cols() == 3);
  CHECK(a.transpose()(2, 1) == 6);
  CHECK(matmul(a, a.transpose()) == oracle::naive_product(a, oracle::naive_transpose(a)));
  CHECK(matmul_tn(a, a) == oracle::naive_product(oracle::naive_transpose(a), a));
  CHECK(matmul_nt(a, a) == oracle::naive_product(a, oracle::naive_transpose(a)));
  CHECK(vstack(a, a).rows() == 4);
  CHECK(hstack(a, a).cols() == 6);
  CHECK_THROWS_AS(matmul(a, a), LinalgError);
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), LinalgError);
}

TEST_CASE("least squares with an identity design returns the targets") {
  const Matrix targets{{1, 2}, {3, 4}, {5, 6}};
  const auto result = solve_least_squares(Matrix::identity(3), targets);
  CHECK(result.coefficients == targets);
  CHECK_FALSE(result.rank_deficient);
}

TEST_CASE("least squares through the origin") {
  const auto x = solve_least_squares(Matrix{{1}, {2}, {3}}, Matrix{{2}, {4}, {6}}).coefficients;
  REQUIRE(x.rows() == 1);
  CHECK(x(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("least squares matches the normal equations oracle") {
  const Matrix design = oracle::random_matrix(20, 4, 7);
  const Matrix targets = oracle::random_matrix(20, 3, 8);
  const Matrix dt = oracle::naive_transpose(design);
  const Matrix expected =
      oracle::naive_product(oracle::inverse(oracle::naive_product(dt, design)), oracle::naive_product(dt, targets));
  const Matrix x = solve_least_squares(design, targets).coefficients;
  CHECK(oracle::max_abs_diff(x, expected) < 1e-9);
}

TEST_CASE("least squares residual is orthogonal to the design") {
  for (unsigned seed = 0; seed < 20; ++seed) {
    const Matrix design = oracle::random_matrix(30, 5, 100 + seed);
    const Matrix targets = oracle::random_matrix(30, 2, 200 + seed);
    const Matrix x = solve_least_squares(design, targets).coefficients;
    const Matrix residual = matmul(design, x) - targets;
    CHECK(max_abs(matmul_tn(design, residual)) < 1e-8);
  }
}

TEST_CASE("rank deficient least squares falls back to the pseudoinverse") {
  Matrix design(6, 2);
  for (std::size_t r = 0; r < 6; ++r) {
    design(r, 0) = static_cast<double>(r);
    design(r, 1) = 2.0 * static_cast<double>(r);
  }
  Matrix targets(6, 1);
  for (std::size_t r = 0; r < 6; ++r) targets(r, 0) = 5.0 * static_cast<double>(r);
  const auto result = solve_least_squares(design, targets);
  CHECK(result.rank_deficient);
  // Minimum-norm solution of x0 + 2 x1 = 5.
  CHECK(result.coefficients(0, 0) == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(result.coefficients(1, 0) == doctest::Approx(2.0).epsilon(1e-8));
  CHECK_THROWS_AS(solve_least_squares(design, Matrix(5, 1)), LinalgError);
}

TEST_CASE("svd of simple matrices") {
  const SvdResult eye = svd(Matrix::identity(4));
  for (double s : eye.s) CHECK(s == doctest::Approx(1.0));

  const SvdResult d = svd(Matrix{{3, 0}, {0, 1}});
  CHECK(d.s[0] == doctest::Approx(3.0));
  CHECK(d.s[1] == doctest::Approx(1.0));
  // Signed permutations: every entry is 0 or +-1.
  for (const Matrix* m : {&d.u, &d.vt})
    for (double v : m->data()) CHECK((std::abs(v) < 1e-12 || std::abs(std::abs(v) - 1.0) < 1e-12));
}

TEST_CASE("singular values match the Jacobi eigen oracle of m^T m") {
  const Matrix m = oracle::random_matrix(5, 5, 3);
  const SvdResult f = svd(m);
  const auto eig = oracle::jacobi_eigenvalues(oracle::naive_product(oracle::naive_transpose(m), m));
  for (std::size_t i = 0; i < 5; ++i) CHECK(f.s[i] == doctest::Approx(std::sqrt(eig[i])).epsilon(1e-8));
}

TEST_CASE("svd reconstruction and orthogonality over random shapes") {
  const std::pair<std::size_t, std::size_t> shapes[] = {{2, 2}, {5, 5}, {8, 3}, {3, 8}, {6, 1}};
  for (const auto& [rows, cols] : shapes) {
    for (unsigned seed = 0; seed < 100; ++seed) {
      const Matrix m = oracle::random_matrix(rows, cols, 1000 * static_cast<unsigned>(rows) + 31 * static_cast<unsigned>(cols) + seed);
      const SvdResult f = svd(m);
      CHECK(frobenius_norm(reconstruct(f) - m) <= 1e-9 * std::max(1.0, frobenius_norm(m)));
      CHECK(orthonormality_error(f.u) < 1e-9);
      CHECK(orthonormality_error(f.vt.transpose()) < 1e-9);
      for (std::size_t i = 0; i < f.s.size(); ++i) {
        CHECK(f.s[i] >= 0.0);
        if (i > 0) CHECK(f.s[i] <= f.s[i - 1]);
      }
    }
  }
}

TEST_CASE("svd of a rank deficient matrix keeps orthonormal factors") {
  Matrix m(4, 3);
  for (std::size_t r = 0; r < 4; ++r) {
    m(r, 0) = static_cast<double>(r + 1);
    m(r, 1) = 2.0 * static_cast<double>(r + 1);
  }
  const SvdResult f = svd(m);
  CHECK(f.s[1] < 1e-12);
  CHECK(orthonormality_error(f.u) < 1e-9);
  CHECK(frobenius_norm(reconstruct(f) - m) < 1e-9);
}

TEST_CASE("svd rejects non-finite input and reports exhausted sweeps") {
  Matrix bad = Matrix::identity(2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(svd(bad), LinalgError);
  const Matrix m = oracle::random_matrix(6, 6, 5);
  try {
    svd(m, SvdOptions{1, 1e-300});
    FAIL("expected non-convergence");
  } catch (const LinalgError& e) {
    CHECK(std::string(e.what()).find("1 sweep") != std::string::npos);
  }
}

TEST_CASE("polar decomposition of orthogonal and SPD inputs") {
  const Matrix r = oracle::rotation(M_PI / 6);
  const PolarResult pr = polar_decompose(r);
  CHECK(oracle::max_abs_diff(pr.u, r) < 1e-12);
  CHECK(oracle::max_abs_diff(pr.p, Matrix::identity(2)) < 1e-12);

  const Matrix d{{2, 0}, {0, 0.5}};
  const PolarResult pd = polar_decompose(d);
  CHECK(oracle::max_abs_diff(pd.u, Matrix::identity(2)) < 1e-12);
  CHECK(oracle::max_abs_diff(pd.p, d) < 1e-12);
  CHECK_THROWS_AS(polar_decompose(Matrix(2, 3)), LinalgError);
}

TEST_CASE("polar factor of a rotated stretch has the stretch as its spectrum") {
  const Matrix a = matmul(oracle::rotation(M_PI / 4), Matrix{{3, 0}, {0, 1}});
  const PolarResult f = polar_decompose(a);
  const auto eig = oracle::jacobi_eigenvalues(f.p);
  CHECK(eig[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(eig[1] == doctest::Approx(1.0).epsilon(1e-12));
  // P = V diag(S) V^T from the svd.
  const SvdResult s = svd(a);
  Matrix vs = s.vt.transpose();
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) vs(r, c) *= s.s[c];
  CHECK(oracle::max_abs_diff(matmul(vs, s.vt), f.p) < 1e-12);
}

TEST_CASE("polar decomposition recovers random U and P") {
  for (unsigned seed = 0; seed < 50; ++seed) {
    const Matrix g = oracle::random_matrix(3, 3, 500 + seed);
    const Matrix q = svd(g).u;  // random orthogonal
    const Matrix b = oracle::random_matrix(3, 3, 900 + seed);
    Matrix p = matmul_tn(b, b);
    for (std::size_t i = 0; i < 3; ++i) p(i, i) += 0.5;
    const PolarResult f = polar_decompose(matmul(q, p));
    CHECK(oracle::max_abs_diff(f.u, q) < 1e-8);
    CHECK(oracle::max_abs_diff(f.p, p) < 1e-8);
    CHECK(orthonormality_error(f.u) < 1e-9);
    CHECK(oracle::max_abs_diff(f.p, f.p.transpose()) == 0.0);
  }
}

TEST_CASE("covariance by definition") {
  CHECK(covariance(Matrix{{1, 2}, {1, 2}}) == Matrix(2, 2));
  const Matrix c = covariance(Matrix{{0, 0}, {2, 0}, {0, 2}, {2, 2}});
  CHECK(c(0, 0) == doctest::Approx(4.0 / 3.0));
  CHECK(c(1, 1) == doctest::Approx(4.0 / 3.0));
  CHECK(c(0, 1) == doctest::Approx(0.0));
  CHECK_THROWS_AS(covariance(Matrix(1, 2)), LinalgError);
}

TEST_CASE("covariance matches a two-pass oracle") {
  const Matrix x = oracle::random_matrix(10, 3, 11);
  const Matrix c = covariance(x);
  CHECK(oracle::max_abs_diff(c, oracle::two_pass_covariance(x)) < 1e-12);
  CHECK(c == c.transpose());
  for (double e : oracle::jacobi_eigenvalues(c)) CHECK(e >= -1e-10);
}

TEST_CASE("floored log determinant") {
  CHECK(log_det_psd(Matrix::identity(3), 1e-12) == doctest::Approx(0.0));
  CHECK(log_det_psd(Matrix{{std::exp(1.0), 0}, {0, std::exp(2.0)}}, 1e-12) == doctest::Approx(3.0));
  CHECK(log_det_psd(Matrix(2, 2), 1e-12) == doctest::Approx(2.0 * std::log(1e-12)));
  for (double c : {1e-12, 1e-3, 0.5, 7.0})
    for (std::size_t d : {1, 2, 4}) {
      CHECK(log_det_psd(Matrix::identity(d) * c, 1e-12) ==
            doctest::Approx(static_cast<double>(d) * std::log(c)));
    }
  CHECK_THROWS_AS(log_det_psd(Matrix{{1, 0.5}, {0, 1}}, 1e-12), LinalgError);
}

TEST_CASE("log determinant is nondecreasing in each eigenvalue") {
  double previous = -INFINITY;
  for (double lambda : {0.0, 1e-14, 1e-6, 0.1, 1.0, 10.0}) {
    const double v = log_det_psd(Matrix{{2, 0}, {0, lambda}}, 1e-12);
    CHECK(v >= previous);
    previous = v;
  }
}

TEST_CASE("cholesky factor from raw outputs") {
  const double zero[] = {0.0, 0.0};
  const double none[] = {0.0};
  CHECK(build_cholesky(zero, none) == Matrix::identity(2));

  const double one[] = {1.0};
  const Matrix l = build_cholesky(zero, one);
  CHECK(l == Matrix{{1, 0}, {1, 1}});
  CHECK(matmul_nt(l, l) == Matrix{{1, 1}, {1, 2}});

  const double raw3[] = {std::log(2.0), 0.0, std::log(3.0)};
  const double zeros3[] = {0.0, 0.0, 0.0};
  const Matrix d3 = build_cholesky(raw3, zeros3);
  CHECK(d3(0, 0) == doctest::Approx(2.0));
  CHECK(d3(1, 1) == doctest::Approx(1.0));
  CHECK(d3(2, 2) == doctest::Approx(3.0));
  CHECK(max_abs(d3 - Matrix::diagonal(std::vector<double>{d3(0, 0), d3(1, 1), d3(2, 2)})) == 0.0);

  const double ordered[] = {4.0, 5.0, 6.0};
  const Matrix rm = build_cholesky(zeros3, ordered);
  CHECK(rm(1, 0) == 4.0);
  CHECK(rm(2, 0) == 5.0);
  CHECK(rm(2, 1) == 6.0);

  CHECK_THROWS_AS(build_cholesky(zero, zeros3), LinalgError);
}

TEST_CASE("symmetric eigen decomposition agrees with the oracle") {
  const Matrix b = oracle::random_matrix(4, 4, 21);
  const Matrix s = matmul_tn(b, b);
  const SymmetricEigen e = symmetric_eigen(s);
  const auto expected = oracle::jacobi_eigenvalues(s);
  for (std::size_t i = 0; i < 4; ++i) CHECK(e.values[i] == doctest::Approx(expected[i]).epsilon(1e-10));
  CHECK(orthonormality_error(e.vectors) < 1e-10);
}
