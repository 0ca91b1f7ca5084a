#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rosetta/linalg.hpp"

namespace rosetta {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// target ~ A * source + b, fitted by least squares.
struct AffineMap {
  Matrix a;  // d x d
  Vector b;
  /// Mean over rows of the squared mapping error at the optimum.
  double fit_residual = 0.0;

  Vector apply(std::span<const double> x) const;
};

/// Closed-form least squares on the design [source | 1].
AffineMap fit_affine(const Matrix& source_means, const Matrix& target_means);

/// Mean over rows of ||A * source + b - target||^2.
double lsd(const AffineMap& map, const Matrix& source_means, const Matrix& target_means);

/// Fits on the rows and returns the minimized distortion.
double lsd(const Matrix& source_means, const Matrix& target_means);

struct RetrainingVariability {
  double value = 0.0;
  /// log det C(x) for each evaluated row.
  std::vector<double> per_row;
  /// Set when the number of runs does not exceed the latent dimension, so
  /// every covariance is singular and the floor decides the value.
  bool degenerate = false;
};

/// For each row, the covariance of that row's means across runs, then the
/// floored log-determinant; averaged over rows. `rows` restricts the
/// evaluation to a subset (empty means every row).
RetrainingVariability retraining_variability(const std::vector<Matrix>& runs, double eigen_floor,
                                             std::span<const std::size_t> rows = {});

double median(std::vector<double> values);
/// Linear-interpolated quantile, q in [0, 1].
double quantile(std::vector<double> values, double q);
double interquartile_range(const std::vector<double>& values);

/// Subtracts the median of `baseline` from every value.
std::vector<double> normalize_by_baseline(const std::vector<double>& values,
                                          const std::vector<double>& baseline);

/// "median(iqr)" with three decimals; an exact zero median prints as "0.00".
std::string format_median_iqr(double median_value, double iqr);

struct MapAnalysis {
  Vector spectrum;  // eigenvalues of P, nonincreasing
  double identity_distance = 0.0;
  double bias_norm = 0.0;
};

/// Polar factor spectrum, Frobenius distance of A / sigma_max(A) to the
/// identity, and the Euclidean norm of b.
MapAnalysis analyze_map(const AffineMap& map);

}  // namespace rosetta
