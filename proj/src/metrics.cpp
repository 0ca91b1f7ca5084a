#include "rosetta/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace rosetta {

Vector AffineMap::apply(std::span<const double> x) const {
  Vector y = matvec(a, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

AffineMap fit_affine(const Matrix& source_means, const Matrix& target_means) {
  const std::size_t n = source_means.rows();
  const std::size_t d = source_means.cols();
  if (target_means.rows() != n || target_means.cols() != d) {
    throw MetricError("fit_affine: source and target embeddings differ in shape");
  }
  if (n <= d) {
    throw MetricError("fit_affine: " + std::to_string(n) + " rows cannot determine a " +
                      std::to_string(d) + "-d affine map");
  }
  const Matrix design = hstack(source_means, Matrix(n, 1, 1.0));
  const Matrix coef = solve_least_squares(design, target_means).coefficients;
  AffineMap map{Matrix(d, d), Vector(d), 0.0};
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) map.a(i, j) = coef(j, i);
    map.b[i] = coef(d, i);
  }
  map.fit_residual = lsd(map, source_means, target_means);
  return map;
}

double lsd(const AffineMap& map, const Matrix& source_means, const Matrix& target_means) {
  const std::size_t d = map.a.rows();
  if (source_means.cols() != d || target_means.cols() != d ||
      source_means.rows() != target_means.rows()) {
    throw MetricError("lsd: embedding dimensions do not match the map");
  }
  if (source_means.rows() == 0) throw MetricError("lsd: no rows to evaluate");
  double total = 0.0;
  for (std::size_t r = 0; r < source_means.rows(); ++r) {
    total += squared_distance(map.apply(source_means.row(r)), target_means.row(r));
  }
  return total / static_cast<double>(source_means.rows());
}

double lsd(const Matrix& source_means, const Matrix& target_means) {
  return fit_affine(source_means, target_means).fit_residual;
}

RetrainingVariability retraining_variability(const std::vector<Matrix>& runs, double eigen_floor,
                                             std::span<const std::size_t> rows) {
  const std::size_t m = runs.size();
  if (m < 2) throw MetricError("retraining variability needs at least 2 runs");
  const std::size_t n = runs.front().rows();
  const std::size_t d = runs.front().cols();
  for (const Matrix& run : runs) {
    if (run.rows() != n || run.cols() != d) {
      throw MetricError("retraining variability: runs embed different datasets");
    }
  }
  std::vector<std::size_t> all;
  if (rows.empty()) {
    all.resize(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    rows = all;
  }
  RetrainingVariability out;
  out.degenerate = m <= d;
  out.per_row.reserve(rows.size());
  Matrix stack(m, d);
  double total = 0.0;
  for (std::size_t r : rows) {
    if (r >= n) throw MetricError("retraining variability: row index out of range");
    for (std::size_t k = 0; k < m; ++k) {
      std::copy(runs[k].row(r).begin(), runs[k].row(r).end(), stack.row(k).begin());
    }
    const double ld = log_det_psd(covariance(stack), eigen_floor);
    out.per_row.push_back(ld);
    total += ld;
  }
  out.value = rows.empty() ? 0.0 : total / static_cast<double>(rows.size());
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw MetricError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

double interquartile_range(const std::vector<double>& values) {
  return quantile(values, 0.75) - quantile(values, 0.25);
}

std::vector<double> normalize_by_baseline(const std::vector<double>& values,
                                          const std::vector<double>& baseline) {
  if (baseline.empty()) throw MetricError("normalization baseline is empty");
  const double shift = median(baseline);
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(v - shift);
  return out;
}

std::string format_median_iqr(double median_value, double iqr) {
  char buf[64];
  if (median_value == 0.0) {
    std::snprintf(buf, sizeof(buf), "0.00(%.3f)", iqr);
  } else {
    std::snprintf(buf, sizeof(buf), "%.3f(%.3f)", median_value, iqr);
  }
  return buf;
}

MapAnalysis analyze_map(const AffineMap& map) {
  const Matrix& a = map.a;
  if (a.rows() != a.cols()) throw MetricError("analyze_map: A must be square");
  const SvdResult f = svd(a);
  const double sigma_max = f.s.empty() ? 0.0 : f.s.front();
  if (!(sigma_max > 0.0)) throw MetricError("analyze_map: A is zero, no scale to normalize");

  MapAnalysis out;
  out.spectrum = symmetric_eigen(polar_decompose(a).p).values;
  Matrix scaled = a * (1.0 / sigma_max);
  scaled -= Matrix::identity(a.rows());
  out.identity_distance = frobenius_norm(scaled);
  out.bias_norm = norm2(map.b);
  return out;
}

}  // namespace rosetta
