#include "rosetta/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "rosetta/rng.hpp"

namespace rosetta {

EmbeddingTable embed(const ModelState& model, const Dataset& data) {
  return EmbeddingTable{encode_means(model, data.inputs), model.digest()};
}

std::size_t nearest_row(const Matrix& points, std::span<const double> target) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < points.rows(); ++r) {
    const double d = squared_distance(points.row(r), target);
    if (d < best_d) {
      best_d = d;
      best = r;
    }
  }
  return best;
}

namespace {

std::vector<std::size_t> kmeanspp_seeds(const Matrix& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows();
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::vector<bool> used(n, false);
  std::vector<double> mindist(n, std::numeric_limits<double>::infinity());
  std::size_t next = rng.index(n);
  for (std::size_t c = 0; c < k; ++c) {
    chosen.push_back(next);
    used[next] = true;
    if (c + 1 == k) break;
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      mindist[r] = std::min(mindist[r], squared_distance(points.row(r), points.row(next)));
      total += mindist[r];
    }
    if (!(total > 0.0)) {
      // Every point coincides with a chosen center.
      next = static_cast<std::size_t>(std::find(used.begin(), used.end(), false) - used.begin());
      continue;
    }
    const double target = rng.uniform() * total;
    double acc = 0.0;
    next = n;
    for (std::size_t r = 0; r < n; ++r) {
      acc += mindist[r];
      if (mindist[r] > 0.0 && acc > target) {
        next = r;
        break;
      }
    }
    if (next == n) {
      // Rounding left the target past the end; take the last positive weight.
      for (std::size_t r = n; r-- > 0;)
        if (mindist[r] > 0.0) {
          next = r;
          break;
        }
    }
  }
  return chosen;
}

double assign(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assignments,
              bool* changed) {
  double inertia = 0.0;
  bool any = false;
  for (std::size_t r = 0; r < points.rows(); ++r) {
    const std::size_t c = nearest_row(centroids, points.row(r));
    if (c != assignments[r]) any = true;
    assignments[r] = c;
    inertia += squared_distance(points.row(r), centroids.row(c));
  }
  if (changed) *changed = any;
  return inertia;
}

ClusterResult lloyd(const Matrix& points, std::size_t k, std::size_t max_iters, Rng& rng) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  ClusterResult out;
  const auto seeds = kmeanspp_seeds(points, k, rng);
  out.centroids = select_rows(points, seeds);
  out.assignments.assign(n, k);

  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    out.inertia_history.push_back(assign(points, out.centroids, out.assignments, &changed));
    if (!changed) break;

    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t c = out.assignments[r];
      ++counts[c];
      auto srow = sums.row(c);
      auto prow = points.row(r);
      for (std::size_t j = 0; j < d; ++j) srow[j] += prow[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) out.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      // Move the empty centroid onto the point farthest from its own centroid.
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t owner = out.assignments[r];
        if (counts[owner] <= 1) continue;
        const double dist = squared_distance(points.row(r), out.centroids.row(owner));
        if (dist > far_d) {
          far_d = dist;
          far = r;
        }
      }
      if (far_d < 0.0) continue;
      --counts[out.assignments[far]];
      out.assignments[far] = c;
      counts[c] = 1;
      std::copy(points.row(far).begin(), points.row(far).end(), out.centroids.row(c).begin());
      ++out.reseeded;
    }
  }
  out.inertia = assign(points, out.centroids, out.assignments, nullptr);
  return out;
}

}  // namespace

ClusterResult kmeans(const Matrix& points, const KMeansOptions& options) {
  if (options.k < 1) throw DistillError("k must be at least 1");
  if (options.k > points.rows()) {
    throw DistillError("k = " + std::to_string(options.k) + " exceeds the number of rows " +
                       std::to_string(points.rows()));
  }
  const std::size_t restarts = std::max<std::size_t>(options.restarts, 1);
  ClusterResult best;
  bool have = false;
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(options.seed, r));
    ClusterResult run = lloyd(points, options.k, std::max<std::size_t>(options.max_iters, 1), rng);
    if (!have || run.inertia < best.inertia) {
      best = std::move(run);
      have = true;
    }
  }
  return best;
}

RosettaSet select_rosetta(const EmbeddingTable& table, const ClusterResult& clusters,
                          const Dataset& data) {
  if (table.size() != data.size()) {
    throw DistillError("embedding table and dataset have different row counts");
  }
  if (clusters.centroids.cols() != table.dim()) {
    throw DistillError("centroid width does not match the embedding table");
  }
  RosettaSet out;
  const std::size_t k = clusters.centroids.rows();
  out.inputs = Matrix(k, data.dim());
  out.latents = Matrix(k, table.dim());
  out.source_digest = table.source_digest;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t r = nearest_row(table.means, clusters.centroids.row(c));
    std::copy(data.inputs.row(r).begin(), data.inputs.row(r).end(), out.inputs.row(c).begin());
    std::copy(table.means.row(r).begin(), table.means.row(r).end(), out.latents.row(c).begin());
    out.source_rows.push_back(r);
  }
  return out;
}

ClusterResult ward_agglomerative(const Matrix& points, std::size_t k) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (k < 1 || k > n) throw DistillError("agglomerative clustering needs 1 <= k <= rows");

  // Merge costs (increase in within-cluster sum of squares), updated by the
  // Lance-Williams recurrence for Ward linkage.
  Matrix cost(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = 0.5 * squared_distance(points.row(i), points.row(j));
      cost(i, j) = c;
      cost(j, i) = c;
    }
  std::vector<std::size_t> size(n, 1);
  std::vector<bool> active(n, true);
  std::vector<std::size_t> owner(n);
  std::iota(owner.begin(), owner.end(), 0);

  for (std::size_t clusters = n; clusters > k; --clusters) {
    std::size_t bi = 0;
    std::size_t bj = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (active[j] && cost(i, j) < best) {
          best = cost(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    const double ni = static_cast<double>(size[bi]);
    const double nj = static_cast<double>(size[bj]);
    for (std::size_t m = 0; m < n; ++m) {
      if (!active[m] || m == bi || m == bj) continue;
      const double nm = static_cast<double>(size[m]);
      const double updated =
          ((ni + nm) * cost(bi, m) + (nj + nm) * cost(bj, m) - nm * cost(bi, bj)) / (ni + nj + nm);
      cost(bi, m) = updated;
      cost(m, bi) = updated;
    }
    size[bi] += size[bj];
    active[bj] = false;
    for (auto& o : owner)
      if (o == bj) o = bi;
  }

  // Number clusters by their lowest member row; each representative index
  // bi is already the lowest member since merges keep the smaller index.
  std::map<std::size_t, std::size_t> label;
  for (std::size_t r = 0; r < n; ++r) label.emplace(owner[r], label.size());
  ClusterResult out;
  out.assignments.resize(n);
  out.centroids = Matrix(k, d);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t c = label.at(owner[r]);
    out.assignments[r] = c;
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) out.centroids(c, j) += points(r, j);
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < d; ++j) out.centroids(c, j) /= static_cast<double>(counts[c]);
  for (std::size_t r = 0; r < n; ++r) {
    out.inertia += squared_distance(points.row(r), out.centroids.row(out.assignments[r]));
  }
  return out;
}

namespace {

constexpr double kDegenerateEigen = 1e-10;

struct ComponentDensity {
  Matrix precision;
  double log_norm = 0.0;  // -0.5 * (d log 2pi + log det)
};

// Returns false when the covariance has an eigenvalue below the degeneracy cut.
bool prepare_density(const Matrix& cov, ComponentDensity& out) {
  const SymmetricEigen eig = symmetric_eigen(cov);
  const std::size_t d = cov.rows();
  if (eig.values.back() < kDegenerateEigen) return false;
  out.precision = Matrix(d, d);
  double log_det = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    log_det += std::log(eig.values[k]);
    const double inv = 1.0 / eig.values[k];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out.precision(i, j) += inv * eig.vectors(i, k) * eig.vectors(j, k);
  }
  out.log_norm = -0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + log_det);
  return true;
}

double mahalanobis(const Matrix& precision, std::span<const double> x, std::span<const double> mean) {
  const std::size_t d = x.size();
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) s += (x[i] - mean[i]) * precision(i, j) * (x[j] - mean[j]);
  return s;
}

}  // namespace

GmmResult fit_gmm(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t iterations) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (k < 1 || k > n) throw DistillError("gmm needs 1 <= k <= rows");

  const ClusterResult init = kmeans(points, KMeansOptions{k, seed, 300, 8});
  GmmResult out;
  out.means = init.centroids;
  out.weights.assign(k, 0.0);
  out.covariances.assign(k, Matrix::identity(d));
  for (std::size_t c = 0; c < k; ++c) {
    double ss = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (init.assignments[r] != c) continue;
      ss += squared_distance(points.row(r), out.means.row(c));
      ++count;
    }
    out.weights[c] = static_cast<double>(count) / static_cast<double>(n);
    const double var = count > 0 ? ss / static_cast<double>(count * d) : 1.0;
    out.covariances[c] = Matrix::identity(d) * std::max(var, 1e-6);
  }

  Matrix resp(n, k);
  std::vector<ComponentDensity> dens(k);
  for (std::size_t iter = 0; iter < iterations; ++iter) {
    for (std::size_t c = 0; c < k; ++c) {
      if (!prepare_density(out.covariances[c], dens[c])) {
        out.covariances[c] = Matrix::identity(d);
        prepare_density(out.covariances[c], dens[c]);
        ++out.resets;
      }
    }
    // E step with log-sum-exp normalization.
    for (std::size_t r = 0; r < n; ++r) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double w = out.weights[c];
        const double lp = w > 0.0 ? std::log(w) + dens[c].log_norm -
                                         0.5 * mahalanobis(dens[c].precision, points.row(r), out.means.row(c))
                                   : -std::numeric_limits<double>::infinity();
        resp(r, c) = lp;
        top = std::max(top, lp);
      }
      double total = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        resp(r, c) = std::isfinite(resp(r, c)) ? std::exp(resp(r, c) - top) : 0.0;
        total += resp(r, c);
      }
      for (std::size_t c = 0; c < k; ++c) resp(r, c) /= total;
    }
    // M step.
    for (std::size_t c = 0; c < k; ++c) {
      double nk = 0.0;
      for (std::size_t r = 0; r < n; ++r) nk += resp(r, c);
      if (nk <= 1e-12) {
        out.weights[c] = 0.0;
        out.covariances[c] = Matrix::identity(d);
        ++out.resets;
        continue;
      }
      Vector mean(d, 0.0);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) mean[j] += resp(r, c) * points(r, j);
      for (double& m : mean) m /= nk;
      Matrix cov(d, d);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < d; ++j)
            cov(i, j) += resp(r, c) * (points(r, i) - mean[i]) * (points(r, j) - mean[j]);
      cov *= 1.0 / nk;
      out.weights[c] = nk / static_cast<double>(n);
      std::copy(mean.begin(), mean.end(), out.means.row(c).begin());
      out.covariances[c] = std::move(cov);
    }
  }
  out.assignments.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = resp.row(r);
    out.assignments[r] =
        static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

const char* selector_name(Selector s) {
  switch (s) {
    case Selector::kmeans: return "kmeans";
    case Selector::agglomerative: return "agglomerative";
    case Selector::gmm: return "gmm";
    case Selector::random: return "random";
  }
  return "kmeans";
}

Selector parse_selector(const std::string& name) {
  if (name == "kmeans") return Selector::kmeans;
  if (name == "agglomerative") return Selector::agglomerative;
  if (name == "gmm") return Selector::gmm;
  if (name == "random") return Selector::random;
  throw DistillError("unknown selector '" + name + "'");
}

namespace {

RosettaSet pick_rows(const EmbeddingTable& table, const Dataset& data,
                     const std::vector<std::size_t>& rows) {
  RosettaSet out;
  out.inputs = select_rows(data.inputs, rows);
  out.latents = select_rows(table.means, rows);
  out.source_rows = rows;
  out.source_digest = table.source_digest;
  return out;
}

}  // namespace

Selection select_variant(const EmbeddingTable& table, const Dataset& data, std::size_t k,
                         Selector method, std::uint64_t seed) {
  if (table.size() != data.size()) {
    throw DistillError("embedding table and dataset have different row counts");
  }
  if (k < 1 || k > table.size()) throw DistillError("k must be in [1, rows]");
  Selection out;
  switch (method) {
    case Selector::kmeans: {
      const ClusterResult clusters = kmeans(table.means, KMeansOptions{k, seed, 300, 8});
      out.rosetta = select_rosetta(table, clusters, data);
      break;
    }
    case Selector::agglomerative: {
      const ClusterResult clusters = ward_agglomerative(table.means, k);
      out.rosetta = select_rosetta(table, clusters, data);
      break;
    }
    case Selector::gmm: {
      const GmmResult gmm = fit_gmm(table.means, k, seed);
      if (gmm.resets > 0) {
        out.warnings.push_back("gmm: " + std::to_string(gmm.resets) +
                               " degenerate component covariance(s) reset to identity");
      }
      std::vector<std::size_t> rows;
      for (std::size_t c = 0; c < k; ++c) rows.push_back(nearest_row(table.means, gmm.means.row(c)));
      out.rosetta = pick_rows(table, data, rows);
      break;
    }
    case Selector::random: {
      std::vector<std::size_t> order(table.size());
      std::iota(order.begin(), order.end(), 0);
      Rng rng(seed);
      rng.shuffle(std::span<std::size_t>(order));
      order.resize(k);
      out.rosetta = pick_rows(table, data, order);
      break;
    }
  }
  out.rosetta.selector = selector_name(method);
  out.rosetta.seed = seed;
  return out;
}

void save_rosetta(const std::filesystem::path& path, const RosettaSet& set) {
  std::ofstream out(path);
  if (!out) throw DistillError("cannot write " + path.string());
  out << "# rosetta-set 1\n";
  out << "# selector=" << set.selector << '\n';
  out << "# k=" << set.size() << '\n';
  out << "# seed=" << set.seed << '\n';
  out << "# source_digest=" << set.source_digest << '\n';
  out << "# input_dim=" << set.inputs.cols() << '\n';
  out << "# latent_dim=" << set.latents.cols() << '\n';
  for (std::size_t r = 0; r < set.size(); ++r) {
    out << (r < set.source_rows.size() ? set.source_rows[r] : r);
    for (double x : set.inputs.row(r)) out << ',' << format_double(x);
    for (double z : set.latents.row(r)) out << ',' << format_double(z);
    out << '\n';
  }
}

RosettaSet load_rosetta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DistillError("cannot open " + path.string());
  std::map<std::string, std::string> header;
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) header[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    rows.push_back(line);
  }
  for (const char* key : {"selector", "k", "input_dim", "latent_dim"}) {
    if (!header.count(key)) throw DistillError("rosetta file missing header '" + std::string(key) + "'");
  }
  const std::size_t k = std::stoull(header["k"]);
  const std::size_t m = std::stoull(header["input_dim"]);
  const std::size_t d = std::stoull(header["latent_dim"]);
  if (rows.size() != k || k == 0) throw DistillError("rosetta file row count does not match k");
  RosettaSet set;
  set.selector = header["selector"];
  set.seed = header.count("seed") ? std::stoull(header["seed"]) : 0;
  set.source_digest = header["source_digest"];
  set.inputs = Matrix(k, m);
  set.latents = Matrix(k, d);
  for (std::size_t r = 0; r < k; ++r) {
    std::istringstream fields(rows[r]);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (cells.size() != 1 + m + d) {
      throw DistillError("rosetta file row " + std::to_string(r + 1) + " has the wrong width");
    }
    set.source_rows.push_back(std::stoull(cells[0]));
    for (std::size_t j = 0; j < m; ++j) set.inputs(r, j) = std::stod(cells[1 + j]);
    for (std::size_t j = 0; j < d; ++j) set.latents(r, j) = std::stod(cells[1 + m + j]);
  }
  return set;
}

}  // namespace rosetta
