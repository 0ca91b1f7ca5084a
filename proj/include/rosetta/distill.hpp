#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rosetta/datasets.hpp"
#include "rosetta/linalg.hpp"
#include "rosetta/vae.hpp"

namespace rosetta {

/// Posterior means of a model over a dataset, one row per dataset row.
struct EmbeddingTable {
  Matrix means;
  std::string source_digest;

  std::size_t size() const { return means.rows(); }
  std::size_t dim() const { return means.cols(); }
};

EmbeddingTable embed(const ModelState& model, const Dataset& data);

struct ClusterResult {
  Matrix centroids;                     // k x d
  std::vector<std::size_t> assignments;  // one per row
  double inertia = 0.0;
  /// Inertia after each assignment pass of the winning restart.
  std::vector<double> inertia_history;
  /// Empty clusters re-seeded during the winning restart.
  std::size_t reseeded = 0;
};

struct KMeansOptions {
  std::size_t k = 8;
  std::uint64_t seed = 0;
  std::size_t max_iters = 300;
  std::size_t restarts = 8;
};

class DistillError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lloyd iterations from k-means++ seeding, best of `restarts` by inertia.
/// Ties in nearest-centroid assignment go to the lowest centroid index. An
/// emptied cluster is moved onto the point farthest from its own centroid.
ClusterResult kmeans(const Matrix& points, const KMeansOptions& options);

/// Index of the row of `points` closest to `target`; ties go to the lowest row.
std::size_t nearest_row(const Matrix& points, std::span<const double> target);

/// For each centroid, the closest embedding row and its original input.
RosettaSet select_rosetta(const EmbeddingTable& table, const ClusterResult& clusters,
                          const Dataset& data);

/// Ward-linkage agglomerative clustering cut at k clusters. Clusters are
/// numbered by their lowest member row.
ClusterResult ward_agglomerative(const Matrix& points, std::size_t k);

struct GmmResult {
  Matrix means;                      // k x d
  std::vector<Matrix> covariances;   // k of d x d
  Vector weights;
  std::vector<std::size_t> assignments;
  /// Covariance resets triggered by degenerate components.
  std::size_t resets = 0;
};

/// Full-covariance Gaussian mixture by EM. Components start from k-means
/// centroids with spherical covariances.
GmmResult fit_gmm(const Matrix& points, std::size_t k, std::uint64_t seed,
                  std::size_t iterations = 50);

enum class Selector { kmeans, agglomerative, gmm, random };

const char* selector_name(Selector s);
Selector parse_selector(const std::string& name);

struct Selection {
  RosettaSet rosetta;
  std::vector<std::string> warnings;
};

Selection select_variant(const EmbeddingTable& table, const Dataset& data, std::size_t k,
                         Selector method, std::uint64_t seed);

/// Header lines "# key=value", then one row per pair:
/// source_row, x_r..., z_r... with 17 significant digits.
void save_rosetta(const std::filesystem::path& path, const RosettaSet& set);
RosettaSet load_rosetta(const std::filesystem::path& path);

}  // namespace rosetta
