#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rosetta/linalg.hpp"

namespace rosetta {

enum class PartitionTag { joint, d1, d2 };

const char* partition_name(PartitionTag tag);

/// Parameters of a generated 8-Gaussians sample.
struct GaussianMixtureMeta {
  std::uint64_t seed = 0;
  double sigma_cluster = 0.0;
  double sigma_noise = 0.0;
  double radius = 4.0;
  Matrix centers;  // 8 x 2
};

struct Dataset {
  Matrix inputs;
  std::optional<std::vector<int>> labels;
  PartitionTag tag = PartitionTag::joint;
  std::optional<GaussianMixtureMeta> generation;

  std::size_t size() const { return inputs.rows(); }
  std::size_t dim() const { return inputs.cols(); }
  /// Rows at `rows`, keeping labels and metadata.
  Dataset subset(const std::vector<std::size_t>& rows) const;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row concatenation. Labels survive only when both sides carry them.
Dataset concat(const Dataset& a, const Dataset& b);

struct EightGaussiansOptions {
  std::size_t n_per_component = 100;
  double sigma_cluster = 0.5;
  double sigma_noise = 1.0;
  double radius = 4.0;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kEightGaussiansDim = 5;
inline constexpr std::size_t kEightGaussiansComponents = 8;

/// Eight isotropic clusters on a circle in the first two coordinates, with
/// three further coordinates of pure noise. Rows are grouped by component.
Dataset gen_8gaussians(const EightGaussiansOptions& options);

/// Splits by component: angles in (-pi/2, pi/2] go to D1, the rest to D2.
std::pair<Dataset, Dataset> partition_halfplane(const Dataset& data);

/// Seeded shuffle, then the first round(n * fraction) rows become training.
std::pair<Dataset, Dataset> split_train_val(const Dataset& data, double fraction,
                                            std::uint64_t seed);

/// Row order produced by split_train_val, exposed for provenance.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double fraction, std::uint64_t seed);

enum class TabularFormat { delimited, raw };

/// Delimited text: a header row naming each column "feature" or "label",
/// then numeric rows. Raw: two little-endian uint64 (rows, cols) followed by
/// row-major little-endian doubles.
Dataset load_tabular(const std::filesystem::path& path, TabularFormat format);
void save_tabular(const std::filesystem::path& path, const Dataset& data, TabularFormat format);

TabularFormat parse_tabular_format(const std::string& name);

/// Formats with 17 significant digits, which round-trips every double.
std::string format_double(double x);

}  // namespace rosetta
