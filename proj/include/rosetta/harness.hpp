#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rosetta/datasets.hpp"
#include "rosetta/distill.hpp"
#include "rosetta/report.hpp"
#include "rosetta/vae.hpp"

namespace rosetta {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Protocol { reproducibility, sequential, grid, ablation };
enum class Method { vae, beta_vae, r_vae };
enum class AblationAxis { rp_count, selector, architecture };

/// How grid cells are scored on the validation split.
///   reference: beta cells by recon + KL, rho cells by recon + KL plus the
///              anchor penalty at rho = 1 (weighted like training).
///   own_objective: each cell's own training objective.
enum class GridCriterion { reference, own_objective };

const char* protocol_name(Protocol p);
Protocol parse_protocol(const std::string& name);
const char* method_name(Method m);   // "vae", "beta_vae", "r_vae"
const char* method_label(Method m);  // "VAE", "beta-VAE", "R-VAE"
Method parse_method(const std::string& name);
const char* axis_name(AblationAxis a);
AblationAxis parse_axis(const std::string& name);
const char* criterion_name(GridCriterion c);
GridCriterion parse_criterion(const std::string& name);

/// "[a:s:b]" read inclusively as {a, a+s, ..., b}.
std::vector<double> parse_bracket(const std::string& text);
std::string format_bracket(double start, double step, double stop);

struct DatasetSpec {
  /// "8gaussians" or "tabular".
  std::string kind = "8gaussians";
  std::filesystem::path path;
  TabularFormat format = TabularFormat::delimited;
  EightGaussiansOptions gaussians;
  double train_fraction = 0.6;
};

struct GridSpec {
  bool enabled = true;
  std::string beta = "[0:2.5:25]";
  std::string rho = "[0:0.75:15]";
  std::size_t epochs = 20;
  GridCriterion criterion = GridCriterion::reference;
};

struct AblationSpec {
  AblationAxis axis = AblationAxis::rp_count;
  std::vector<std::size_t> rp_counts = {2, 4, 8, 16};
  std::vector<Selector> selectors = {Selector::kmeans, Selector::agglomerative, Selector::gmm,
                                     Selector::random};
  std::vector<std::string> architectures = {"simple", "same", "complex"};
};

struct ExperimentConfig {
  DatasetSpec dataset;
  Architecture architecture;
  /// beta and rho here are used for beta-VAE and R-VAE when the grid is off.
  TrainConfig train;
  Protocol protocol = Protocol::reproducibility;
  std::size_t n_repeats = 10;
  std::size_t k = 8;
  Selector selector = Selector::kmeans;
  std::filesystem::path output_dir = "rosetta-out";
  std::vector<Method> methods = {Method::vae, Method::beta_vae, Method::r_vae};
  GridSpec grid;
  AblationSpec ablation;
  std::size_t plateau_window = 20;
  /// Write checkpoints, embeddings and loss traces for every run.
  bool save_artifacts = true;

  void validate() const;
  /// Digest of every field that can change results (output location excluded).
  std::string digest() const;
};

std::string config_to_json(const ExperimentConfig& config, bool include_output = true);
/// Fields absent from `text` keep their value from `base`; unknown keys are errors.
ExperimentConfig config_from_json(const std::string& text, const ExperimentConfig& base = {});

/// Architecture variants for the ablation axis: "simple" drops the first
/// hidden layer, "complex" inserts one of 1.5x the first width after it.
Architecture architecture_variant(const Architecture& base, const std::string& name);

/// Generated or loaded data for the configured dataset.
Dataset load_experiment_data(const DatasetSpec& spec);
/// 8-Gaussians data split by half-plane; labelled tabular data by the lower
/// half of its distinct labels; unlabelled data into seeded random halves.
std::pair<Dataset, Dataset> partition_dataset(const Dataset& data, std::uint64_t seed);

struct RunRecord {
  std::string method;
  std::size_t run = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::filesystem::path checkpoint;
  std::filesystem::path embeddings;
  std::filesystem::path trace;
  double wall_clock_seconds = 0.0;
  bool failed = false;
  std::string error;
};

/// Training settings of one method.
struct MethodSettings {
  Method method = Method::vae;
  Architecture architecture;
  TrainConfig train;
};

/// Trains one model. Baselines receive only `data`; the anchor set is read
/// solely by the R-VAE.
TrainResult train_method(const MethodSettings& settings, const Dataset& data,
                         const Dataset* validation, const RosettaSet* rosetta);

/// Training set for a method: `data` followed by each anchor input once.
Dataset with_anchor_duplicates(const Dataset& data, const RosettaSet& rosetta);

enum class GridAxis { beta, rho };

struct GridCell {
  GridAxis axis = GridAxis::beta;
  double value = 0.0;
  double score = 0.0;
  bool failed = false;
  std::string error;
};

struct GridResult {
  double beta = 0.0;
  double rho = 0.0;
  std::vector<GridCell> cells;
};

using GridScorer = std::function<double(GridAxis, double)>;

/// Scores every cell (in parallel), drops failures, and picks the lowest
/// score per axis with ties going to the smaller value.
GridResult select_from_grid(const std::vector<double>& betas, const std::vector<double>& rhos,
                            const GridScorer& scorer);

/// Grid over the reproducibility setup of `config`.
GridResult grid_search(const ExperimentConfig& config);
/// Grid for a given training set, validation split and anchor set.
GridResult grid_search(const ExperimentConfig& config, const Dataset& train_data,
                       const Dataset& validation, const RosettaSet& rosetta);

/// Epoch count at which the windowed-median validation loss stopped
/// improving for `window` epochs; the full length when it never did.
std::size_t plateau_budget(const std::vector<double>& val_losses, std::size_t window);

/// Test seam: the anchor set handed to each method's runs.
struct ProtocolHooks {
  std::function<RosettaSet(const RosettaSet&, Method)> rosetta_for_method;
};

struct ProtocolResult {
  Report report;
  std::vector<RunRecord> runs;
  /// Grid searches in the order they ran, labelled by sweep variant.
  std::vector<std::pair<std::string, GridResult>> grids;
};

ProtocolResult run_reproducibility(const ExperimentConfig& config, const ProtocolHooks& hooks = {});
ProtocolResult run_sequential(const ExperimentConfig& config, const ProtocolHooks& hooks = {});
ProtocolResult run_ablation(const ExperimentConfig& config);

/// Writes report files plus runs.csv (with wall-clock) and grid.csv.
void write_protocol_outputs(const std::filesystem::path& dir, const ProtocolResult& result);

/// Latent means and flattened Cholesky factors (diagonal and lower triangle,
/// row-major) per dataset row, as delimited text readable by load_tabular.
void export_embeddings(const ModelState& model, const Dataset& data,
                       const std::filesystem::path& out);

/// Per-epoch losses as CSV.
void write_trace(const std::filesystem::path& path, const std::vector<EpochRecord>& trace);

/// Worker count from ROSETTA_WORKERS, else hardware concurrency.
std::size_t worker_count();
/// Runs fn(0..n-1) over the worker pool; rethrows the first failure by index.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace rosetta
