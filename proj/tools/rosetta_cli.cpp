// Command line front end for data generation, training, distillation and
// the experiment protocols.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rosetta/checkpoint.hpp"
#include "rosetta/harness.hpp"

using namespace rosetta;
using nlohmann::json;

namespace {

// Flags shared by every subcommand that builds an ExperimentConfig. Each is
// optional so that only flags given on the command line override the file.
struct ExperimentFlags {
  std::string config_file;
  std::optional<std::string> output;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> n_repeats;
  std::optional<std::size_t> k;
  std::optional<std::string> selector;
  std::optional<std::vector<std::string>> methods;
  std::optional<double> beta;
  std::optional<double> rho;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<double> eigen_floor;
  std::optional<bool> weighting;
  std::optional<bool> grid;
  std::optional<std::string> grid_beta;
  std::optional<std::string> grid_rho;
  std::optional<std::size_t> grid_epochs;
  std::optional<std::string> grid_criterion;
  std::optional<std::string> axis;
  std::optional<std::vector<std::size_t>> rp_counts;
  std::optional<std::vector<std::string>> selectors;
  std::optional<std::vector<std::string>> architectures;
  std::optional<std::vector<std::size_t>> hidden;
  std::optional<std::size_t> latent_dim;
  std::optional<std::string> activation;
  std::optional<std::string> data;
  std::optional<std::string> format;
  std::optional<std::size_t> n_per_component;
  std::optional<double> sigma_noise;
  std::optional<std::size_t> plateau_window;
  std::optional<bool> artifacts;
};

void add_data_flags(CLI::App* cmd, ExperimentFlags& f) {
  cmd->add_option("--data", f.data, "Tabular data file (default: generated 8 Gaussians)");
  cmd->add_option("--format", f.format, "Tabular format: delimited or raw");
  cmd->add_option("--data-seed", f.data_seed, "Seed for generated data");
  cmd->add_option("--n-per-component", f.n_per_component, "Generated points per component");
  cmd->add_option("--sigma-noise", f.sigma_noise, "Std of the generated noise dimensions");
}

void add_model_flags(CLI::App* cmd, ExperimentFlags& f) {
  cmd->add_option("--hidden", f.hidden, "Hidden layer widths")->delimiter(',');
  cmd->add_option("--latent-dim", f.latent_dim, "Latent dimension");
  cmd->add_option("--activation", f.activation, "relu, tanh or identity");
  cmd->add_option("--seed", f.seed, "Base training seed");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--beta", f.beta, "KL weight (beta-VAE when the grid is off)");
  cmd->add_option("--rho", f.rho, "Anchor weight (R-VAE when the grid is off)");
  cmd->add_option("--lr", f.lr, "Adam learning rate");
  cmd->add_option("--batch-size", f.batch_size, "Minibatch size");
  cmd->add_option("--eigen-floor", f.eigen_floor, "Eigenvalue floor for log-determinants");
  cmd->add_option("--rosetta-weighting", f.weighting, "Scale rho by count / batch size");
}

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f) {
  cmd->add_option("--config", f.config_file, "JSON config file; flags override it");
  cmd->add_option("-o,--output", f.output, "Output directory");
  add_data_flags(cmd, f);
  add_model_flags(cmd, f);
  cmd->add_option("--n-repeats", f.n_repeats, "Runs per method");
  cmd->add_option("-k,--k", f.k, "Rosetta point count");
  cmd->add_option("--selector", f.selector, "kmeans, agglomerative, gmm or random");
  cmd->add_option("--methods", f.methods, "Methods: vae, beta_vae, r_vae")->delimiter(',');
  cmd->add_option("--grid", f.grid, "Run the hyperparameter grid (true/false)");
  cmd->add_option("--grid-beta", f.grid_beta, "Beta grid as [start:step:stop]");
  cmd->add_option("--grid-rho", f.grid_rho, "Rho grid as [start:step:stop]");
  cmd->add_option("--grid-epochs", f.grid_epochs, "Epochs per grid cell");
  cmd->add_option("--grid-criterion", f.grid_criterion, "reference or own_objective");
  cmd->add_option("--axis", f.axis, "Ablation axis: rp_count, selector, architecture");
  cmd->add_option("--rp-counts", f.rp_counts, "Rosetta counts to sweep")->delimiter(',');
  cmd->add_option("--selectors", f.selectors, "Selectors to sweep")->delimiter(',');
  cmd->add_option("--architectures", f.architectures, "simple, same, complex")->delimiter(',');
  cmd->add_option("--plateau-window", f.plateau_window, "Plateau detection window (epochs)");
  cmd->add_option("--artifacts", f.artifacts, "Save checkpoints, embeddings, traces per run");
}

template <typename T>
void put(json& j, const std::string& path, const std::optional<T>& v) {
  if (!v) return;
  j[json::json_pointer(path)] = *v;
}

ExperimentConfig build_config(const ExperimentFlags& f, Protocol protocol) {
  json patch = json::object();
  if (!f.config_file.empty()) {
    std::ifstream in(f.config_file);
    if (!in) throw HarnessError("cannot open config file " + f.config_file);
    std::stringstream ss;
    ss << in.rdbuf();
    patch = json::parse(ss.str());
  }
  put(patch, "/output_dir", f.output);
  put(patch, "/train/seed", f.seed);
  put(patch, "/train/epochs", f.epochs);
  put(patch, "/train/beta", f.beta);
  put(patch, "/train/rho", f.rho);
  put(patch, "/train/learning_rate", f.lr);
  put(patch, "/train/batch_size", f.batch_size);
  put(patch, "/train/eigen_floor", f.eigen_floor);
  put(patch, "/train/rosetta_weighting", f.weighting);
  put(patch, "/n_repeats", f.n_repeats);
  put(patch, "/k", f.k);
  put(patch, "/selector", f.selector);
  put(patch, "/methods", f.methods);
  put(patch, "/grid/enabled", f.grid);
  put(patch, "/grid/beta", f.grid_beta);
  put(patch, "/grid/rho", f.grid_rho);
  put(patch, "/grid/epochs", f.grid_epochs);
  put(patch, "/grid/criterion", f.grid_criterion);
  put(patch, "/ablation/axis", f.axis);
  put(patch, "/ablation/rp_counts", f.rp_counts);
  put(patch, "/ablation/selectors", f.selectors);
  put(patch, "/ablation/architectures", f.architectures);
  put(patch, "/architecture/hidden", f.hidden);
  put(patch, "/architecture/latent_dim", f.latent_dim);
  put(patch, "/architecture/activation", f.activation);
  put(patch, "/dataset/seed", f.data_seed);
  put(patch, "/dataset/n_per_component", f.n_per_component);
  put(patch, "/dataset/sigma_noise", f.sigma_noise);
  put(patch, "/dataset/format", f.format);
  put(patch, "/plateau_window", f.plateau_window);
  put(patch, "/save_artifacts", f.artifacts);
  if (f.data) {
    patch["dataset"]["kind"] = "tabular";
    patch["dataset"]["path"] = *f.data;
  }
  patch["protocol"] = protocol_name(protocol);
  ExperimentConfig config = config_from_json(patch.dump());
  if (config.dataset.kind == "tabular" && !patch.contains("/architecture/input_dim"_json_pointer) &&
      std::filesystem::exists(config.dataset.path)) {
    config.architecture.input_dim = load_tabular(config.dataset.path, config.dataset.format).dim();
  }
  return config;
}

Dataset select_partition(const Dataset& data, const std::string& part, const ExperimentConfig& c) {
  if (part == "joint") return data;
  auto [d1, d2] = partition_dataset(data, c.train.seed);
  if (part == "D1" || part == "d1") return d1;
  if (part == "D2" || part == "d2") return d2;
  throw HarnessError("unknown partition '" + part + "' (expected joint, D1, D2)");
}

void print_summary(const ProtocolResult& result, const std::filesystem::path& dir) {
  std::cout << result.report.title << "\n\n" << render_table(result.report.rows) << '\n';
  std::size_t failed = 0;
  for (const auto& r : result.runs) failed += r.failed ? 1 : 0;
  std::cout << result.runs.size() << " runs (" << failed << " failed); outputs in " << dir.string()
            << '\n';
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << json{{"status", "error"}, {"kind", kind}, {"message", message}}.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rosetta VAE experiments"};
  app.require_subcommand(1);

  ExperimentFlags flags;

  auto* gen = app.add_subcommand("gen-data", "Generate 8-Gaussians data");
  std::string gen_out;
  bool gen_split = false;
  gen->add_option("-o,--out", gen_out, "Output file")->required();
  gen->add_flag("--split", gen_split, "Also write the D1 and D2 partitions next to the output");
  add_data_flags(gen, flags);
  gen->add_option("--seed", flags.seed, "Partition seed");

  auto* train_cmd = app.add_subcommand("train", "Train one model");
  std::string train_method_name = "vae", train_out, train_rosetta, train_trace, train_part = "joint";
  train_cmd->add_option("--method", train_method_name, "vae, beta_vae or r_vae");
  train_cmd->add_option("-o,--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--rosetta", train_rosetta, "Anchor file (r_vae)");
  train_cmd->add_option("--trace", train_trace, "Loss trace CSV");
  train_cmd->add_option("--partition", train_part, "joint, D1 or D2");
  add_data_flags(train_cmd, flags);
  add_model_flags(train_cmd, flags);

  auto* distill_cmd = app.add_subcommand("distill", "Select Rosetta points from a trained model");
  std::string distill_ckpt, distill_out, distill_part = "joint";
  distill_cmd->add_option("--checkpoint", distill_ckpt, "Model checkpoint")->required();
  distill_cmd->add_option("-o,--out", distill_out, "Anchor file")->required();
  distill_cmd->add_option("--partition", distill_part, "joint, D1 or D2");
  distill_cmd->add_option("-k,--k", flags.k, "Rosetta point count");
  distill_cmd->add_option("--selector", flags.selector, "kmeans, agglomerative, gmm or random");
  distill_cmd->add_option("--seed", flags.seed, "Clustering seed");
  add_data_flags(distill_cmd, flags);

  auto* grid_cmd = app.add_subcommand("grid", "Hyperparameter grid search");
  add_experiment_flags(grid_cmd, flags);
  auto* repro_cmd = app.add_subcommand("repro", "Reproducibility protocol");
  add_experiment_flags(repro_cmd, flags);
  auto* seq_cmd = app.add_subcommand("sequential", "Sequential protocol");
  add_experiment_flags(seq_cmd, flags);
  auto* ablate_cmd = app.add_subcommand("ablate", "Ablation sweep");
  add_experiment_flags(ablate_cmd, flags);

  auto* export_cmd = app.add_subcommand("export", "Export latent means and Cholesky factors");
  std::string export_ckpt, export_out, export_part = "joint";
  export_cmd->add_option("--checkpoint", export_ckpt, "Model checkpoint")->required();
  export_cmd->add_option("-o,--out", export_out, "Embedding table")->required();
  export_cmd->add_option("--partition", export_part, "joint, D1 or D2");
  add_data_flags(export_cmd, flags);
  export_cmd->add_option("--seed", flags.seed, "Partition seed");

  auto* report_cmd = app.add_subcommand("report", "Render a report directory as a table");
  std::string report_dir;
  report_cmd->add_option("dir", report_dir, "Directory holding report.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*gen) {
      const ExperimentConfig c = build_config(flags, Protocol::reproducibility);
      const Dataset data = load_experiment_data(c.dataset);
      save_tabular(gen_out, data, c.dataset.format);
      std::cout << "wrote " << data.size() << " rows to " << gen_out << '\n';
      if (gen_split) {
        auto [d1, d2] = partition_dataset(data, c.train.seed);
        const std::filesystem::path base(gen_out);
        const std::string stem = (base.parent_path() / base.stem()).string();
        const std::string ext = base.extension().string();
        save_tabular(stem + "_D1" + ext, d1, c.dataset.format);
        save_tabular(stem + "_D2" + ext, d2, c.dataset.format);
        std::cout << "D1 " << d1.size() << " rows, D2 " << d2.size() << " rows\n";
      }
    } else if (*train_cmd) {
      const ExperimentConfig c = build_config(flags, Protocol::reproducibility);
      const Dataset data = select_partition(load_experiment_data(c.dataset), train_part, c);
      MethodSettings s{parse_method(train_method_name), c.architecture, c.train};
      std::optional<RosettaSet> anchors;
      if (!train_rosetta.empty()) anchors = load_rosetta(train_rosetta);
      if (s.method == Method::r_vae && !anchors) throw HarnessError("r_vae needs --rosetta");
      const Dataset train_data = anchors ? with_anchor_duplicates(data, *anchors) : data;
      TrainResult result = train_method(s, train_data, nullptr, anchors ? &*anchors : nullptr);
      result.model.provenance.config_digest = c.digest();
      save_checkpoint(train_out, result.model);
      if (!train_trace.empty()) write_trace(train_trace, result.trace);
      std::cout << "final training loss " << result.trace.back().train_loss << "; checkpoint "
                << train_out << '\n';
    } else if (*distill_cmd) {
      const ExperimentConfig c = build_config(flags, Protocol::reproducibility);
      const ModelState model = load_checkpoint(distill_ckpt);
      const Dataset data = select_partition(load_experiment_data(c.dataset), distill_part, c);
      const Selection sel = select_variant(embed(model, data), data, c.k, c.selector, c.train.seed);
      for (const auto& w : sel.warnings) std::cerr << json{{"status", "warning"}, {"message", w}}.dump() << '\n';
      save_rosetta(distill_out, sel.rosetta);
      std::cout << "wrote " << sel.rosetta.size() << " Rosetta points to " << distill_out << '\n';
    } else if (*grid_cmd) {
      const ExperimentConfig c = build_config(flags, Protocol::grid);
      const GridResult g = grid_search(c);
      ProtocolResult result;
      result.report.title = "Hyperparameter grid";
      result.grids.emplace_back("repro", g);
      std::filesystem::create_directories(c.output_dir);
      write_protocol_outputs(c.output_dir, result);
      std::cout << "beta* = " << g.beta << ", rho* = " << g.rho << "; cells in "
                << (c.output_dir / "grid.csv").string() << '\n';
    } else if (*repro_cmd || *seq_cmd || *ablate_cmd) {
      const Protocol p = *repro_cmd ? Protocol::reproducibility
                         : *seq_cmd ? Protocol::sequential
                                    : Protocol::ablation;
      const ExperimentConfig c = build_config(flags, p);
      const ProtocolResult result = p == Protocol::reproducibility ? run_reproducibility(c)
                                    : p == Protocol::sequential    ? run_sequential(c)
                                                                   : run_ablation(c);
      write_protocol_outputs(c.output_dir, result);
      print_summary(result, c.output_dir);
    } else if (*export_cmd) {
      const ExperimentConfig c = build_config(flags, Protocol::reproducibility);
      const ModelState model = load_checkpoint(export_ckpt);
      const Dataset data = select_partition(load_experiment_data(c.dataset), export_part, c);
      export_embeddings(model, data, export_out);
      std::cout << "wrote " << data.size() << " embeddings to " << export_out << '\n';
    } else if (*report_cmd) {
      const std::filesystem::path dir(report_dir);
      std::cout << render_table(read_report_rows(dir / "report.csv"));
    }
  } catch (const std::exception& e) {
    return fail("runtime", e.what());
  }
  return 0;
}
