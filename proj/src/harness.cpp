#include "rosetta/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rosetta/checkpoint.hpp"
#include "rosetta/metrics.hpp"
#include "rosetta/rng.hpp"

namespace rosetta {

using nlohmann::json;

// ---------------------------------------------------------------- names

namespace {

template <typename E, std::size_t N>
E parse_named(const std::string& name, const std::pair<const char*, E> (&table)[N],
              const char* what) {
  for (const auto& [n, e] : table)
    if (name == n) return e;
  std::string known;
  for (const auto& [n, e] : table) known += (known.empty() ? "" : ", ") + std::string(n);
  throw HarnessError(std::string("unknown ") + what + " '" + name + "' (expected " + known + ")");
}

const std::pair<const char*, Protocol> kProtocols[] = {
    {"reproducibility", Protocol::reproducibility},
    {"sequential", Protocol::sequential},
    {"grid", Protocol::grid},
    {"ablation", Protocol::ablation}};
const std::pair<const char*, Method> kMethods[] = {
    {"vae", Method::vae}, {"beta_vae", Method::beta_vae}, {"r_vae", Method::r_vae}};
const std::pair<const char*, AblationAxis> kAxes[] = {{"rp_count", AblationAxis::rp_count},
                                                      {"selector", AblationAxis::selector},
                                                      {"architecture", AblationAxis::architecture}};
const std::pair<const char*, GridCriterion> kCriteria[] = {
    {"reference", GridCriterion::reference}, {"own_objective", GridCriterion::own_objective}};

template <typename E, std::size_t N>
const char* name_of(E value, const std::pair<const char*, E> (&table)[N]) {
  for (const auto& [n, e] : table)
    if (e == value) return n;
  return "?";
}

std::string hex64(std::uint64_t h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

}  // namespace

const char* protocol_name(Protocol p) { return name_of(p, kProtocols); }
Protocol parse_protocol(const std::string& name) {
  if (name == "repro") return Protocol::reproducibility;
  return parse_named(name, kProtocols, "protocol");
}
const char* method_name(Method m) { return name_of(m, kMethods); }
const char* method_label(Method m) {
  switch (m) {
    case Method::vae: return "VAE";
    case Method::beta_vae: return "beta-VAE";
    case Method::r_vae: return "R-VAE";
  }
  return "?";
}
Method parse_method(const std::string& name) { return parse_named(name, kMethods, "method"); }
const char* axis_name(AblationAxis a) { return name_of(a, kAxes); }
AblationAxis parse_axis(const std::string& name) { return parse_named(name, kAxes, "ablation axis"); }
const char* criterion_name(GridCriterion c) { return name_of(c, kCriteria); }
GridCriterion parse_criterion(const std::string& name) {
  return parse_named(name, kCriteria, "grid criterion");
}

// ---------------------------------------------------------------- brackets

std::vector<double> parse_bracket(const std::string& text) {
  auto fail = [&] { return HarnessError("malformed grid '" + text + "', expected [start:step:stop]"); };
  if (text.size() < 2 || text.front() != '[' || text.back() != ']') throw fail();
  std::vector<double> parts;
  std::istringstream in(text.substr(1, text.size() - 2));
  std::string piece;
  while (std::getline(in, piece, ':')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stod(piece, &used));
      if (used != piece.size()) throw fail();
    } catch (const std::logic_error&) {
      throw fail();
    }
  }
  if (parts.size() == 1) return {parts[0]};
  if (parts.size() != 3) throw fail();
  const double start = parts[0], step = parts[1], stop = parts[2];
  if (!(step > 0.0) || stop < start) throw fail();
  const auto count = static_cast<std::size_t>(std::llround((stop - start) / step)) + 1;
  if (std::abs(start + static_cast<double>(count - 1) * step - stop) > 1e-9 * std::max(1.0, std::abs(stop))) {
    throw HarnessError("grid '" + text + "': stop is not reachable from start in whole steps");
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = start + static_cast<double>(i) * step;
  values.back() = stop;
  return values;
}

std::string format_bracket(double start, double step, double stop) {
  return "[" + format_double(start) + ":" + format_double(step) + ":" + format_double(stop) + "]";
}

// ---------------------------------------------------------------- config

namespace {

json to_json(const ExperimentConfig& c, bool include_output) {
  json j;
  const auto& g = c.dataset.gaussians;
  j["dataset"] = {{"kind", c.dataset.kind},
                  {"path", c.dataset.path.string()},
                  {"format", c.dataset.format == TabularFormat::raw ? "raw" : "delimited"},
                  {"n_per_component", g.n_per_component},
                  {"sigma_cluster", g.sigma_cluster},
                  {"sigma_noise", g.sigma_noise},
                  {"radius", g.radius},
                  {"seed", g.seed},
                  {"train_fraction", c.dataset.train_fraction}};
  j["architecture"] = {{"input_dim", c.architecture.input_dim},
                       {"hidden", c.architecture.hidden},
                       {"latent_dim", c.architecture.latent_dim},
                       {"activation", activation_name(c.architecture.activation)}};
  j["train"] = {{"beta", c.train.beta},
                {"rho", c.train.rho},
                {"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed},
                {"eigen_floor", c.train.eigen_floor},
                {"rosetta_weighting", c.train.rosetta_weighting}};
  j["protocol"] = protocol_name(c.protocol);
  j["n_repeats"] = c.n_repeats;
  j["k"] = c.k;
  j["selector"] = selector_name(c.selector);
  std::vector<std::string> methods;
  for (Method m : c.methods) methods.emplace_back(method_name(m));
  j["methods"] = methods;
  j["grid"] = {{"enabled", c.grid.enabled},
               {"beta", c.grid.beta},
               {"rho", c.grid.rho},
               {"epochs", c.grid.epochs},
               {"criterion", criterion_name(c.grid.criterion)}};
  std::vector<std::string> selectors;
  for (Selector s : c.ablation.selectors) selectors.emplace_back(selector_name(s));
  j["ablation"] = {{"axis", axis_name(c.ablation.axis)},
                   {"rp_counts", c.ablation.rp_counts},
                   {"selectors", selectors},
                   {"architectures", c.ablation.architectures}};
  j["plateau_window"] = c.plateau_window;
  if (include_output) {
    j["output_dir"] = c.output_dir.string();
    j["save_artifacts"] = c.save_artifacts;
  }
  return j;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw HarnessError("config: '" + where + "' must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || item.key() == a;
    if (!known) throw HarnessError("config: unknown key '" + where + item.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw HarnessError("config: bad value for '" + where + key + "': " + e.what());
  }
}

}  // namespace

std::string config_to_json(const ExperimentConfig& config, bool include_output) {
  return to_json(config, include_output).dump(2);
}

ExperimentConfig config_from_json(const std::string& text, const ExperimentConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw HarnessError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = base;
  check_keys(j, {"dataset", "architecture", "train", "protocol", "n_repeats", "k", "selector",
                 "methods", "grid", "ablation", "plateau_window", "output_dir", "save_artifacts"},
             "");
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    check_keys(d, {"kind", "path", "format", "n_per_component", "sigma_cluster", "sigma_noise",
                   "radius", "seed", "train_fraction"},
               "dataset.");
    read(d, "kind", c.dataset.kind, "dataset.");
    std::string path = c.dataset.path.string();
    read(d, "path", path, "dataset.");
    c.dataset.path = path;
    if (d.contains("format")) c.dataset.format = parse_tabular_format(d["format"].get<std::string>());
    auto& g = c.dataset.gaussians;
    read(d, "n_per_component", g.n_per_component, "dataset.");
    read(d, "sigma_cluster", g.sigma_cluster, "dataset.");
    read(d, "sigma_noise", g.sigma_noise, "dataset.");
    read(d, "radius", g.radius, "dataset.");
    read(d, "seed", g.seed, "dataset.");
    read(d, "train_fraction", c.dataset.train_fraction, "dataset.");
  }
  if (j.contains("architecture")) {
    const json& a = j["architecture"];
    check_keys(a, {"input_dim", "hidden", "latent_dim", "activation"}, "architecture.");
    read(a, "input_dim", c.architecture.input_dim, "architecture.");
    read(a, "hidden", c.architecture.hidden, "architecture.");
    read(a, "latent_dim", c.architecture.latent_dim, "architecture.");
    if (a.contains("activation")) {
      c.architecture.activation = parse_activation(a["activation"].get<std::string>());
    }
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, {"beta", "rho", "learning_rate", "batch_size", "epochs", "seed", "eigen_floor",
                   "rosetta_weighting"},
               "train.");
    read(t, "beta", c.train.beta, "train.");
    read(t, "rho", c.train.rho, "train.");
    read(t, "learning_rate", c.train.learning_rate, "train.");
    read(t, "batch_size", c.train.batch_size, "train.");
    read(t, "epochs", c.train.epochs, "train.");
    read(t, "seed", c.train.seed, "train.");
    read(t, "eigen_floor", c.train.eigen_floor, "train.");
    read(t, "rosetta_weighting", c.train.rosetta_weighting, "train.");
  }
  if (j.contains("protocol")) c.protocol = parse_protocol(j["protocol"].get<std::string>());
  read(j, "n_repeats", c.n_repeats, "");
  read(j, "k", c.k, "");
  if (j.contains("selector")) c.selector = parse_selector(j["selector"].get<std::string>());
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j["methods"]) c.methods.push_back(parse_method(m.get<std::string>()));
  }
  if (j.contains("grid")) {
    const json& g = j["grid"];
    check_keys(g, {"enabled", "beta", "rho", "epochs", "criterion"}, "grid.");
    read(g, "enabled", c.grid.enabled, "grid.");
    read(g, "beta", c.grid.beta, "grid.");
    read(g, "rho", c.grid.rho, "grid.");
    read(g, "epochs", c.grid.epochs, "grid.");
    if (g.contains("criterion")) c.grid.criterion = parse_criterion(g["criterion"].get<std::string>());
  }
  if (j.contains("ablation")) {
    const json& a = j["ablation"];
    check_keys(a, {"axis", "rp_counts", "selectors", "architectures"}, "ablation.");
    if (a.contains("axis")) c.ablation.axis = parse_axis(a["axis"].get<std::string>());
    read(a, "rp_counts", c.ablation.rp_counts, "ablation.");
    if (a.contains("selectors")) {
      c.ablation.selectors.clear();
      for (const auto& s : a["selectors"]) c.ablation.selectors.push_back(parse_selector(s.get<std::string>()));
    }
    read(a, "architectures", c.ablation.architectures, "ablation.");
  }
  read(j, "plateau_window", c.plateau_window, "");
  std::string out = c.output_dir.string();
  read(j, "output_dir", out, "");
  c.output_dir = out;
  read(j, "save_artifacts", c.save_artifacts, "");
  return c;
}

void ExperimentConfig::validate() const {
  train.validate();
  if (dataset.kind != "8gaussians" && dataset.kind != "tabular") {
    throw HarnessError("dataset.kind must be '8gaussians' or 'tabular'");
  }
  if (dataset.kind == "tabular" && !std::filesystem::exists(dataset.path)) {
    throw HarnessError("dataset file does not exist: " + dataset.path.string());
  }
  if (!(dataset.train_fraction > 0.0 && dataset.train_fraction < 1.0)) {
    throw HarnessError("dataset.train_fraction must be in (0, 1)");
  }
  if (architecture.latent_dim == 0 || architecture.input_dim == 0) {
    throw HarnessError("architecture dimensions must be positive");
  }
  if ((protocol == Protocol::reproducibility || protocol == Protocol::sequential ||
       protocol == Protocol::ablation) &&
      n_repeats < 2) {
    throw HarnessError("n_repeats must be at least 2 for variability protocols");
  }
  if (k == 0) throw HarnessError("k must be positive");
  if (methods.empty()) throw HarnessError("methods list is empty");
  if (grid.enabled) {
    parse_bracket(grid.beta);
    parse_bracket(grid.rho);
    if (grid.epochs == 0) throw HarnessError("grid.epochs must be positive");
  }
  for (std::size_t r : ablation.rp_counts)
    if (r == 0) throw HarnessError("ablation.rp_counts entries must be positive");
  for (const auto& a : ablation.architectures) architecture_variant(architecture, a);
}

std::string ExperimentConfig::digest() const {
  return hex64(fnv1a(to_json(*this, false).dump()));
}

// ---------------------------------------------------------------- data

Architecture architecture_variant(const Architecture& base, const std::string& name) {
  Architecture out = base;
  if (name == "same") return out;
  if (name == "simple") {
    if (!out.hidden.empty()) out.hidden.erase(out.hidden.begin());
    return out;
  }
  if (name == "complex") {
    const std::size_t w = out.hidden.empty() ? 32 : out.hidden.front();
    out.hidden.insert(out.hidden.begin() + (out.hidden.empty() ? 0 : 1), w + w / 2);
    return out;
  }
  throw HarnessError("unknown architecture variant '" + name + "' (expected simple, same, complex)");
}

Dataset load_experiment_data(const DatasetSpec& spec) {
  if (spec.kind == "8gaussians") return gen_8gaussians(spec.gaussians);
  if (spec.kind == "tabular") return load_tabular(spec.path, spec.format);
  throw HarnessError("unknown dataset kind '" + spec.kind + "'");
}

std::pair<Dataset, Dataset> partition_dataset(const Dataset& data, std::uint64_t seed) {
  if (data.generation) return partition_halfplane(data);
  std::vector<std::size_t> first, second;
  if (data.labels) {
    std::set<int> distinct(data.labels->begin(), data.labels->end());
    if (distinct.size() < 2) throw HarnessError("labelled data needs at least two labels to partition");
    auto it = distinct.begin();
    std::advance(it, static_cast<long>((distinct.size() + 1) / 2));
    const int cut = *it;
    for (std::size_t i = 0; i < data.size(); ++i) ((*data.labels)[i] < cut ? first : second).push_back(i);
  } else {
    std::tie(first, second) = split_indices(data.size(), 0.5, seed);
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
  }
  Dataset d1 = data.subset(first);
  Dataset d2 = data.subset(second);
  d1.tag = PartitionTag::d1;
  d2.tag = PartitionTag::d2;
  return {std::move(d1), std::move(d2)};
}

// ---------------------------------------------------------------- workers

namespace {
thread_local bool in_worker = false;
}

std::size_t worker_count() {
  if (const char* env = std::getenv("ROSETTA_WORKERS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  std::vector<std::exception_ptr> errors(n);
  const std::size_t workers = in_worker ? 1 : std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        in_worker = true;
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- training

TrainResult train_method(const MethodSettings& settings, const Dataset& data,
                         const Dataset* validation, const RosettaSet* rosetta) {
  TrainConfig cfg = settings.train;
  const RosettaSet* anchors = nullptr;
  switch (settings.method) {
    case Method::vae:
      cfg.beta = 1.0;
      cfg.rho = 0.0;
      break;
    case Method::beta_vae:
      cfg.rho = 0.0;
      break;
    case Method::r_vae:
      anchors = rosetta;
      break;
  }
  return train(init_model(settings.architecture, cfg.seed), data, anchors, cfg, validation);
}

Dataset with_anchor_duplicates(const Dataset& data, const RosettaSet& rosetta) {
  if (rosetta.size() == 0) return data;
  if (rosetta.inputs.cols() != data.dim()) {
    throw HarnessError("anchor inputs do not match the data dimension");
  }
  Dataset out = data;
  out.inputs = vstack(data.inputs, rosetta.inputs);
  out.labels.reset();
  return out;
}

// ---------------------------------------------------------------- grid

GridResult select_from_grid(const std::vector<double>& betas, const std::vector<double>& rhos,
                            const GridScorer& scorer) {
  GridResult out;
  for (double b : betas) out.cells.push_back({GridAxis::beta, b, 0.0, false, {}});
  for (double r : rhos) out.cells.push_back({GridAxis::rho, r, 0.0, false, {}});
  parallel_for(out.cells.size(), [&](std::size_t i) {
    GridCell& cell = out.cells[i];
    try {
      cell.score = scorer(cell.axis, cell.value);
      if (!std::isfinite(cell.score)) {
        cell.failed = true;
        cell.error = "non-finite validation score";
      }
    } catch (const std::exception& e) {
      cell.failed = true;
      cell.error = e.what();
    }
  });
  auto pick = [&](GridAxis axis, const char* what) {
    const GridCell* best = nullptr;
    bool any = false;
    for (const GridCell& cell : out.cells) {
      if (cell.axis != axis) continue;
      any = true;
      if (cell.failed) continue;
      if (!best || cell.score < best->score || (cell.score == best->score && cell.value < best->value)) {
        best = &cell;
      }
    }
    if (any && !best) throw HarnessError(std::string("every ") + what + " grid cell failed");
    return best ? best->value : 0.0;
  };
  out.beta = pick(GridAxis::beta, "beta");
  out.rho = pick(GridAxis::rho, "rho");
  return out;
}

namespace {

enum SeedTag : std::uint64_t {
  kPartitionTag = 101,
  kSplitD1Tag,
  kSplitD2Tag,
  kTemplateTag,
  kPhaseOneTag,
  kSelectorTag,
  kGridTag,
  kGridEvalTag,
};

std::uint64_t tagged(const ExperimentConfig& c, SeedTag tag) { return derive_seed(c.train.seed, tag); }

}  // namespace

GridResult grid_search(const ExperimentConfig& config, const Dataset& train_data,
                       const Dataset& validation, const RosettaSet& rosetta) {
  const std::vector<double> betas = parse_bracket(config.grid.beta);
  const std::vector<double> rhos = parse_bracket(config.grid.rho);
  const std::uint64_t seed = tagged(config, kGridTag);
  const std::uint64_t eval_seed = tagged(config, kGridEvalTag);
  auto scorer = [&](GridAxis axis, double value) {
    MethodSettings s{axis == GridAxis::beta ? Method::beta_vae : Method::r_vae, config.architecture,
                     config.train};
    s.train.epochs = config.grid.epochs;
    s.train.seed = seed;
    s.train.beta = axis == GridAxis::beta ? value : 1.0;
    s.train.rho = axis == GridAxis::rho ? value : 0.0;
    const TrainResult trained = train_method(s, train_data, nullptr, &rosetta);
    TrainConfig eval = s.train;
    if (config.grid.criterion == GridCriterion::reference) {
      eval.beta = 1.0;
      eval.rho = axis == GridAxis::rho ? 1.0 : 0.0;
    }
    const RosettaSet* anchors = axis == GridAxis::rho ? &rosetta : nullptr;
    return evaluate_loss(trained.model, validation, anchors, eval, eval_seed).total;
  };
  return select_from_grid(betas, rhos, scorer);
}

// ---------------------------------------------------------------- plateau

std::size_t plateau_budget(const std::vector<double>& val_losses, std::size_t window) {
  const std::size_t n = val_losses.size();
  if (window == 0 || n < window) return n;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_t = window - 1;
  for (std::size_t t = window - 1; t < n; ++t) {
    const double m = median(std::vector<double>(val_losses.begin() + static_cast<long>(t + 1 - window),
                                                val_losses.begin() + static_cast<long>(t + 1)));
    if (m < best) {
      best = m;
      best_t = t;
    } else if (t - best_t >= window) {
      return best_t + 1;
    }
  }
  return n;
}

// ---------------------------------------------------------------- protocols

namespace {

struct Splits {
  Dataset d1, d2, d1_train, d1_val, d2_train, d2_val;
};

Splits prepare_splits(const ExperimentConfig& c) {
  Splits s;
  const Dataset data = load_experiment_data(c.dataset);
  if (data.dim() != c.architecture.input_dim) {
    throw HarnessError("data has " + std::to_string(data.dim()) + " columns but the architecture expects " +
                       std::to_string(c.architecture.input_dim));
  }
  std::tie(s.d1, s.d2) = partition_dataset(data, tagged(c, kPartitionTag));
  std::tie(s.d1_train, s.d1_val) = split_train_val(s.d1, c.dataset.train_fraction, tagged(c, kSplitD1Tag));
  std::tie(s.d2_train, s.d2_val) = split_train_val(s.d2, c.dataset.train_fraction, tagged(c, kSplitD2Tag));
  return s;
}

MethodSettings settings_for(const ExperimentConfig& c, Method m, const Architecture& arch,
                            double beta, double rho, std::size_t epochs) {
  MethodSettings s{m, arch, c.train};
  s.train.epochs = epochs;
  s.train.beta = m == Method::beta_vae ? beta : 1.0;
  s.train.rho = m == Method::r_vae ? rho : 0.0;
  return s;
}

TrainResult train_reference(const ExperimentConfig& c, const Dataset& data, const Dataset& val,
                            SeedTag tag) {
  MethodSettings s = settings_for(c, Method::vae, c.architecture, 1.0, 0.0, c.train.epochs);
  s.train.seed = tagged(c, tag);
  return train_method(s, data, &val, nullptr);
}

/// One sweep point: the knobs that ablations vary.
struct Variant {
  std::string label;  // "" for base protocols
  std::size_t k = 8;
  Selector selector = Selector::kmeans;
  Architecture architecture;
  std::vector<Method> methods;
};

struct Sample {
  std::string method;
  std::string metric;   // without variant suffix
  std::string variant;
  std::vector<double> values;
  std::size_t n_runs = 0;
  std::string digest;
  bool available = true;
  bool normalize = true;
};

struct MethodRuns {
  Method method;
  std::vector<Matrix> means;  // successful runs only, eval rows
  std::vector<std::size_t> run_index;
  std::string digest;
};

struct RunBatch {
  std::vector<MethodRuns> methods;
  std::vector<RunRecord> records;
};

std::string method_digest(const std::vector<RunRecord>& records, const std::string& method) {
  std::uint64_t h = fnv1a(method);
  for (const RunRecord& r : records)
    if (r.method == method && !r.failed) h = fnv1a(r.config_digest, h);
  return hex64(h);
}

/// Trains n_repeats runs of each method and embeds `eval` with each.
RunBatch run_methods(const ExperimentConfig& c, const Variant& v, const std::vector<Method>& methods,
                     const std::map<Method, MethodSettings>& settings,
                     const std::map<Method, Dataset>& train_sets,
                     const std::map<Method, RosettaSet>& anchors, const Dataset& validation,
                     const Matrix& eval, const std::string& protocol_tag) {
  struct Task {
    std::size_t method_slot;
    std::size_t run;
  };
  std::vector<Task> tasks;
  for (std::size_t m = 0; m < methods.size(); ++m)
    for (std::size_t i = 0; i < c.n_repeats; ++i) tasks.push_back({m, i});

  std::vector<RunRecord> records(tasks.size());
  std::vector<std::optional<Matrix>> outputs(tasks.size());
  const std::string cfg_digest = c.digest();

  parallel_for(tasks.size(), [&](std::size_t t) {
    const Method m = methods[tasks[t].method_slot];
    MethodSettings s = settings.at(m);
    s.train.seed = c.train.seed + tasks[t].run;
    RunRecord& rec = records[t];
    rec.method = method_label(m);
    rec.run = tasks[t].run;
    rec.seed = s.train.seed;
    json run_id = {{"experiment", cfg_digest}, {"protocol", protocol_tag}, {"variant", v.label},
                   {"method", method_name(m)},  {"seed", s.train.seed},    {"beta", s.train.beta},
                   {"rho", s.train.rho},         {"epochs", s.train.epochs},
                   {"architecture", s.architecture.describe()}};
    rec.config_digest = hex64(fnv1a(run_id.dump()));

    const auto start = std::chrono::steady_clock::now();
    try {
      TrainResult result = train_method(s, train_sets.at(m), &validation, &anchors.at(m));
      result.model.provenance.config_digest = rec.config_digest;
      outputs[t] = encode_means(result.model, eval);
      if (c.save_artifacts) {
        std::filesystem::path dir = c.output_dir / "runs" / protocol_tag;
        if (!v.label.empty()) dir /= v.label;
        dir /= std::string(method_name(m)) + "_" + std::to_string(tasks[t].run);
        std::filesystem::create_directories(dir);
        rec.checkpoint = dir / "model.ckpt";
        rec.embeddings = dir / "embeddings.csv";
        rec.trace = dir / "trace.csv";
        save_checkpoint(rec.checkpoint, result.model);
        Dataset eval_set;
        eval_set.inputs = eval;
        export_embeddings(result.model, eval_set, rec.embeddings);
        write_trace(rec.trace, result.trace);
      }
    } catch (const std::exception& e) {
      rec.failed = true;
      rec.error = e.what();
    }
    rec.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });

  RunBatch batch;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    MethodRuns runs{methods[m], {}, {}, {}};
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      if (tasks[t].method_slot == m && outputs[t]) {
        runs.means.push_back(*outputs[t]);
        runs.run_index.push_back(tasks[t].run);
      }
    }
    batch.methods.push_back(std::move(runs));
  }
  for (auto& r : records) {
    if (!v.label.empty()) r.method += " @" + v.label;
  }
  for (auto& runs : batch.methods) {
    runs.digest = method_digest(records, method_label(runs.method) +
                                             (v.label.empty() ? std::string() : " @" + v.label));
  }
  batch.records = std::move(records);
  return batch;
}

Sample rv_sample(const ExperimentConfig& c, const MethodRuns& runs, const Variant& v,
                 const std::string& metric, const std::vector<std::size_t>& rows,
                 std::vector<std::string>& warnings) {
  Sample s{method_label(runs.method), metric, v.label, {}, runs.means.size(), runs.digest};
  if (runs.means.size() < 2 || rows.empty()) {
    s.available = false;
    return s;
  }
  const RetrainingVariability rv = retraining_variability(runs.means, c.train.eigen_floor, rows);
  if (rv.degenerate) {
    warnings.push_back(s.method + " " + metric + ": " + std::to_string(runs.means.size()) +
                       " runs do not exceed the latent dimension; floor-dominated");
  }
  s.values = rv.per_row;
  return s;
}

std::string metric_label(const Sample& s) {
  return s.variant.empty() ? s.metric : s.metric + " @" + s.variant;
}

/// Subtracts the median of each sample's baseline (when it has one).
std::vector<ReportRow> assemble(const ExperimentConfig& c, const std::vector<Sample>& samples,
                                const std::function<const Sample*(const Sample&)>& baseline_of,
                                const std::string& norm_name) {
  const std::string dataset =
      c.dataset.kind == "tabular" ? c.dataset.path.filename().string() : c.dataset.kind;
  std::vector<ReportRow> rows;
  for (const Sample& s : samples) {
    ReportRow row;
    row.dataset = dataset;
    row.method = s.method;
    row.metric = metric_label(s);
    row.n_runs = s.n_runs;
    row.eigen_floor = c.train.eigen_floor;
    row.source_digest = s.digest;
    row.available = s.available && !s.values.empty();
    row.norm_choice = "none";
    if (row.available) {
      // Shifting does not change the IQR, and taking the median before the
      // shift keeps the baseline's own cell at exactly zero.
      row.median = median(s.values);
      row.iqr = interquartile_range(s.values);
      const Sample* base = s.normalize ? baseline_of(s) : nullptr;
      if (base && base->available && !base->values.empty()) {
        row.median -= median(base->values);
        row.norm_choice = norm_name;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

const Sample* find_sample(const std::vector<Sample>& samples, const std::string& method,
                          const std::string& metric, const std::string& variant) {
  for (const Sample& s : samples)
    if (s.method == method && s.metric == metric && s.variant == variant) return &s;
  return nullptr;
}

std::map<Method, RosettaSet> anchors_per_method(const std::vector<Method>& methods,
                                                const RosettaSet& r1, const ProtocolHooks& hooks) {
  std::map<Method, RosettaSet> out;
  for (Method m : methods) out[m] = hooks.rosetta_for_method ? hooks.rosetta_for_method(r1, m) : r1;
  return out;
}

struct Selected {
  double beta;
  double rho;
};

Selected choose_hyperparameters(const ExperimentConfig& c, const Variant& v, const Dataset& train_data,
                                const Dataset& validation, const RosettaSet& r1,
                                ProtocolResult& result, const std::string& tag) {
  const bool needs = std::any_of(v.methods.begin(), v.methods.end(),
                                 [](Method m) { return m != Method::vae; });
  if (!c.grid.enabled || !needs) return {c.train.beta, c.train.rho};
  ExperimentConfig gc = c;
  gc.architecture = v.architecture;
  GridResult g = grid_search(gc, train_data, validation, r1);
  result.grids.emplace_back(tag + (v.label.empty() ? "" : " @" + v.label), g);
  return {g.beta, g.rho};
}

void add_common_metadata(const ExperimentConfig& c, Report& report) {
  report.metadata["config"] = config_to_json(c, false);
  report.metadata["config_digest"] = c.digest();
  if (c.grid.enabled) {
    for (const auto& [name, text] : {std::pair{"beta", c.grid.beta}, std::pair{"rho", c.grid.rho}}) {
      const auto values = parse_bracket(text);
      report.metadata[std::string("grid.") + name] =
          text + " read inclusively as " + std::to_string(values.size()) + " values from " +
          format_double(values.front()) + " to " + format_double(values.back());
    }
    report.metadata["grid.criterion"] = criterion_name(c.grid.criterion);
  }
  report.metadata["normalization"] = "median of the baseline subtracted from every value";
  report.metadata["seeds"] = "run i uses train.seed + i";
}

// ---- reproducibility

struct ReproContext {
  Splits data;
  ModelState template_model;
  EmbeddingTable table;
};

ReproContext prepare_repro(const ExperimentConfig& c) {
  ReproContext ctx{prepare_splits(c), {}, {}};
  ctx.template_model = train_reference(c, ctx.data.d1_train, ctx.data.d1_val, kTemplateTag).model;
  ctx.table = embed(ctx.template_model, ctx.data.d1);
  return ctx;
}

std::vector<Sample> repro_variant(const ExperimentConfig& c, const ReproContext& ctx,
                                  const Variant& v, const ProtocolHooks& hooks,
                                  ProtocolResult& result) {
  const Selection sel = select_variant(ctx.table, ctx.data.d1, v.k, v.selector, tagged(c, kSelectorTag));
  const std::string suffix = v.label.empty() ? "" : " @" + v.label;
  for (const auto& w : sel.warnings) result.report.metadata["warning.repro.selection" + suffix] = w;
  const RosettaSet& r1 = sel.rosetta;

  const Dataset grid_train = with_anchor_duplicates(ctx.data.d1_train, r1);
  const Selected hp = choose_hyperparameters(c, v, grid_train, ctx.data.d1_val, r1, result, "repro");

  const auto anchors = anchors_per_method(v.methods, r1, hooks);
  std::map<Method, MethodSettings> settings;
  std::map<Method, Dataset> train_sets;
  for (Method m : v.methods) {
    settings[m] = settings_for(c, m, v.architecture, hp.beta, hp.rho, c.train.epochs);
    train_sets[m] = with_anchor_duplicates(ctx.data.d1_train, anchors.at(m));
  }
  RunBatch batch = run_methods(c, v, v.methods, settings, train_sets, anchors, ctx.data.d1_val,
                               ctx.data.d1.inputs, "repro");
  result.runs.insert(result.runs.end(), batch.records.begin(), batch.records.end());

  std::vector<std::size_t> r1_rows = r1.source_rows;
  std::sort(r1_rows.begin(), r1_rows.end());
  r1_rows.erase(std::unique(r1_rows.begin(), r1_rows.end()), r1_rows.end());
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < ctx.data.d1.size(); ++i)
    if (!std::binary_search(r1_rows.begin(), r1_rows.end(), i)) rest.push_back(i);

  std::vector<std::string> warnings;
  std::vector<Sample> samples;
  for (const MethodRuns& runs : batch.methods) {
    samples.push_back(rv_sample(c, runs, v, "RV(R1)", r1_rows, warnings));
    samples.push_back(rv_sample(c, runs, v, "RV(rest of D1)", rest, warnings));
  }
  for (std::size_t i = 0; i < warnings.size(); ++i) {
    result.report.metadata["warning.repro" + suffix + "." + std::to_string(i)] = warnings[i];
  }
  result.report.metadata["selected.repro" + suffix] =
      "beta=" + format_double(hp.beta) + " rho=" + format_double(hp.rho);
  return samples;
}

// ---- sequential

struct SequentialContext {
  Splits data;
  ModelState template_model;
  std::size_t budget = 0;
  ModelState phase_one;
  EmbeddingTable table;  // phase-one embeddings of D1
  Matrix joint_inputs;   // D1 rows then D2 rows
  Matrix template_means;
};

SequentialContext prepare_sequential(const ExperimentConfig& c) {
  SequentialContext ctx{prepare_splits(c), {}, 0, {}, {}, {}, {}};
  const Dataset joint_train = concat(ctx.data.d1_train, ctx.data.d2_train);
  const Dataset joint_val = concat(ctx.data.d1_val, ctx.data.d2_val);
  const TrainResult tmpl = train_reference(c, joint_train, joint_val, kTemplateTag);
  ctx.template_model = tmpl.model;
  std::vector<double> val;
  for (const EpochRecord& e : tmpl.trace) val.push_back(e.val_loss);
  ctx.budget = std::max<std::size_t>(1, plateau_budget(val, c.plateau_window));
  ctx.phase_one = train_reference(c, ctx.data.d1_train, ctx.data.d1_val, kPhaseOneTag).model;
  ctx.table = embed(ctx.phase_one, ctx.data.d1);
  ctx.joint_inputs = vstack(ctx.data.d1.inputs, ctx.data.d2.inputs);
  ctx.template_means = encode_means(ctx.template_model, ctx.joint_inputs);
  return ctx;
}

std::vector<Sample> sequential_variant(const ExperimentConfig& c, const SequentialContext& ctx,
                                       const Variant& v, const ProtocolHooks& hooks,
                                       ProtocolResult& result) {
  const Selection sel = select_variant(ctx.table, ctx.data.d1, v.k, v.selector, tagged(c, kSelectorTag));
  const std::string suffix = v.label.empty() ? "" : " @" + v.label;
  for (const auto& w : sel.warnings) result.report.metadata["warning.sequential.selection" + suffix] = w;
  const RosettaSet& r1 = sel.rosetta;

  const Dataset grid_train = with_anchor_duplicates(ctx.data.d2_train, r1);
  const Selected hp = choose_hyperparameters(c, v, grid_train, ctx.data.d2_val, r1, result, "sequential");

  const auto anchors = anchors_per_method(v.methods, r1, hooks);
  std::map<Method, MethodSettings> settings;
  std::map<Method, Dataset> train_sets;
  for (Method m : v.methods) {
    settings[m] = settings_for(c, m, v.architecture, hp.beta, hp.rho, ctx.budget);
    train_sets[m] = with_anchor_duplicates(ctx.data.d2_train, anchors.at(m));
  }
  RunBatch batch = run_methods(c, v, v.methods, settings, train_sets, anchors, ctx.data.d2_val,
                               ctx.joint_inputs, "sequential");
  result.runs.insert(result.runs.end(), batch.records.begin(), batch.records.end());

  const std::size_t n1 = ctx.data.d1.size();
  const std::size_t n = ctx.joint_inputs.rows();
  std::vector<std::size_t> d1_rows(n1), d2_rows(n - n1);
  std::iota(d1_rows.begin(), d1_rows.end(), 0);
  std::iota(d2_rows.begin(), d2_rows.end(), n1);
  const Matrix target_d1 = select_rows(ctx.template_means, d1_rows);
  const Matrix target_d2 = select_rows(ctx.template_means, d2_rows);

  std::vector<std::string> warnings;
  std::vector<Sample> samples;
  for (const MethodRuns& runs : batch.methods) {
    const std::string label = std::string(method_label(runs.method)) + suffix;
    Sample l1{method_label(runs.method), "LSD(D1)", v.label, {}, runs.means.size(), runs.digest};
    Sample l2{method_label(runs.method), "LSD(D2)", v.label, {}, runs.means.size(), runs.digest};
    Sample flat{method_label(runs.method), "spectrum min/max", v.label, {}, runs.means.size(),
                runs.digest};
    flat.normalize = false;
    for (std::size_t r = 0; r < runs.means.size(); ++r) {
      const Matrix& means = runs.means[r];
      const AffineMap map = fit_affine(means, ctx.template_means);
      l1.values.push_back(lsd(map, select_rows(means, d1_rows), target_d1));
      l2.values.push_back(lsd(map, select_rows(means, d2_rows), target_d2));
      const std::size_t run = runs.run_index[r];
      auto& series = result.report.series;
      try {
        const MapAnalysis a = analyze_map(map);
        for (std::size_t j = 0; j < a.spectrum.size(); ++j) {
          series.push_back({label, run, "spectrum", j, a.spectrum[j]});
        }
        series.push_back({label, run, "identity_distance", 0, a.identity_distance});
        series.push_back({label, run, "bias_norm", 0, a.bias_norm});
        flat.values.push_back(a.spectrum.back() / a.spectrum.front());
      } catch (const MetricError& e) {
        warnings.push_back(label + " run " + std::to_string(run) + ": " + e.what());
      }
      series.push_back({label, run, "lsd_D1", 0, l1.values.back()});
      series.push_back({label, run, "lsd_D2", 0, l2.values.back()});
    }
    for (Sample* s : {&l1, &l2, &flat}) s->available = runs.means.size() >= 2;
    samples.push_back(std::move(l1));
    samples.push_back(std::move(l2));
    samples.push_back(std::move(flat));
    samples.push_back(rv_sample(c, runs, v, "RV(D1)", d1_rows, warnings));
    samples.push_back(rv_sample(c, runs, v, "RV(D2)", d2_rows, warnings));
  }
  for (std::size_t i = 0; i < warnings.size(); ++i) {
    result.report.metadata["warning.sequential" + suffix + "." + std::to_string(i)] = warnings[i];
  }
  result.report.metadata["selected.sequential" + suffix] =
      "beta=" + format_double(hp.beta) + " rho=" + format_double(hp.rho);
  return samples;
}

Variant base_variant(const ExperimentConfig& c) {
  return {"", c.k, c.selector, c.architecture, c.methods};
}

auto vae_baseline(const std::vector<Sample>& samples) {
  return [&samples](const Sample& s) {
    return find_sample(samples, method_label(Method::vae), s.metric, s.variant);
  };
}

}  // namespace

GridResult grid_search(const ExperimentConfig& config) {
  config.validate();
  const ReproContext ctx = prepare_repro(config);
  const Selection sel =
      select_variant(ctx.table, ctx.data.d1, config.k, config.selector, tagged(config, kSelectorTag));
  return grid_search(config, with_anchor_duplicates(ctx.data.d1_train, sel.rosetta), ctx.data.d1_val,
                     sel.rosetta);
}

ProtocolResult run_reproducibility(const ExperimentConfig& config, const ProtocolHooks& hooks) {
  config.validate();
  ProtocolResult result;
  result.report.title = "Retraining variability, reproducibility protocol";
  add_common_metadata(config, result.report);
  const ReproContext ctx = prepare_repro(config);
  result.report.metadata["template_digest"] = ctx.template_model.digest();
  const std::vector<Sample> samples = repro_variant(config, ctx, base_variant(config), hooks, result);
  result.report.rows = assemble(config, samples, vae_baseline(samples), "vae-median");
  return result;
}

ProtocolResult run_sequential(const ExperimentConfig& config, const ProtocolHooks& hooks) {
  config.validate();
  ProtocolResult result;
  result.report.title = "Latent space distortion, sequential protocol";
  add_common_metadata(config, result.report);
  const SequentialContext ctx = prepare_sequential(config);
  result.report.metadata["template_digest"] = ctx.template_model.digest();
  result.report.metadata["epoch_budget"] = std::to_string(ctx.budget);
  const std::vector<Sample> samples =
      sequential_variant(config, ctx, base_variant(config), hooks, result);
  result.report.rows = assemble(config, samples, vae_baseline(samples), "vae-median");
  return result;
}

ProtocolResult run_ablation(const ExperimentConfig& config) {
  config.validate();
  ProtocolResult result;
  add_common_metadata(config, result.report);
  result.report.metadata["ablation.axis"] = axis_name(config.ablation.axis);
  const ProtocolHooks hooks;
  std::vector<Sample> samples;

  switch (config.ablation.axis) {
    case AblationAxis::rp_count: {
      result.report.title = "Rosetta point count sweep";
      const ReproContext repro = prepare_repro(config);
      const SequentialContext seq = prepare_sequential(config);
      result.report.metadata["epoch_budget"] = std::to_string(seq.budget);
      for (std::size_t k : config.ablation.rp_counts) {
        Variant v = base_variant(config);
        v.k = k;
        v.label = std::to_string(k) + " RPs";
        for (auto& s : repro_variant(config, repro, v, hooks, result)) samples.push_back(std::move(s));
        for (auto& s : sequential_variant(config, seq, v, hooks, result)) samples.push_back(std::move(s));
      }
      result.report.rows = assemble(config, samples, vae_baseline(samples), "vae-median");
      break;
    }
    case AblationAxis::selector: {
      result.report.title = "Rosetta point selector sweep";
      const SequentialContext seq = prepare_sequential(config);
      result.report.metadata["epoch_budget"] = std::to_string(seq.budget);
      for (Selector sel : config.ablation.selectors) {
        Variant v = base_variant(config);
        v.selector = sel;
        v.methods = {Method::r_vae};
        v.label = selector_name(sel);
        for (auto& s : sequential_variant(config, seq, v, hooks, result)) samples.push_back(std::move(s));
      }
      const std::string ref = selector_name(Selector::kmeans);
      result.report.rows = assemble(
          config, samples,
          [&](const Sample& s) { return find_sample(samples, s.method, s.metric, ref); },
          "kmeans-rvae-median");
      break;
    }
    case AblationAxis::architecture: {
      result.report.title = "Architecture sweep";
      const SequentialContext seq = prepare_sequential(config);
      result.report.metadata["epoch_budget"] = std::to_string(seq.budget);
      for (const std::string& name : config.ablation.architectures) {
        Variant v = base_variant(config);
        v.architecture = architecture_variant(config.architecture, name);
        v.methods = {Method::r_vae};
        v.label = name;
        result.report.metadata["architecture." + name] = v.architecture.describe();
        for (auto& s : sequential_variant(config, seq, v, hooks, result)) samples.push_back(std::move(s));
      }
      result.report.rows = assemble(
          config, samples,
          [&](const Sample& s) { return find_sample(samples, s.method, s.metric, "same"); },
          "same-architecture-rvae-median");
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------- outputs

void write_protocol_outputs(const std::filesystem::path& dir, const ProtocolResult& result) {
  write_report(dir, result.report);
  {
    std::ofstream out(dir / "runs.csv");
    out << "method,run,seed,config_digest,checkpoint,embeddings,trace,wall_clock_s,status\n";
    for (const RunRecord& r : result.runs) {
      std::string status = r.failed ? "failed: " + r.error : "ok";
      std::replace(status.begin(), status.end(), ',', ';');
      std::replace(status.begin(), status.end(), '\n', ' ');
      out << r.method << ',' << r.run << ',' << r.seed << ',' << r.config_digest << ','
          << r.checkpoint.string() << ',' << r.embeddings.string() << ',' << r.trace.string() << ','
          << r.wall_clock_seconds << ',' << status << '\n';
    }
  }
  if (!result.grids.empty()) {
    std::ofstream out(dir / "grid.csv");
    out << "search,axis,value,score,status\n";
    for (const auto& [label, grid] : result.grids) {
      for (const GridCell& cell : grid.cells) {
        std::string status = cell.failed ? "failed: " + cell.error : "ok";
        std::replace(status.begin(), status.end(), ',', ';');
        out << label << ',' << (cell.axis == GridAxis::beta ? "beta" : "rho") << ','
            << format_double(cell.value) << ',' << (cell.failed ? "" : format_double(cell.score))
            << ',' << status << '\n';
      }
    }
  }
}

void export_embeddings(const ModelState& model, const Dataset& data, const std::filesystem::path& out) {
  const Architecture& arch = model.architecture;
  if (data.dim() != arch.input_dim) {
    throw HarnessError("dataset has " + std::to_string(data.dim()) + " columns but the model expects " +
                       std::to_string(arch.input_dim));
  }
  const std::size_t d = arch.latent_dim;
  const std::size_t cols = d + d * (d + 1) / 2;
  Dataset table;
  table.inputs = Matrix(data.size(), cols);
  const std::vector<GaussianPosterior> posts = encode_batch(model, data.inputs);
  for (std::size_t r = 0; r < posts.size(); ++r) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < d; ++i) table.inputs(r, c++) = posts[r].mean[i];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) table.inputs(r, c++) = posts[r].chol(i, j);
  }
  save_tabular(out, table, TabularFormat::delimited);
}

void write_trace(const std::filesystem::path& path, const std::vector<EpochRecord>& trace) {
  std::ofstream out(path);
  if (!out) throw HarnessError("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_reconstruction,val_kl,val_penalty\n";
  for (const EpochRecord& e : trace) {
    out << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_loss) << ','
        << format_double(e.val_terms.reconstruction) << ',' << format_double(e.val_terms.kl) << ','
        << format_double(e.val_terms.penalty) << '\n';
  }
}

}  // namespace rosetta
