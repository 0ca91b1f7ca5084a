#include "rosetta/datasets.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "rosetta/rng.hpp"

namespace rosetta {

const char* partition_name(PartitionTag tag) {
  switch (tag) {
    case PartitionTag::joint: return "joint";
    case PartitionTag::d1: return "D1";
    case PartitionTag::d2: return "D2";
  }
  return "joint";
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  out.inputs = select_rows(inputs, rows);
  if (labels) {
    std::vector<int> picked;
    picked.reserve(rows.size());
    for (std::size_t r : rows) picked.push_back((*labels)[r]);
    out.labels = std::move(picked);
  }
  out.tag = tag;
  out.generation = generation;
  return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.size() > 0 && b.size() > 0 && a.dim() != b.dim()) {
    throw DatasetError("cannot concatenate datasets of width " + std::to_string(a.dim()) +
                       " and " + std::to_string(b.dim()));
  }
  Dataset out;
  out.inputs = vstack(a.inputs, b.inputs);
  if (a.labels && b.labels) {
    std::vector<int> merged = *a.labels;
    merged.insert(merged.end(), b.labels->begin(), b.labels->end());
    out.labels = std::move(merged);
  }
  out.tag = a.tag == b.tag ? a.tag : PartitionTag::joint;
  out.generation = a.generation ? a.generation : b.generation;
  return out;
}

Dataset gen_8gaussians(const EightGaussiansOptions& options) {
  if (options.n_per_component < 1) throw DatasetError("n_per_component must be at least 1");
  if (options.sigma_cluster < 0.0 || options.sigma_noise < 0.0) {
    throw DatasetError("standard deviations must be nonnegative");
  }
  GaussianMixtureMeta meta{options.seed, options.sigma_cluster, options.sigma_noise,
                           options.radius, Matrix(kEightGaussiansComponents, 2)};
  for (std::size_t j = 0; j < kEightGaussiansComponents; ++j) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(j) / 8.0;
    meta.centers(j, 0) = options.radius * std::cos(angle);
    meta.centers(j, 1) = options.radius * std::sin(angle);
  }

  const std::size_t n = options.n_per_component * kEightGaussiansComponents;
  Dataset out;
  out.inputs = Matrix(n, kEightGaussiansDim);
  std::vector<int> labels(n);
  Rng rng(options.seed);
  std::size_t row = 0;
  for (std::size_t j = 0; j < kEightGaussiansComponents; ++j) {
    for (std::size_t i = 0; i < options.n_per_component; ++i, ++row) {
      auto x = out.inputs.row(row);
      x[0] = meta.centers(j, 0) + options.sigma_cluster * rng.normal();
      x[1] = meta.centers(j, 1) + options.sigma_cluster * rng.normal();
      for (std::size_t k = 2; k < kEightGaussiansDim; ++k) x[k] = options.sigma_noise * rng.normal();
      labels[row] = static_cast<int>(j);
    }
  }
  out.labels = std::move(labels);
  out.generation = std::move(meta);
  return out;
}

namespace {

// Component j sits at angle 2*pi*j/8. D1 holds the half-open half-plane
// x > 0 plus the positive y axis, which is j in {0, 1, 2, 7}.
bool component_in_d1(std::size_t j) {
  // Angle in eighths of a turn, normalized to (-4, 4].
  const int eighths = static_cast<int>(j) > 4 ? static_cast<int>(j) - 8 : static_cast<int>(j);
  return eighths > -2 && eighths <= 2;
}

}  // namespace

std::pair<Dataset, Dataset> partition_halfplane(const Dataset& data) {
  if (!data.labels || !data.generation ||
      data.generation->centers.rows() != kEightGaussiansComponents ||
      data.dim() != kEightGaussiansDim) {
    throw DatasetError("partition_halfplane requires a generated 8-Gaussians dataset");
  }
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
  for (std::size_t r = 0; r < data.size(); ++r) {
    const int label = (*data.labels)[r];
    if (label < 0 || label >= static_cast<int>(kEightGaussiansComponents)) {
      throw DatasetError("label out of range at row " + std::to_string(r));
    }
    (component_in_d1(static_cast<std::size_t>(label)) ? first : second).push_back(r);
  }
  Dataset d1 = data.subset(first);
  Dataset d2 = data.subset(second);
  d1.tag = PartitionTag::d1;
  d2.tag = PartitionTag::d2;
  return {std::move(d1), std::move(d2)};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw DatasetError("split fraction must be in (0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> val(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return {std::move(train), std::move(val)};
}

std::pair<Dataset, Dataset> split_train_val(const Dataset& data, double fraction,
                                            std::uint64_t seed) {
  auto [train, val] = split_indices(data.size(), fraction, seed);
  return {data.subset(train), data.subset(val)};
}

TabularFormat parse_tabular_format(const std::string& name) {
  if (name == "delimited" || name == "csv") return TabularFormat::delimited;
  if (name == "raw") return TabularFormat::raw;
  throw DatasetError("unknown tabular format '" + name + "'");
}

std::string format_double(double x) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
  return std::string(buf, end);
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    const auto first = field.find_first_not_of(" \t\r");
    const auto last = field.find_last_not_of(" \t\r");
    out.push_back(first == std::string::npos ? "" : field.substr(first, last - first + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_cell(const std::string& cell, std::size_t line_no) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || cell.empty()) {
    throw DatasetError("non-numeric cell '" + cell + "' at row " + std::to_string(line_no));
  }
  return value;
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw DatasetError("truncated raw matrix file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

Dataset load_delimited(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> roles;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    roles = split_fields(line);
    break;
  }
  if (roles.empty()) throw DatasetError("empty dataset file " + path.string());
  std::vector<std::size_t> feature_cols;
  std::optional<std::size_t> label_col;
  for (std::size_t c = 0; c < roles.size(); ++c) {
    if (roles[c] == "feature") {
      feature_cols.push_back(c);
    } else if (roles[c] == "label") {
      if (label_col) throw DatasetError("more than one label column");
      label_col = c;
    } else {
      throw DatasetError("unknown column role '" + roles[c] + "' in header");
    }
  }
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_fields(line);
    if (fields.size() != roles.size()) {
      throw DatasetError("row " + std::to_string(line_no) + " has " +
                         std::to_string(fields.size()) + " cells, expected " +
                         std::to_string(roles.size()));
    }
    for (std::size_t c : feature_cols) values.push_back(parse_cell(fields[c], line_no));
    if (label_col) {
      const double v = parse_cell(fields[*label_col], line_no);
      if (v != std::floor(v) || v < 0) {
        throw DatasetError("label at row " + std::to_string(line_no) + " is not a nonnegative integer");
      }
      labels.push_back(static_cast<int>(v));
    }
    ++rows;
  }
  if (rows == 0) throw DatasetError("dataset file " + path.string() + " has no rows");
  Dataset out;
  out.inputs = Matrix(rows, feature_cols.size(), std::move(values));
  if (label_col) out.labels = std::move(labels);
  return out;
}

Dataset load_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  if (in.peek() == std::ifstream::traits_type::eof()) {
    throw DatasetError("empty dataset file " + path.string());
  }
  const std::uint64_t rows = read_u64_le(in);
  const std::uint64_t cols = read_u64_le(in);
  if (rows == 0) throw DatasetError("raw matrix file has no rows");
  std::vector<double> values(rows * cols);
  for (double& v : values) v = std::bit_cast<double>(read_u64_le(in));
  Dataset out;
  out.inputs = Matrix(rows, cols, std::move(values));
  return out;
}

}  // namespace

Dataset load_tabular(const std::filesystem::path& path, TabularFormat format) {
  Dataset out = format == TabularFormat::delimited ? load_delimited(path) : load_raw(path);
  if (!out.inputs.all_finite()) throw DatasetError("dataset contains non-finite values");
  return out;
}

void save_tabular(const std::filesystem::path& path, const Dataset& data, TabularFormat format) {
  if (format == TabularFormat::raw) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DatasetError("cannot write " + path.string());
    write_u64_le(out, data.size());
    write_u64_le(out, data.dim());
    for (double v : data.inputs.data()) write_u64_le(out, std::bit_cast<std::uint64_t>(v));
    return;
  }
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path.string());
  for (std::size_t c = 0; c < data.dim(); ++c) out << (c ? "," : "") << "feature";
  if (data.labels) out << ",label";
  out << '\n';
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (std::size_t c = 0; c < data.dim(); ++c) {
      out << (c ? "," : "") << format_double(data.inputs(r, c));
    }
    if (data.labels) out << ',' << (*data.labels)[r];
    out << '\n';
  }
}

}  // namespace rosetta
