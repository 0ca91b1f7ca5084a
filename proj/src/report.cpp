#include "rosetta/report.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "rosetta/datasets.hpp"
#include "rosetta/metrics.hpp"

namespace rosetta {

const ReportRow& Report::find(const std::string& method, const std::string& metric) const {
  for (const ReportRow& row : rows)
    if (row.method == method && row.metric == metric) return row;
  throw std::out_of_range("report has no cell for " + method + " / " + metric);
}

void Report::append(const Report& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
  series.insert(series.end(), other.series.begin(), other.series.end());
  for (const auto& [k, v] : other.metadata) metadata.emplace(k, v);
}

namespace {

constexpr const char* kHeader =
    "dataset,method,metric,median,iqr,n_runs,eigen_floor,norm_choice,source_digest";

std::string cell_value(const ReportRow& row, double v) {
  return row.available ? format_double(v) : "unavailable";
}

}  // namespace

void write_report(const std::filesystem::path& dir, const Report& report) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.csv");
    out << kHeader << '\n';
    for (const ReportRow& row : report.rows) {
      out << row.dataset << ',' << row.method << ',' << row.metric << ','
          << cell_value(row, row.median) << ',' << cell_value(row, row.iqr) << ',' << row.n_runs
          << ',' << format_double(row.eigen_floor) << ',' << row.norm_choice << ','
          << row.source_digest << '\n';
    }
  }
  {
    std::ofstream out(dir / "series.csv");
    out << "method,run,kind,index,value\n";
    for (const SeriesPoint& p : report.series) {
      out << p.method << ',' << p.run << ',' << p.kind << ',' << p.index << ','
          << format_double(p.value) << '\n';
    }
  }
  {
    nlohmann::json meta(report.metadata);
    meta["title"] = report.title;
    std::ofstream out(dir / "metadata.json");
    out << meta.dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "table.txt");
    out << report.title << "\n\n" << render_table(report.rows);
  }
}

std::vector<ReportRow> read_report_rows(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw std::runtime_error(csv.string() + " is not a report file");
  }
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream fields(line);
    std::string cell;
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (cells.size() == 8) cells.emplace_back();
    if (cells.size() != 9) throw std::runtime_error("malformed report row: " + line);
    ReportRow row;
    row.dataset = cells[0];
    row.method = cells[1];
    row.metric = cells[2];
    row.available = cells[3] != "unavailable";
    row.median = row.available ? std::stod(cells[3]) : 0.0;
    row.iqr = row.available ? std::stod(cells[4]) : 0.0;
    row.n_runs = std::stoull(cells[5]);
    row.eigen_floor = std::stod(cells[6]);
    row.norm_choice = cells[7];
    row.source_digest = cells[8];
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string render_table(const std::vector<ReportRow>& rows) {
  std::vector<std::string> metrics;
  std::vector<std::string> methods;
  for (const ReportRow& row : rows) {
    if (std::find(metrics.begin(), metrics.end(), row.metric) == metrics.end()) metrics.push_back(row.metric);
    if (std::find(methods.begin(), methods.end(), row.method) == methods.end()) methods.push_back(row.method);
  }
  auto cell = [&](const std::string& metric, const std::string& method) -> std::string {
    for (const ReportRow& row : rows) {
      if (row.metric == metric && row.method == method) {
        return row.available ? format_median_iqr(row.median, row.iqr) : "---";
      }
    }
    return "";
  };
  std::size_t first = 6;
  for (const auto& m : metrics) first = std::max(first, m.size());
  std::vector<std::size_t> widths;
  for (const auto& method : methods) {
    std::size_t w = method.size();
    for (const auto& metric : metrics) w = std::max(w, cell(metric, method).size());
    widths.push_back(w);
  }
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(first)) << "metric";
  for (std::size_t i = 0; i < methods.size(); ++i) {
    out << "  " << std::setw(static_cast<int>(widths[i])) << methods[i];
  }
  out << '\n';
  for (const auto& metric : metrics) {
    out << std::setw(static_cast<int>(first)) << metric;
    for (std::size_t i = 0; i < methods.size(); ++i) {
      out << "  " << std::setw(static_cast<int>(widths[i])) << cell(metric, methods[i]);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace rosetta
