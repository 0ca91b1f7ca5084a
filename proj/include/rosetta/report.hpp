#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rosetta {

/// One summarized cell: median and interquartile range of a metric over the
/// sample it was computed from (runs for LSD, data rows for RV).
struct ReportRow {
  std::string dataset;
  std::string method;
  std::string metric;
  double median = 0.0;
  double iqr = 0.0;
  std::size_t n_runs = 0;
  double eigen_floor = 0.0;
  std::string norm_choice;
  /// Digest over the config digests of the runs behind this cell.
  std::string source_digest;
  bool available = true;
};

/// Plot-ready series, e.g. polar spectra per run.
struct SeriesPoint {
  std::string method;
  std::size_t run = 0;
  std::string kind;
  std::size_t index = 0;
  double value = 0.0;
};

struct Report {
  std::string title;
  std::vector<ReportRow> rows;
  std::vector<SeriesPoint> series;
  std::map<std::string, std::string> metadata;

  /// First row matching (method, metric); throws if absent.
  const ReportRow& find(const std::string& method, const std::string& metric) const;
  void append(const Report& other);
};

/// Writes report.csv, series.csv, metadata.json and table.txt under `dir`.
void write_report(const std::filesystem::path& dir, const Report& report);
/// Reads report.csv back.
std::vector<ReportRow> read_report_rows(const std::filesystem::path& csv);

/// Text table with metrics as rows and methods as columns, "median(iqr)" cells.
std::string render_table(const std::vector<ReportRow>& rows);

}  // namespace rosetta
