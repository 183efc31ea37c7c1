#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dlgresp/run.hpp"

namespace dlgresp {

/// One plot-data table. Every row has one cell per key and value column.
struct ReportTable {
  std::string name;  // file stem, e.g. "fig2_rejection"
  std::string title;
  std::vector<std::string> key_columns;
  std::vector<std::string> value_columns;
  std::vector<std::vector<std::string>> keys;
  std::vector<std::vector<std::string>> values;
  std::vector<std::string> notes;  // emitted as comment lines after the header

  void add(std::vector<std::string> key, std::vector<std::string> value);
};

/// Fixed six-decimal rendering used by every report.
std::string format_number(double v);

/// All tables one run supports, computed from its score cache (and from
/// results/probe.json for the probe table).
std::vector<ReportTable> build_report_tables(const LoadedRun& run, const ScoreIndex& scores);

/// Tab-separated rendering; comment lines start with '#'.
std::string render_tsv(const ReportTable& table, const std::string& stamp);

/// Markdown summary of a set of tables.
std::string render_markdown(const std::vector<ReportTable>& tables, const std::string& heading);

/// Bar chart of the first value column, with CI whiskers when the table
/// carries ci_low/ci_high. Series are rows grouped by their last key when
/// `series_from_columns` is false, or the value columns otherwise. A non-empty
/// `stamp` is embedded as a comment.
std::string render_svg(const ReportTable& table, bool series_from_columns = false,
                       const std::string& stamp = "");

/// Writes reports/<table>.tsv and reports/summary.md (plus .svg files when
/// asked). Returns the written paths.
std::vector<std::filesystem::path> write_run_report(const LoadedRun& run, bool svg = false);

/// Side-by-side report over several runs: a long table per figure with a
/// model column, and a wide table with one column per model.
std::vector<std::filesystem::path> write_combined_report(const std::vector<LoadedRun>& runs,
                                                         const std::filesystem::path& out,
                                                         bool svg = false);

/// Column labels of the wide tables: model ids, suffixed with the run id
/// when two runs share a model.
std::vector<std::string> model_columns(const std::vector<LoadedRun>& runs);

}  // namespace dlgresp
