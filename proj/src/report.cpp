#include "dlgresp/report.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace dlgresp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kProportionColumns = {"estimate", "ci_low", "ci_high",
                                                     "successes", "n", "ties"};

std::vector<std::string> proportion_cells(const GroupTally& t, double level) {
  const auto p = stats::wilson_ci(t.successes, t.n, level);
  return {format_number(p.estimate), format_number(p.ci_low), format_number(p.ci_high),
          format_number(t.successes), std::to_string(t.n), std::to_string(t.ties)};
}

ReportTable proportion_table(std::string name, std::string title, std::string key,
                             const ExperimentResult& result, double level, bool with_reference) {
  ReportTable t;
  t.name = std::move(name);
  t.title = std::move(title);
  t.key_columns = {std::move(key)};
  t.value_columns = kProportionColumns;
  if (with_reference) t.value_columns.push_back("reference");
  for (const auto& [group, tally] : result.groups) {
    auto cells = proportion_cells(tally, level);
    if (with_reference) {
      auto it = result.references.find(group);
      cells.push_back(it == result.references.end() ? "NA" : format_number(it->second.value));
    }
    t.add({group}, std::move(cells));
  }
  for (const auto& [group, ref] : result.references) {
    t.notes.push_back(fmt::format("reference {}: {} {}{}", group, ref.label,
                                  format_number(ref.value), ref.approximate ? " (approximate)" : ""));
  }
  return t;
}

ReportTable errors_table(std::string name, const ErrorDistribution& d,
                         const std::vector<Auxiliary>& candidates) {
  ReportTable t;
  t.name = std::move(name);
  t.title = fmt::format("intruding auxiliaries among top-{} errors", d.k);
  t.key_columns = {"header", "auxiliary"};
  t.value_columns = {"intruder_share", "intruder_count"};
  for (Header h : kHeaders) {
    const std::string header(to_string(h));
    const auto counts = d.counts.count(header) ? d.counts.at(header) : std::map<Auxiliary, int>{};
    const auto props =
        d.proportions.count(header) ? d.proportions.at(header) : std::map<Auxiliary, double>{};
    for (const auto& aux : candidates) {
      const int c = counts.count(aux) ? counts.at(aux) : 0;
      const double p = props.count(aux) ? props.at(aux) : 0.0;
      t.add({header, aux.surface()}, {format_number(p), std::to_string(c)});
    }
    const int errs = d.erroneous_items.count(header) ? d.erroneous_items.at(header) : 0;
    const int emb = d.embedded_wins.count(header) ? d.embedded_wins.at(header) : 0;
    t.notes.push_back(fmt::format("{}: erroneous_items={}{}", header, errs,
                                  d.k == 1 ? fmt::format(" embedded_wins={}", emb) : ""));
  }
  return t;
}

std::optional<ReportTable> probe_table(const LoadedRun& run) {
  const auto path = run.layout.results() / "probe.json";
  if (!fs::exists(path)) return std::nullopt;
  std::ifstream in(path, std::ios::binary);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
  if (j.value("run_id", std::string{}) != run.manifest.run_id ||
      j.value("model_id", std::string{}) != run.manifest.model_id) {
    throw DataError(fmt::format("{} belongs to another run or model", path.string()));
  }
  const auto& r = j.at("result");
  ReportTable t;
  t.name = "tab1_probe";
  t.title = "probe test accuracy on token embeddings";
  t.key_columns = {"run"};
  t.value_columns = {"accuracy", "majority_share", "train_tokens", "test_tokens"};
  int i = 0;
  for (const auto& run_j : r.at("runs")) {
    t.add({std::to_string(++i)},
          {format_number(run_j.at("accuracy").get<double>()),
           format_number(run_j.at("majority_share").get<double>()),
           std::to_string(run_j.at("train_tokens").get<std::size_t>()),
           std::to_string(run_j.at("test_tokens").get<std::size_t>())});
  }
  t.add({"mean"}, {format_number(r.at("mean_accuracy").get<double>()), "NA", "NA", "NA"});
  t.notes.push_back(fmt::format("probe config: {}", r.at("config").dump()));
  return t;
}

std::string stamp_for(const LoadedRun& run) {
  return fmt::format("schema_version={} run_id={} model_id={}", kSchemaVersion,
                     run.manifest.run_id, run.manifest.model_id);
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace

void ReportTable::add(std::vector<std::string> key, std::vector<std::string> value) {
  if (key.size() != key_columns.size() || value.size() != value_columns.size()) {
    throw std::logic_error(fmt::format("table {}: row shape mismatch", name));
  }
  keys.push_back(std::move(key));
  values.push_back(std::move(value));
}

std::string format_number(double v) {
  if (v == 0.0) v = 0.0;  // no "-0.000000"
  return fmt::format("{:.6f}", v);
}

std::vector<ReportTable> build_report_tables(const LoadedRun& run, const ScoreIndex& scores) {
  std::vector<ReportTable> tables;
  const ExperimentOptions options{run.config.tie_epsilon, run.candidates()};
  const double level = run.config.ci_level;

  if (const auto* arc = run.suite(Mode::arc)) {
    if (arc->count(ItemKind::sequence) > 0) {
      tables.push_back(proportion_table("fig1_header",
                                        "share of items where the \"No\" header scores higher",
                                        "target", run_header_test(*arc, scores, options), level,
                                        true));
    }
    const auto rejection = run_rejection_test(*arc, scores, options);
    auto fig2 = proportion_table("fig2_rejection",
                                 "preference for the response targeting at-issue content",
                                 "header", rejection, level, true);
    if (rejection.header_contrast) {
      const auto& c = *rejection.header_contrast;
      fig2.notes.push_back(fmt::format("welch reject>wait: t={} df={} p_one_sided={}",
                                       format_number(c.t), format_number(c.df),
                                       format_number(c.p_one_sided)));
    } else {
      fig2.notes.push_back("welch reject>wait: not computed (" + rejection.header_contrast_note +
                           ")");
    }
    tables.push_back(std::move(fig2));
  }
  if (const auto* conj = run.suite(Mode::conjunction)) {
    tables.push_back(proportion_table("fig3_conjunction",
                                      "preference for the response targeting the recent conjunct",
                                      "header", run_conjunction_test(*conj, scores, options),
                                      level, true));
  }
  if (const auto* arc = run.suite(Mode::arc)) {
    const auto top1 = run_ellipsis_top1(*arc, scores, options);
    const auto top2 = run_ellipsis_top2(*arc, scores, options);
    tables.push_back(proportion_table("fig4a_top1", "top-1 ellipsis accuracy", "header", top1,
                                      level, false));
    tables.push_back(proportion_table("fig4b_top2", "top-2 ellipsis accuracy", "header", top2,
                                      level, false));

    ReportTable fig5;
    fig5.name = "fig5_verbs";
    fig5.title = "rejection-test preference by auxiliary";
    fig5.key_columns = {"grouping", "auxiliary", "header"};
    fig5.value_columns = {"estimate", "ci_low", "ci_high", "successes", "n"};
    const auto breakdown = verb_breakdown(run_rejection_test(*arc, scores, options), *arc);
    for (const auto& [grouping, by_aux] : breakdown.cells) {
      for (const auto& [aux, by_header] : by_aux) {
        for (const auto& [header, tally] : by_header) {
          auto cells = proportion_cells(tally, level);
          cells.pop_back();  // ties
          fig5.add({grouping, aux.surface(), header}, std::move(cells));
        }
      }
    }
    tables.push_back(std::move(fig5));

    const auto candidates = run.candidates();
    tables.push_back(errors_table("appendix_errors_top1",
                                  error_distribution(top1, *arc, scores, candidates, 1),
                                  candidates));
    tables.push_back(errors_table("appendix_errors_top2",
                                  error_distribution(top2, *arc, scores, candidates, 2),
                                  candidates));
  }
  if (auto probe = probe_table(run)) tables.push_back(std::move(*probe));

  std::stable_sort(tables.begin(), tables.end(),
                   [](const ReportTable& a, const ReportTable& b) { return a.name < b.name; });
  return tables;
}

std::string render_tsv(const ReportTable& table, const std::string& stamp) {
  std::string out = "# " + stamp + "\n# " + table.title + "\n";
  for (const auto& n : table.notes) out += "# " + n + "\n";
  std::vector<std::string> header = table.key_columns;
  header.insert(header.end(), table.value_columns.begin(), table.value_columns.end());
  out += join(header, "\t") + "\n";
  for (std::size_t r = 0; r < table.keys.size(); ++r) {
    std::vector<std::string> row = table.keys[r];
    row.insert(row.end(), table.values[r].begin(), table.values[r].end());
    out += join(row, "\t") + "\n";
  }
  return out;
}

std::string render_markdown(const std::vector<ReportTable>& tables, const std::string& heading) {
  std::string out = "# " + heading + "\n";
  for (const auto& t : tables) {
    out += fmt::format("\n## {}: {}\n\n", t.name, t.title);
    std::vector<std::string> header = t.key_columns;
    header.insert(header.end(), t.value_columns.begin(), t.value_columns.end());
    out += "| " + join(header, " | ") + " |\n";
    out += "|" + std::string() ;
    for (std::size_t i = 0; i < header.size(); ++i) out += "---|";
    out += "\n";
    for (std::size_t r = 0; r < t.keys.size(); ++r) {
      std::vector<std::string> row = t.keys[r];
      row.insert(row.end(), t.values[r].begin(), t.values[r].end());
      out += "| " + join(row, " | ") + " |\n";
    }
    if (!t.notes.empty()) {
      out += "\n";
      for (const auto& n : t.notes) out += "- " + n + "\n";
    }
  }
  return out;
}

std::string render_svg(const ReportTable& table, bool series_from_columns,
                       const std::string& stamp) {
  // Bars: one group per row label, one bar per series.
  struct Bar {
    double value;
    std::optional<std::pair<double, double>> ci;
  };
  std::vector<std::string> labels;
  std::vector<std::string> series;
  std::vector<std::vector<Bar>> bars;  // [label][series]

  auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(table.value_columns.begin(), table.value_columns.end(), name);
    if (it == table.value_columns.end()) return std::nullopt;
    return static_cast<std::size_t>(it - table.value_columns.begin());
  };
  auto num = [](const std::string& s) { return s == "NA" ? 0.0 : std::stod(s); };

  if (series_from_columns) {
    series = table.value_columns;
    for (std::size_t r = 0; r < table.keys.size(); ++r) {
      labels.push_back(join(table.keys[r], " "));
      std::vector<Bar> row;
      for (const auto& v : table.values[r]) row.push_back({num(v), std::nullopt});
      bars.push_back(std::move(row));
    }
  } else {
    const auto lo = col("ci_low"), hi = col("ci_high");
    std::map<std::string, std::size_t> label_index, series_index;
    for (std::size_t r = 0; r < table.keys.size(); ++r) {
      const auto& k = table.keys[r];
      const std::string s = k.size() > 1 ? k.back() : table.value_columns.front();
      const std::string l =
          k.size() > 1 ? join(std::vector<std::string>(k.begin(), k.end() - 1), " ") : k.front();
      if (!series_index.count(s)) {
        series_index[s] = series.size();
        series.push_back(s);
      }
      if (!label_index.count(l)) {
        label_index[l] = labels.size();
        labels.push_back(l);
        bars.emplace_back();
      }
      auto& row = bars[label_index[l]];
      row.resize(std::max(row.size(), series_index[s] + 1), Bar{0.0, std::nullopt});
      Bar b{num(table.values[r].front()), std::nullopt};
      if (lo && hi) b.ci = {{num(table.values[r][*lo]), num(table.values[r][*hi])}};
      row[series_index[s]] = b;
    }
    for (auto& row : bars) row.resize(series.size(), Bar{0.0, std::nullopt});
  }

  double vmax = 1.0;
  for (const auto& row : bars)
    for (const auto& b : row) vmax = std::max(vmax, b.ci ? b.ci->second : b.value);

  const double bar_w = 18, gap = 14, left = 50, top = 40, plot_h = 220;
  const double group_w = static_cast<double>(series.size()) * bar_w + gap;
  const double width = left + static_cast<double>(labels.size()) * group_w + 160;
  const double height = top + plot_h + 90;
  static const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52",
                                  "#8172b3", "#937860", "#da8bc3", "#8c8c8c"};

  std::ostringstream s;
  s << fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n",
      width, height);
  if (!stamp.empty()) s << fmt::format("<!-- {} -->\n", stamp);
  s << fmt::format("<text x=\"{:.0f}\" y=\"20\" font-size=\"13\">{}</text>\n", left,
                   xml_escape(table.title));
  const double base = top + plot_h;
  s << fmt::format("<line x1=\"{0:.0f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n",
                   left, base, width - 150);
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = vmax * tick / 4.0;
    const double y = base - plot_h * v / vmax;
    s << fmt::format("<text x=\"{:.0f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.2f}</text>\n",
                     left - 6, y + 4, v);
  }
  for (std::size_t l = 0; l < labels.size(); ++l) {
    const double x0 = left + gap / 2 + static_cast<double>(l) * group_w;
    for (std::size_t k = 0; k < series.size(); ++k) {
      const auto& b = bars[l][k];
      const double x = x0 + static_cast<double>(k) * bar_w;
      const double h = plot_h * std::max(0.0, b.value) / vmax;
      s << fmt::format(
          "<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\"/>\n", x,
          base - h, bar_w - 2, h, kColors[k % 8]);
      if (b.ci) {
        const double cx = x + (bar_w - 2) / 2;
        const double y1 = base - plot_h * b.ci->first / vmax;
        const double y2 = base - plot_h * b.ci->second / vmax;
        s << fmt::format(
            "<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n",
            cx, y1, y2);
      }
    }
    s << fmt::format(
        "<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\" transform=\"rotate(-40 {:.1f} {:.1f})\">{}</text>\n",
        x0 + group_w / 2, base + 14, x0 + group_w / 2, base + 14, xml_escape(labels[l]));
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double y = top + 14.0 * static_cast<double>(k);
    s << fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
                     width - 140, y, kColors[k % 8]);
    s << fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", width - 125, y + 9,
                     xml_escape(series[k]));
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<fs::path> write_run_report(const LoadedRun& run, bool svg) {
  const auto scores = load_scores(run);
  const auto tables = build_report_tables(run, scores);
  const auto stamp = stamp_for(run);
  const auto dir = run.layout.reports();
  std::vector<fs::path> written;
  for (const auto& t : tables) {
    written.push_back(dir / (t.name + ".tsv"));
    write_text_file(written.back(), render_tsv(t, stamp));
    if (svg) {
      written.push_back(dir / (t.name + ".svg"));
      write_text_file(written.back(), render_svg(t, false, stamp));
    }
  }
  written.push_back(dir / "summary.md");
  write_text_file(written.back(),
                  render_markdown(tables, fmt::format("Run {} ({})", run.manifest.run_id,
                                                      run.manifest.model_id)) +
                      fmt::format("\n<!-- {} -->\n", stamp));
  return written;
}

std::vector<std::string> model_columns(const std::vector<LoadedRun>& runs) {
  std::map<std::string, int> seen;
  for (const auto& r : runs) ++seen[r.manifest.model_id];
  std::vector<std::string> out;
  std::map<std::string, int> used;
  for (const auto& r : runs) {
    std::string label = seen[r.manifest.model_id] > 1
                            ? fmt::format("{}@{}", r.manifest.model_id, r.manifest.run_id)
                            : r.manifest.model_id;
    // The same run listed twice still gets distinct columns.
    if (const int n = used[label]++; n > 0) label += fmt::format("#{}", n + 1);
    out.push_back(std::move(label));
  }
  return out;
}

std::vector<fs::path> write_combined_report(const std::vector<LoadedRun>& runs, const fs::path& out,
                                            bool svg) {
  if (runs.empty()) throw UsageError("report: no run directories given");
  const auto columns = model_columns(runs);
  std::vector<std::vector<ReportTable>> per_run;
  for (const auto& r : runs) per_run.push_back(build_report_tables(r, load_scores(r)));

  std::vector<std::string> run_ids;
  for (const auto& r : runs) run_ids.push_back(r.manifest.run_id);
  const std::string stamp =
      fmt::format("schema_version={} run_ids={} models={}", kSchemaVersion, join(run_ids, ","),
                  join(columns, ","));

  std::vector<std::string> names;
  for (const auto& tables : per_run)
    for (const auto& t : tables)
      if (std::find(names.begin(), names.end(), t.name) == names.end()) names.push_back(t.name);
  std::sort(names.begin(), names.end());

  std::vector<fs::path> written;
  std::vector<ReportTable> wide_tables;
  for (const auto& name : names) {
    ReportTable long_t, wide_t;
    bool first = true;
    std::vector<std::vector<std::string>> key_order;
    std::map<std::vector<std::string>, std::vector<std::string>> wide_cells;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      auto it = std::find_if(per_run[i].begin(), per_run[i].end(),
                             [&](const ReportTable& t) { return t.name == name; });
      if (it == per_run[i].end()) continue;
      if (first) {
        long_t.name = name;
        long_t.title = it->title;
        long_t.key_columns = {"model"};
        long_t.key_columns.insert(long_t.key_columns.end(), it->key_columns.begin(),
                                  it->key_columns.end());
        long_t.value_columns = it->value_columns;
        wide_t.name = name + "_wide";
        wide_t.title = fmt::format("{} ({} by model)", it->title, it->value_columns.front());
        wide_t.key_columns = it->key_columns;
        wide_t.value_columns = columns;
        first = false;
      }
      for (std::size_t r = 0; r < it->keys.size(); ++r) {
        std::vector<std::string> k = {columns[i]};
        k.insert(k.end(), it->keys[r].begin(), it->keys[r].end());
        long_t.add(std::move(k), it->values[r]);
        auto& cells = wide_cells[it->keys[r]];
        if (cells.empty()) {
          cells.assign(runs.size(), "NA");
          key_order.push_back(it->keys[r]);
        }
        cells[i] = it->values[r].front();
      }
      for (const auto& n : it->notes) long_t.notes.push_back(columns[i] + ": " + n);
    }
    for (const auto& k : key_order) wide_t.add(k, wide_cells[k]);

    for (const auto* t : {&long_t, &wide_t}) {
      written.push_back(out / (t->name + ".tsv"));
      write_text_file(written.back(), render_tsv(*t, stamp));
    }
    if (svg) {
      written.push_back(out / (wide_t.name + ".svg"));
      write_text_file(written.back(), render_svg(wide_t, true, stamp));
    }
    wide_tables.push_back(std::move(wide_t));
  }
  written.push_back(out / "summary.md");
  write_text_file(written.back(),
                  render_markdown(wide_tables, "Model comparison: " + join(columns, ", ")) +
                      fmt::format("\n<!-- {} -->\n", stamp));
  return written;
}

}  // namespace dlgresp
