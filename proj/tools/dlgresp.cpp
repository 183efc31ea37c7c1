// dlgresp: generate stimuli, score them, run the analyses and write reports.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "dlgresp/experiments.hpp"
#include "dlgresp/lexicon.hpp"
#include "dlgresp/probing.hpp"
#include "dlgresp/report.hpp"
#include "dlgresp/run.hpp"
#include "dlgresp/scoring.hpp"
#include "dlgresp/stimgen.hpp"

namespace fs = std::filesystem;
using namespace dlgresp;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kBackend = 3 };

std::string command_line(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += ' ';
    out += argv[i];
  }
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto part = trim(s.substr(start, comma == std::string::npos ? std::string::npos
                                                                      : comma - start));
    if (!part.empty()) out.push_back(part);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

struct GenerateArgs {
  std::string config, out, format, lexicon, aux;
  std::vector<std::string> modes;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_per_pair;
};

int cmd_generate(const GenerateArgs& a, const std::string& command) {
  RunConfig config = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  if (a.seed) config.seed = *a.seed;
  if (a.n_per_pair) config.n_per_pair = *a.n_per_pair;
  if (!a.format.empty()) config.format = parse_format(a.format);
  if (!a.lexicon.empty()) config.lexicon = a.lexicon;
  if (!a.aux.empty()) config.auxiliaries = split_commas(a.aux);
  if (!a.modes.empty()) {
    nlohmann::json modes = nlohmann::json::array();
    for (const auto& m : a.modes) {
      if (m == "both") {
        modes.push_back("arc");
        modes.push_back("conjunction");
      } else {
        modes.push_back(std::string(to_string(parse_mode(m))));
      }
    }
    auto j = config.to_json();
    j["modes"] = modes;
    config = RunConfig::from_json(j);
  }
  const auto m = generate_run(config, a.out, command);
  const auto run = load_run(a.out);
  std::cout << fmt::format("run {} written to {}\n", m.run_id, a.out);
  for (const auto& [mode, suite] : run.suites) {
    std::cout << fmt::format("  {}: {} contexts, {} masked, {} sequence instances\n",
                             to_string(mode), suite.contexts.size(),
                             suite.count(ItemKind::masked), suite.count(ItemKind::sequence));
  }
  return kOk;
}

int cmd_score(const std::string& dir, const std::string& backend_spec, int jobs,
              std::optional<std::size_t> limit, bool quiet) {
  auto run = load_run(dir);
  auto backend = make_backend(backend_spec, run.lexicon);
  std::size_t last_pct = 101;
  const auto summary = score_run(run, *backend, jobs, limit, [&](std::size_t done, std::size_t todo) {
    if (quiet || todo == 0) return;
    const std::size_t pct = done * 100 / todo;
    if (pct != last_pct && (pct % 10 == 0 || done == todo)) {
      std::cerr << fmt::format("\rscoring {}/{}", done, todo) << std::flush;
      last_pct = pct;
    }
  });
  if (!quiet && summary.scored + summary.failures.size() > 0) std::cerr << "\n";
  for (const auto& f : summary.failures) {
    std::cerr << fmt::format("error: {} / {}: {}\n", f.item_id, f.variant, f.message);
  }
  std::cout << fmt::format("model {}: {} instances, {} cached, {} scored, {} failed, {} pending\n",
                           run.manifest.model_id, summary.total, summary.cached, summary.scored,
                           summary.failures.size(), summary.pending);
  std::cout << fmt::format("cache: {}\n", run.score_cache().string());
  return summary.failures.empty() ? kOk : kBackend;
}

int cmd_run(const std::string& dir, const std::vector<std::string>& which) {
  const auto run = load_run(dir);
  const auto scores = load_scores(run);
  std::vector<Analysis> analyses;
  for (const auto& w : which) {
    if (w == "all") {
      for (Analysis a : kAllAnalyses) {
        if (analysis_available(run, a)) analyses.push_back(a);
      }
    } else {
      const Analysis a = parse_analysis(w);
      if (!analysis_available(run, a)) {
        throw DataError(fmt::format("run lacks the suite needed for {}", w));
      }
      analyses.push_back(a);
    }
  }
  for (Analysis a : analyses) {
    const auto path = write_analysis(run, scores, a);
    std::cout << fmt::format("{}: {}\n", to_string(a), path.string());
  }
  return kOk;
}

int cmd_probe(const std::string& dir, const std::string& backend_spec,
              const std::string& embeddings) {
  auto run = load_run(dir);
  std::unique_ptr<ScorerBackend> backend;
  if (!backend_spec.empty()) backend = make_backend(backend_spec, run.lexicon);
  if (!embeddings.empty()) {
    if (run.manifest.model_id.empty()) {
      throw DataError("probe: score the run before importing an embedding dataset");
    }
    const auto records = read_probe_dataset(embeddings);
    fs::create_directories(run.embedding_cache().parent_path());
    write_probe_dataset(records, run.embedding_cache());
  }
  const auto result = probe_run(run, backend.get());
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    const auto& r = result.runs[i];
    std::cout << fmt::format(
        "run {}: accuracy {} (majority {}), {} train / {} test tokens, {} epochs\n", i + 1,
        format_number(r.accuracy), format_number(r.majority_share), r.train_tokens,
        r.test_tokens, r.epochs);
  }
  std::cout << fmt::format("mean accuracy {}\n", format_number(result.mean_accuracy));
  return kOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out, bool svg) {
  std::vector<LoadedRun> runs;
  for (const auto& d : dirs) runs.push_back(load_run(d));
  std::vector<fs::path> written;
  if (runs.size() == 1 && out.empty()) {
    written = write_run_report(runs.front(), svg);
  } else {
    if (out.empty()) throw UsageError("report over several runs needs --out");
    if (runs.size() == 1) {
      written = write_run_report(runs.front(), svg);
    }
    const auto combined = write_combined_report(runs, out, svg);
    written.insert(written.end(), combined.begin(), combined.end());
  }
  for (const auto& p : written) std::cout << p.string() << "\n";
  return kOk;
}

int cmd_lexicon_validate(const std::string& path) {
  const auto lex = load_lexicon(path);
  std::cout << fmt::format("{}: ok ({} auxiliaries, {} verb phrases, {} occupations, {} names)\n",
                           path, lex.auxiliaries().size(), lex.verb_phrase_count(),
                           lex.occupations().size(), lex.names().size());
  return kOk;
}

int cmd_lexicon_export(const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << default_lexicon_text();
  } else {
    save_lexicon(default_lexicon(), out);
  }
  return kOk;
}

int cmd_serve(const std::string& backend_spec, const std::string& lexicon_path) {
  const Lexicon lex = lexicon_path.empty() ? default_lexicon() : load_lexicon(lexicon_path);
  auto backend = make_backend(backend_spec, lex);
  serve_protocol(*backend, std::cin, std::cout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dialogue-response at-issueness and ellipsis diagnostics for language models"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Generate stimulus suites into a run directory");
  generate->add_option("--out", gen.out, "Run directory")->required();
  generate->add_option("--config", gen.config, "JSON config file");
  generate->add_option("--seed", gen.seed, "Random seed");
  generate->add_option("--n-per-pair", gen.n_per_pair, "Contexts per ordered auxiliary pair");
  generate->add_option("--mode", gen.modes, "arc, conjunction or both (repeatable)");
  generate->add_option("--format", gen.format, "novel or simple");
  generate->add_option("--lexicon", gen.lexicon, "Lexicon JSON file");
  generate->add_option("--aux", gen.aux, "Comma-separated auxiliary subset");

  std::string run_dir, backend_spec;
  int jobs = 1;
  std::optional<std::size_t> limit;
  auto* score = app.add_subcommand("score", "Score every instance of a run (resumable)");
  score->add_option("--run", run_dir, "Run directory")->required();
  score->add_option("--backend", backend_spec,
                    "inproc:<model> | proto:<command> | mock:<rules> | replay:<cache>")
      ->required();
  score->add_option("--jobs", jobs, "Parallel scoring workers")->check(CLI::PositiveNumber);
  score->add_option("--limit", limit, "Score at most this many new instances");

  std::vector<std::string> experiments;
  auto* runc = app.add_subcommand("run", "Compute experiment results from the score cache");
  runc->add_option("experiment", experiments,
                   "header, rejection, conjunction, top1, top2, errors, verbs or all")
      ->required();
  runc->add_option("--run", run_dir, "Run directory")->required();

  std::string embeddings;
  auto* probe = app.add_subcommand("probe", "Train and evaluate the token-label probe");
  probe->add_option("--run", run_dir, "Run directory")->required();
  probe->add_option("--backend", backend_spec, "Backend providing token embeddings");
  probe->add_option("--embeddings", embeddings, "Import a probe dataset file instead");

  std::vector<std::string> report_dirs;
  std::string report_out;
  bool svg = false;
  auto* report = app.add_subcommand("report", "Write plot-data tables for one or more runs");
  report->add_option("runs", report_dirs, "Run directories")->required();
  report->add_option("--out", report_out, "Output directory for a side-by-side report");
  report->add_flag("--svg", svg, "Also render SVG bar charts");

  auto* lexicon = app.add_subcommand("lexicon", "Lexicon utilities");
  lexicon->require_subcommand(1);
  std::string lexicon_path, lexicon_out;
  auto* validate = lexicon->add_subcommand("validate", "Validate a lexicon file");
  validate->add_option("path", lexicon_path, "Lexicon JSON file")->required();
  auto* exportc = lexicon->add_subcommand("export", "Write the built-in lexicon");
  exportc->add_option("--out", lexicon_out, "Destination (default: stdout)");

  std::string serve_lexicon;
  auto* serve = app.add_subcommand("serve", "Answer scorer protocol requests on stdin/stdout");
  serve->add_option("--backend", backend_spec, "Backend to serve")->required();
  serve->add_option("--lexicon", serve_lexicon, "Lexicon for mock backends");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const std::string command = command_line(argc, argv);
  try {
    if (*generate) return cmd_generate(gen, command);
    if (*score) return cmd_score(run_dir, backend_spec, jobs, limit, quiet);
    if (*runc) return cmd_run(run_dir, experiments);
    if (*probe) return cmd_probe(run_dir, backend_spec, embeddings);
    if (*report) return cmd_report(report_dirs, report_out, svg);
    if (*validate) return cmd_lexicon_validate(lexicon_path);
    if (*exportc) return cmd_lexicon_export(lexicon_out);
    if (*serve) return cmd_serve(backend_spec, serve_lexicon);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kBackend;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
