// Model-backed acceptance check. Needs a real masked language model behind
// DLGRESP_MLM_BACKEND, e.g.
//   DLGRESP_MLM_BACKEND='proto:python3 tools/hf_scorer.py bert-base-uncased'
// Exits 77 (skipped) when the variable is unset.

#include <chrono>
#include <cstdlib>
#include <string>

#include <fmt/format.h>

#include "dlgresp/run.hpp"
#include "support.hpp"

using namespace dlgresp;

int main() {
  const char* spec = std::getenv("DLGRESP_MLM_BACKEND");
  if (spec == nullptr || *spec == '\0') {
    fmt::print("AC8 SKIP real masked-LM backend: DLGRESP_MLM_BACKEND is not set\n");
    return 77;
  }
  const auto start = std::chrono::steady_clock::now();
  bool pass = true;
  std::string detail;
  auto expect = [&](bool ok, const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
    pass = pass && ok;
  };
  try {
    testing::TempDir dir("acceptance-model");
    RunConfig config;
    config.modes = {Mode::arc};
    generate_run(config, dir.path(), "acceptance_model");
    auto run = load_run(dir.path());
    auto backend = make_backend(spec, run.lexicon);
    const auto summary = score_run(run, *backend, 1);
    expect(summary.failures.empty() && summary.pending == 0,
           fmt::format("{} failed, {} pending", summary.failures.size(), summary.pending));
    run = load_run(dir.path());
    const auto scores = load_scores(run);
    const auto rejection = compute_analysis(run, scores, Analysis::rejection);
    for (const char* h : {"reject", "wait"}) {
      const double est = rejection.at("groups").at(h).at("estimate").get<double>();
      expect(est > 0.5, fmt::format("rejection {} {:.4f} (> 0.5)", h, est));
    }
    const auto probe = probe_run(run, backend.get());
    expect(probe.mean_accuracy >= 0.95, fmt::format("probe {:.4f} (>= 0.95)", probe.mean_accuracy));
    fmt::print("model {}\n", backend->model_id());
  } catch (const std::exception& e) {
    expect(false, fmt::format("exception: {}", e.what()));
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  expect(secs < 20 * 60, fmt::format("runtime {:.0f}s (< 1200s)", secs));
  fmt::print("AC8 {} real masked-LM backend ({:.1f}s): {}\n", pass ? "PASS" : "FAIL", secs, detail);
  return pass ? 0 : 1;
}
