#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dlgresp/experiments.hpp"
#include "dlgresp/lexicon.hpp"
#include "dlgresp/probing.hpp"
#include "dlgresp/scoring.hpp"
#include "dlgresp/stimgen.hpp"
#include "json.hpp"

namespace dlgresp {

/// Environment variable naming a shared score cache root. When set, score
/// caches live under $DLGRESP_CACHE_ROOT/<run_id>/<model digest>/ instead of
/// <run>/scores/.
inline constexpr const char* kCacheRootEnv = "DLGRESP_CACHE_ROOT";

/// Effective configuration of a run. Read from a JSON file, overridden by
/// command-line flags, and stored verbatim in the manifest.
struct RunConfig {
  std::uint64_t seed = 1234;
  int n_per_pair = 10;
  DialogueFormat format = DialogueFormat::novel;
  std::vector<Mode> modes = {Mode::arc, Mode::conjunction};
  std::string lexicon;                    // path; empty selects the built-in lexicon
  std::vector<std::string> auxiliaries;   // empty keeps all
  double tie_epsilon = 0.0;
  double ci_level = 0.95;
  ProbeConfig probe;

  nlohmann::json to_json() const;
  /// Unknown keys are errors; absent keys keep their defaults.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

struct RunManifest {
  std::string run_id;
  std::string created_at;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string lexicon_digest;
  std::map<std::string, std::string> suite_digests;  // mode -> digest of the suite file
  std::string model_id;                              // empty until scored
  int schema_version = kSchemaVersion;
  std::string command;
  nlohmann::json config;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// Paths of the run directory layout.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path lexicon() const { return root / "lexicon.json"; }
  std::filesystem::path stimuli() const { return root / "stimuli"; }
  std::filesystem::path suite(Mode mode) const;
  std::filesystem::path results() const { return root / "results"; }
  std::filesystem::path reports() const { return root / "reports"; }
  /// Score cache directory, honouring the cache root variable.
  std::filesystem::path scores(const std::string& run_id, const std::string& model_id) const;
};

struct LoadedRun {
  RunLayout layout;
  RunManifest manifest;
  RunConfig config;
  Lexicon lexicon;
  std::map<Mode, Suite> suites;

  std::filesystem::path score_cache() const;
  std::filesystem::path embedding_cache() const;
  std::vector<Auxiliary> candidates() const { return lexicon.auxiliaries(); }
  const Suite* suite(Mode mode) const;
};

/// Lexicon a config selects, restricted to its auxiliaries.
Lexicon lexicon_for(const RunConfig& config);

/// Writes lexicon, suites and manifest into `dir`. The same config always
/// gives byte-identical files apart from the manifest's created_at.
RunManifest generate_run(const RunConfig& config, const std::filesystem::path& dir,
                         const std::string& command);

/// Loads a run, recomputing every digest. Throws DataError on any mismatch.
LoadedRun load_run(const std::filesystem::path& dir);

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

struct ItemFailure {
  std::string item_id;
  std::string variant;
  std::string message;
};

struct ScoreSummary {
  std::size_t total = 0;    // instances in the run
  std::size_t cached = 0;   // already in the cache before this call
  std::size_t scored = 0;   // newly scored
  std::size_t pending = 0;  // left unscored (limit reached or failed)
  std::vector<ItemFailure> failures;
};

/// Scores every instance of the run's suites that the cache does not already
/// hold, appending each record as it completes. At most `limit` new items are
/// scored when given. The cache is rewritten in suite order at the end, so an
/// interrupted and resumed run ends with the same file as an uninterrupted one.
ScoreSummary score_run(LoadedRun& run, ScorerBackend& backend, int jobs = 1,
                       std::optional<std::size_t> limit = std::nullopt,
                       const std::function<void(std::size_t done, std::size_t todo)>& progress = {});

/// Score index over the run's cache; throws when instances are missing.
ScoreIndex load_scores(const LoadedRun& run);

/// Named analyses a run can produce.
enum class Analysis { header, rejection, conjunction, top1, top2, errors, verbs };
std::string_view to_string(Analysis a);
Analysis parse_analysis(std::string_view s);
inline constexpr Analysis kAllAnalyses[] = {Analysis::header,  Analysis::rejection,
                                            Analysis::conjunction, Analysis::top1,
                                            Analysis::top2,    Analysis::errors,
                                            Analysis::verbs};

/// Whether the run holds the suite an analysis needs.
bool analysis_available(const LoadedRun& run, Analysis analysis);

/// Computes one analysis from the score cache alone.
nlohmann::json compute_analysis(const LoadedRun& run, const ScoreIndex& scores, Analysis analysis);

/// Computes and writes results/<name>.json; returns the written path.
std::filesystem::path write_analysis(const LoadedRun& run, const ScoreIndex& scores,
                                     Analysis analysis);

/// Builds (or reuses) the embedding cache and runs the probe protocol,
/// writing results/probe.json. `backend` may be null when the cache exists.
ProbeResult probe_run(LoadedRun& run, ScorerBackend* backend);

/// Wraps a payload with schema_version, run_id and model_id.
nlohmann::json stamped(const LoadedRun& run, nlohmann::json payload);

/// Writes text to `path` atomically (temporary file, then rename).
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace dlgresp
