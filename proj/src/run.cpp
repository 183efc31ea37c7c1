#include "dlgresp/run.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

namespace dlgresp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot read {}", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json read_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string timestamp() {
  std::time_t t;
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch && *epoch) {
    t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  } else {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string config_digest(const RunConfig& config) { return fnv1a_hex(config.to_json().dump()); }

std::string compute_run_id(const RunManifest& m) {
  std::string key = fmt::format("{}|{}|{}", m.seed, m.config_digest, m.lexicon_digest);
  for (const auto& [mode, digest] : m.suite_digests) key += fmt::format("|{}={}", mode, digest);
  return fnv1a_hex(key);
}

// Every instance of the run, in the canonical cache order.
std::vector<const StimulusItem*> all_items(const LoadedRun& run) {
  std::vector<const StimulusItem*> out;
  for (Mode mode : run.config.modes) {
    if (const auto* suite = run.suite(mode)) {
      for (const auto& item : suite->items) out.push_back(&item);
    }
  }
  return out;
}

const Suite& require_suite(const LoadedRun& run, Mode mode) {
  const auto* s = run.suite(mode);
  if (!s) throw DataError(fmt::format("run has no {} suite", to_string(mode)));
  return *s;
}

void claim_model(LoadedRun& run, const std::string& model_id) {
  if (run.manifest.model_id.empty()) {
    run.manifest.model_id = model_id;
    write_manifest(run.manifest, run.layout.manifest());
  } else if (run.manifest.model_id != model_id) {
    throw DataError(fmt::format("run {} was scored with {}, not {}", run.manifest.run_id,
                                run.manifest.model_id, model_id));
  }
}

ExperimentOptions options_for(const LoadedRun& run) {
  return ExperimentOptions{run.config.tie_epsilon, run.candidates()};
}

}  // namespace

// ---------------------------------------------------------------------------

json RunConfig::to_json() const {
  json modes_json = json::array();
  for (Mode m : modes) modes_json.push_back(to_string(m));
  return json{{"seed", seed},
              {"n_per_pair", n_per_pair},
              {"format", to_string(format)},
              {"modes", std::move(modes_json)},
              {"lexicon", lexicon},
              {"auxiliaries", auxiliaries},
              {"tie_epsilon", tie_epsilon},
              {"ci_level", ci_level},
              {"probe", probe.to_json()}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw DataError("config: expected a JSON object");
  RunConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "n_per_pair") c.n_per_pair = value.get<int>();
      else if (key == "format") c.format = parse_format(value.get<std::string>());
      else if (key == "modes") {
        c.modes.clear();
        for (const auto& m : value) c.modes.push_back(parse_mode(m.get<std::string>()));
      } else if (key == "lexicon") c.lexicon = value.get<std::string>();
      else if (key == "auxiliaries") c.auxiliaries = value.get<std::vector<std::string>>();
      else if (key == "tie_epsilon") c.tie_epsilon = value.get<double>();
      else if (key == "ci_level") c.ci_level = value.get<double>();
      else if (key == "probe") c.probe = ProbeConfig::from_json(value);
      else throw DataError(fmt::format("config: unknown key \"{}\"", key));
    }
  } catch (const json::exception& e) {
    throw DataError(fmt::format("config: {}", e.what()));
  } catch (const UsageError& e) {
    throw DataError(fmt::format("config: {}", e.what()));
  }
  if (c.n_per_pair < 1) throw DataError("config: n_per_pair must be at least 1");
  if (c.modes.empty()) throw DataError("config: modes must not be empty");
  std::set<Mode> seen(c.modes.begin(), c.modes.end());
  if (seen.size() != c.modes.size()) throw DataError("config: duplicate mode");
  std::sort(c.modes.begin(), c.modes.end());
  if (!(c.tie_epsilon >= 0.0)) throw DataError("config: tie_epsilon must be non-negative");
  if (!(c.ci_level > 0.0 && c.ci_level < 1.0)) throw DataError("config: ci_level must lie in (0, 1)");
  return c;
}

RunConfig RunConfig::load(const fs::path& path) { return from_json(read_json_file(path)); }

json RunManifest::to_json() const {
  return json{{"run_id", run_id},
              {"created_at", created_at},
              {"seed", seed},
              {"config_digest", config_digest},
              {"lexicon_digest", lexicon_digest},
              {"suite_digests", suite_digests},
              {"model_id", model_id},
              {"schema_version", schema_version},
              {"command", command},
              {"config", config}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kSchemaVersion) {
      throw DataError(fmt::format("manifest schema_version {} (expected {})", m.schema_version,
                                  kSchemaVersion));
    }
    m.run_id = j.at("run_id").get<std::string>();
    m.created_at = j.at("created_at").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.lexicon_digest = j.at("lexicon_digest").get<std::string>();
    m.suite_digests = j.at("suite_digests").get<std::map<std::string, std::string>>();
    m.model_id = j.at("model_id").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    return m;
  } catch (const json::exception& e) {
    throw DataError(fmt::format("manifest: {}", e.what()));
  }
}

fs::path RunLayout::suite(Mode mode) const {
  return stimuli() / fmt::format("{}.jsonl", to_string(mode));
}

fs::path RunLayout::scores(const std::string& run_id, const std::string& model_id) const {
  if (const char* rootvar = std::getenv(kCacheRootEnv); rootvar && *rootvar) {
    return fs::path(rootvar) / run_id / fnv1a_hex(model_id);
  }
  return root / "scores";
}

fs::path LoadedRun::score_cache() const {
  return layout.scores(manifest.run_id, manifest.model_id) / "scores.jsonl";
}

fs::path LoadedRun::embedding_cache() const {
  return layout.scores(manifest.run_id, manifest.model_id) / "embeddings.jsonl";
}

const Suite* LoadedRun::suite(Mode mode) const {
  auto it = suites.find(mode);
  return it == suites.end() ? nullptr : &it->second;
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
    out << text;
    if (!out) throw DataError(fmt::format("write failed: {}", path.string()));
  }
  fs::rename(tmp, path);
}

void write_manifest(const RunManifest& manifest, const fs::path& path) {
  write_text_file(path, manifest.to_json().dump(2) + "\n");
}

Lexicon lexicon_for(const RunConfig& config) {
  Lexicon lex = config.lexicon.empty() ? default_lexicon() : load_lexicon(config.lexicon);
  if (!config.auxiliaries.empty()) lex = restrict_auxiliaries(lex, make_auxiliaries(config.auxiliaries));
  return lex;
}

RunManifest generate_run(const RunConfig& config, const fs::path& dir, const std::string& command) {
  const RunLayout layout{dir};
  if (fs::exists(layout.manifest())) {
    throw DataError(fmt::format("{} already holds a run; choose a fresh directory", dir.string()));
  }
  const Lexicon lex = lexicon_for(config);

  RunManifest m;
  m.seed = config.seed;
  m.config = config.to_json();
  m.config_digest = config_digest(config);
  m.lexicon_digest = lexicon_digest(lex);
  m.command = command;
  m.created_at = timestamp();

  std::map<Mode, std::string> texts;
  for (Mode mode : config.modes) {
    SuiteConfig sc = SuiteConfig::defaults(mode);
    sc.n_per_pair = config.n_per_pair;
    sc.seed = config.seed;
    sc.format = config.format;
    texts[mode] = serialize_suite(build_suite(lex, sc));
    m.suite_digests[std::string(to_string(mode))] = fnv1a_hex(texts[mode]);
  }
  m.run_id = compute_run_id(m);

  fs::create_directories(dir);
  // The manifest goes first so a half-written directory is still identifiable.
  write_manifest(m, layout.manifest());
  save_lexicon(lex, layout.lexicon());
  fs::create_directories(layout.stimuli());
  for (const auto& [mode, text] : texts) write_text_file(layout.suite(mode), text);
  return m;
}

LoadedRun load_run(const fs::path& dir) {
  const RunLayout layout{dir};
  if (!fs::exists(layout.manifest())) {
    throw DataError(fmt::format("{} is not a run directory (no manifest.json)", dir.string()));
  }
  RunManifest m = RunManifest::from_json(read_json_file(layout.manifest()));
  RunConfig config = RunConfig::from_json(m.config);
  if (config_digest(config) != m.config_digest) {
    throw DataError(fmt::format("{}: config digest mismatch", layout.manifest().string()));
  }
  if (config.seed != m.seed) throw DataError("manifest seed disagrees with its config");

  Lexicon lex = load_lexicon(layout.lexicon());
  if (lexicon_digest(lex) != m.lexicon_digest) {
    throw DataError(fmt::format("{}: lexicon digest mismatch", layout.lexicon().string()));
  }

  std::map<Mode, Suite> suites;
  for (Mode mode : config.modes) {
    const auto key = std::string(to_string(mode));
    auto it = m.suite_digests.find(key);
    if (it == m.suite_digests.end()) {
      throw DataError(fmt::format("manifest lists no digest for the {} suite", key));
    }
    const auto path = layout.suite(mode);
    if (fnv1a_hex(read_file(path)) != it->second) {
      throw DataError(fmt::format("{}: suite digest mismatch", path.string()));
    }
    Suite suite = read_suite(path);
    suite.config.mode = mode;
    suite.config.n_per_pair = config.n_per_pair;
    suite.config.seed = config.seed;
    suite.config.format = config.format;
    suites.emplace(mode, std::move(suite));
  }
  if (compute_run_id(m) != m.run_id) throw DataError("manifest run_id does not match its digests");
  return LoadedRun{layout, std::move(m), std::move(config), std::move(lex), std::move(suites)};
}

// ---------------------------------------------------------------------------

ScoreSummary score_run(LoadedRun& run, ScorerBackend& backend, int jobs,
                       std::optional<std::size_t> limit,
                       const std::function<void(std::size_t, std::size_t)>& progress) {
  claim_model(run, backend.model_id());
  const auto cache = run.score_cache();
  fs::create_directories(cache.parent_path());
  const auto candidates = run.candidates();
  const auto items = all_items(run);

  std::map<std::pair<std::string, std::string>, const StimulusItem*> by_key;
  for (const auto* item : items) by_key[{item->id, item->variant}] = item;

  std::map<std::pair<std::string, std::string>, ScoreRecord> have;
  if (fs::exists(cache)) {
    for (auto& r : read_score_cache(cache)) {
      auto it = by_key.find({r.item_id, r.variant});
      if (it == by_key.end()) {
        throw DataError(fmt::format("{}: record {} / {} is not in this run", cache.string(),
                                    r.item_id, r.variant));
      }
      if (r.model_id != run.manifest.model_id) {
        throw DataError(fmt::format("{}: record {} / {} comes from {}", cache.string(), r.item_id,
                                    r.variant, r.model_id));
      }
      // Records computed from other inputs are rescored.
      if (r.input_digest != input_digest(*it->second, candidates)) continue;
      auto key = std::make_pair(r.item_id, r.variant);
      have.insert_or_assign(std::move(key), std::move(r));
    }
  }

  auto canonical = [&] {
    std::vector<ScoreRecord> out;
    for (const auto* item : items) {
      if (auto it = have.find({item->id, item->variant}); it != have.end()) out.push_back(it->second);
    }
    return out;
  };
  // Drops any torn final line before new records are appended.
  write_score_cache(canonical(), cache);

  ScoreSummary summary;
  summary.total = items.size();
  summary.cached = have.size();
  std::vector<const StimulusItem*> todo;
  for (const auto* item : items) {
    if (!have.count({item->id, item->variant})) todo.push_back(item);
  }
  const std::size_t attempt = limit ? std::min(*limit, todo.size()) : todo.size();

  std::ofstream append(cache, std::ios::binary | std::ios::app);
  if (!append) throw DataError(fmt::format("cannot append to {}", cache.string()));
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::size_t done = 0;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= attempt) return;
      const auto* item = todo[i];
      try {
        ScoreRecord r = score_item(backend, *item, candidates);
        std::lock_guard lock(mu);
        append << record_to_json(r).dump() << '\n' << std::flush;
        have.insert_or_assign({item->id, item->variant}, std::move(r));
        ++summary.scored;
        if (progress) progress(++done, attempt);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        summary.failures.push_back({item->id, item->variant, e.what()});
        if (progress) progress(++done, attempt);
      }
    }
  };
  const int n_workers = backend.concurrent_safe() ? std::max(1, jobs) : 1;
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  append.close();

  write_score_cache(canonical(), cache);
  summary.pending = summary.total - have.size();
  std::sort(summary.failures.begin(), summary.failures.end(),
            [](const ItemFailure& a, const ItemFailure& b) {
              return std::tie(a.item_id, a.variant) < std::tie(b.item_id, b.variant);
            });
  return summary;
}

ScoreIndex load_scores(const LoadedRun& run) {
  if (run.manifest.model_id.empty()) {
    throw DataError(fmt::format("run {} has not been scored", run.manifest.run_id));
  }
  const auto cache = run.score_cache();
  if (!fs::exists(cache)) throw DataError(fmt::format("missing score cache {}", cache.string()));
  ScoreIndex index;
  for (auto& r : read_score_cache(cache)) {
    if (r.model_id != run.manifest.model_id) {
      throw DataError(fmt::format("{}: record {} / {} comes from {}", cache.string(), r.item_id,
                                  r.variant, r.model_id));
    }
    index.add(std::move(r));
  }
  const auto candidates = run.candidates();
  std::size_t missing = 0;
  std::string first;
  for (const auto* item : all_items(run)) {
    const auto* r = index.find(item->id, item->variant);
    if (!r) {
      if (missing++ == 0) first = item->id + " / " + item->variant;
    } else if (r->input_digest != input_digest(*item, candidates)) {
      throw DataError(fmt::format("{}: stale score for {} / {}", cache.string(), item->id,
                                  item->variant));
    }
  }
  if (missing > 0) {
    throw DataError(fmt::format("{}: {} instances unscored (first: {})", cache.string(), missing,
                                first));
  }
  return index;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Analysis a) {
  switch (a) {
    case Analysis::header: return "header";
    case Analysis::rejection: return "rejection";
    case Analysis::conjunction: return "conjunction";
    case Analysis::top1: return "top1";
    case Analysis::top2: return "top2";
    case Analysis::errors: return "errors";
    case Analysis::verbs: return "verbs";
  }
  return "?";
}

Analysis parse_analysis(std::string_view s) {
  for (Analysis a : kAllAnalyses) {
    if (to_string(a) == s) return a;
  }
  throw UsageError(fmt::format(
      "unknown experiment \"{}\" (header, rejection, conjunction, top1, top2, errors, verbs)", s));
}

bool analysis_available(const LoadedRun& run, Analysis analysis) {
  return run.suite(analysis == Analysis::conjunction ? Mode::conjunction : Mode::arc) != nullptr;
}

json compute_analysis(const LoadedRun& run, const ScoreIndex& scores, Analysis analysis) {
  const auto options = options_for(run);
  const double level = run.config.ci_level;
  switch (analysis) {
    case Analysis::header:
      return result_to_json(run_header_test(require_suite(run, Mode::arc), scores, options), level);
    case Analysis::rejection:
      return result_to_json(run_rejection_test(require_suite(run, Mode::arc), scores, options),
                            level);
    case Analysis::conjunction:
      return result_to_json(
          run_conjunction_test(require_suite(run, Mode::conjunction), scores, options), level);
    case Analysis::top1:
      return result_to_json(run_ellipsis_top1(require_suite(run, Mode::arc), scores, options),
                            level);
    case Analysis::top2:
      return result_to_json(run_ellipsis_top2(require_suite(run, Mode::arc), scores, options),
                            level);
    case Analysis::errors: {
      const auto& suite = require_suite(run, Mode::arc);
      const auto candidates = run.candidates();
      json j = json::object();
      j["top1"] = errors_to_json(error_distribution(run_ellipsis_top1(suite, scores, options),
                                                    suite, scores, candidates, 1));
      j["top2"] = errors_to_json(error_distribution(run_ellipsis_top2(suite, scores, options),
                                                    suite, scores, candidates, 2));
      return j;
    }
    case Analysis::verbs: {
      const auto& suite = require_suite(run, Mode::arc);
      return breakdown_to_json(verb_breakdown(run_rejection_test(suite, scores, options), suite),
                               level);
    }
  }
  throw UsageError("unknown analysis");
}

json stamped(const LoadedRun& run, json payload) {
  return json{{"schema_version", kSchemaVersion},
              {"run_id", run.manifest.run_id},
              {"model_id", run.manifest.model_id},
              {"result", std::move(payload)}};
}

fs::path write_analysis(const LoadedRun& run, const ScoreIndex& scores, Analysis analysis) {
  const auto path = run.layout.results() / fmt::format("{}.json", to_string(analysis));
  write_text_file(path, stamped(run, compute_analysis(run, scores, analysis)).dump(2) + "\n");
  return path;
}

ProbeResult probe_run(LoadedRun& run, ScorerBackend* backend) {
  const auto& suite = require_suite(run, Mode::arc);
  if (backend) claim_model(run, backend->model_id());
  if (run.manifest.model_id.empty()) {
    throw DataError("probe: the run has no model yet; pass a backend with embeddings");
  }
  const auto cache = run.embedding_cache();
  std::vector<TokenRecord> records;
  if (fs::exists(cache)) {
    records = read_probe_dataset(cache);
  } else {
    if (!backend) throw DataError(fmt::format("probe: no embedding cache at {}", cache.string()));
    records = build_probe_dataset(suite, *backend);
    fs::create_directories(cache.parent_path());
    write_probe_dataset(records, cache);
  }
  ProbeResult result = run_probe_protocol(records, run.config.probe);
  write_text_file(run.layout.results() / "probe.json",
                  stamped(run, probe_result_to_json(result)).dump(2) + "\n");
  return result;
}

}  // namespace dlgresp
