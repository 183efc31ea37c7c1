#include "dlgresp/scoring.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/format.h>

namespace dlgresp {

using nlohmann::json;

namespace {

constexpr std::pair<Capability, std::string_view> kCapabilityNames[] = {
    {Capability::sequence_logprob, "sequence_logprob"},
    {Capability::masked_candidates, "masked_candidates"},
    {Capability::embeddings, "embeddings"},
    {Capability::token_conditionals, "token_conditionals"},
};

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw BackendError(fmt::format("non-finite score for {}", what));
}

}  // namespace

std::string_view to_string(Capability c) {
  for (const auto& [cap, name] : kCapabilityNames) {
    if (cap == c) return name;
  }
  return "?";
}

std::string_view to_string(ModelStyle s) { return s == ModelStyle::masked ? "masked" : "causal"; }

std::vector<std::string> Capabilities::names() const {
  std::vector<std::string> out;
  for (const auto& [cap, name] : kCapabilityNames) {
    if (has(cap)) out.emplace_back(name);
  }
  return out;
}

Capabilities Capabilities::from_names(const std::vector<std::string>& names) {
  Capabilities caps;
  for (const auto& n : names) {
    bool known = false;
    for (const auto& [cap, name] : kCapabilityNames) {
      if (name == n) {
        caps.bits_ |= static_cast<unsigned>(cap);
        known = true;
      }
    }
    if (!known) throw BackendError(fmt::format("unknown capability \"{}\"", n));
  }
  return caps;
}

// ---------------------------------------------------------------------------
// ScorerBackend defaults

void ScorerBackend::unsupported(Capability c) const {
  throw UnsupportedCapability(
      fmt::format("backend {} does not support {}", model_id(), to_string(c)));
}

SequenceScore ScorerBackend::sequence_logprob(const ScoreRequest&) {
  unsupported(Capability::sequence_logprob);
}

CandidateLogprobs ScorerBackend::masked_candidates(const ScoreRequest&) {
  unsupported(Capability::masked_candidates);
}

std::vector<TokenEmbedding> ScorerBackend::embeddings(const ScoreRequest&) {
  unsupported(Capability::embeddings);
}

std::vector<Token> ScorerBackend::tokenize(std::string_view) {
  unsupported(Capability::token_conditionals);
}

std::vector<double> ScorerBackend::masked_token_logprobs(std::string_view text,
                                                         std::span<const Token> tokens) {
  std::vector<double> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    out.push_back(masked_token_logprob(text, tokens, i));
  }
  return out;
}

double ScorerBackend::masked_token_logprob(std::string_view, std::span<const Token>, std::size_t) {
  unsupported(Capability::token_conditionals);
}

std::optional<ScoreRecord> ScorerBackend::recorded(const ScoreRequest&, ItemKind) {
  return std::nullopt;
}

// ---------------------------------------------------------------------------

SequenceScore pseudo_log_likelihood(ScorerBackend& backend, std::string_view text) {
  if (!backend.capabilities().has(Capability::token_conditionals)) {
    throw UnsupportedCapability(fmt::format(
        "backend {} cannot compute pseudo-log-likelihood (no masked conditionals)",
        backend.model_id()));
  }
  if (trim(text).empty()) throw BackendError("pseudo_log_likelihood: empty text");
  const auto tokens = backend.tokenize(text);
  if (tokens.empty()) throw BackendError("pseudo_log_likelihood: text has no content tokens");
  const auto logprobs = backend.masked_token_logprobs(text, tokens);
  if (logprobs.size() != tokens.size()) {
    throw BackendError("pseudo_log_likelihood: backend returned wrong number of conditionals");
  }
  SequenceScore score;
  for (double lp : logprobs) {
    check_finite(lp, "masked conditional");
    score.total += lp;
  }
  score.n_tokens = static_cast<int>(tokens.size());
  return score;
}

double sequence_score(ScorerBackend& backend, std::string_view text) {
  ScoreRequest req;
  req.text = std::string(text);
  const auto s = backend.sequence_logprob(req);
  if (s.n_tokens < 1) throw BackendError("sequence score with no content tokens");
  return s.normalized();
}

CandidateLogprobs masked_candidate_logprobs(ScorerBackend& backend, std::string_view masked_text,
                                            std::span<const Auxiliary> candidates) {
  const auto markers = count_occurrences(masked_text, kMaskMarker);
  if (markers != 1) {
    throw DataError(fmt::format("masked text must contain exactly one {} marker, found {}",
                                kMaskMarker, markers));
  }
  ScoreRequest req;
  req.masked_text = std::string(masked_text);
  req.candidates.assign(candidates.begin(), candidates.end());
  auto scores = backend.masked_candidates(req);
  for (const auto& c : candidates) {
    auto it = scores.find(c);
    if (it == scores.end()) {
      throw BackendError(fmt::format("backend returned no score for candidate \"{}\"", c.surface()));
    }
    check_finite(it->second, "candidate " + c.surface());
  }
  return scores;
}

Ranking rank_candidates(const CandidateLogprobs& scores, std::span<const Auxiliary> candidates) {
  Ranking r;
  r.order.assign(candidates.begin(), candidates.end());
  for (const auto& c : r.order) {
    if (!scores.contains(c)) {
      throw DataError(fmt::format("rank_candidates: no score for \"{}\"", c.surface()));
    }
  }
  std::sort(r.order.begin(), r.order.end(), [&](const Auxiliary& a, const Auxiliary& b) {
    const double sa = scores.at(a), sb = scores.at(b);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  for (std::size_t i = 1; i < r.order.size(); ++i) {
    if (scores.at(r.order[i - 1]) == scores.at(r.order[i])) r.tie = true;
  }
  return r;
}

Ranking rank_candidates(const ScoreRecord& record, std::span<const Auxiliary> candidates) {
  return rank_candidates(record.candidate_logprobs, candidates);
}

std::string input_digest(const StimulusItem& item, std::span<const Auxiliary> candidates) {
  std::string buf;
  buf += to_string(item.kind);
  buf += '\x1f';
  buf += item.kind == ItemKind::masked ? item.masked_text : item.text;
  if (item.kind == ItemKind::masked) {
    for (const auto& c : candidates) {
      buf += '\x1f';
      buf += c.surface();
    }
  }
  return fnv1a_hex(buf);
}

ScoreRecord score_item(ScorerBackend& backend, const StimulusItem& item,
                       std::span<const Auxiliary> candidates) {
  ScoreRequest req;
  req.item_id = item.id;
  req.variant = item.variant;
  req.text = item.text;
  req.masked_text = item.masked_text;
  req.candidates.assign(candidates.begin(), candidates.end());
  const std::string digest = input_digest(item, candidates);

  if (auto rec = backend.recorded(req, item.kind)) {
    if (!rec->input_digest.empty() && rec->input_digest != digest) {
      throw DataError(fmt::format(
          "score cache entry {} / {} was computed from different input (stale cache?)", item.id,
          item.variant));
    }
    return *rec;
  }

  ScoreRecord rec;
  rec.model_id = backend.model_id();
  rec.item_id = item.id;
  rec.variant = item.variant;
  rec.kind = item.kind;
  rec.input_digest = digest;

  if (item.kind == ItemKind::sequence) {
    const auto s = backend.sequence_logprob(req);
    if (s.n_tokens < 1) throw BackendError(fmt::format("no content tokens in {}", item.id));
    check_finite(s.total, item.id);
    rec.seq_logprob = s.total;
    rec.n_tokens = s.n_tokens;
    return rec;
  }

  const auto caps = backend.capabilities();
  bool fallback = !caps.has(Capability::masked_candidates);
  if (!fallback) {
    try {
      rec.candidate_logprobs = masked_candidate_logprobs(backend, item.masked_text, candidates);
    } catch (const MultiTokenCandidate&) {
      fallback = true;
    }
  }
  if (fallback) {
    if (!caps.has(Capability::sequence_logprob)) {
      throw UnsupportedCapability(fmt::format(
          "backend {} supports neither masked nor sequence scoring", backend.model_id()));
    }
    const auto slot = item.masked_text.find(kMaskMarker);
    rec.candidate_logprobs.clear();
    for (const auto& c : candidates) {
      std::string filled = item.masked_text;
      filled.replace(slot, kMaskMarker.size(), c.surface());
      const double score = sequence_score(backend, filled);
      check_finite(score, item.id + " candidate " + c.surface());
      rec.candidate_logprobs[c] = score;
    }
    rec.fallback = true;
  }
  return rec;
}

std::vector<ScoreRecord> score_items(ScorerBackend& backend, std::span<const StimulusItem> items,
                                     std::span<const Auxiliary> candidates, int jobs,
                                     const std::function<void(const ScoreRecord&)>& on_record) {
  std::vector<std::optional<ScoreRecord>> results(items.size());
  std::mutex backend_mutex;
  std::mutex callback_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  const bool serialize = !backend.concurrent_safe();

  auto worker = [&] {
    for (;;) {
      if (failed.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      try {
        ScoreRecord rec;
        if (serialize) {
          std::lock_guard lock(backend_mutex);
          rec = score_item(backend, items[i], candidates);
        } else {
          rec = score_item(backend, items[i], candidates);
        }
        if (on_record) {
          std::lock_guard lock(callback_mutex);
          on_record(rec);
        }
        results[i] = std::move(rec);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
        return;
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(items.size())));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> threads;
    for (int t = 0; t < n_workers; ++t) threads.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);

  std::vector<ScoreRecord> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

std::vector<Token> word_tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (text.substr(i, kMaskMarker.size()) == kMaskMarker) {
      tokens.push_back(Token{std::string(kMaskMarker), i, i + kMaskMarker.size()});
      i += kMaskMarker.size();
      continue;
    }
    if (is_word_char(c)) {
      std::size_t j = i + 1;
      while (j < text.size()) {
        if (is_word_char(text[j])) {
          ++j;
        } else if ((text[j] == '\'' || text[j] == '-') && j + 1 < text.size() &&
                   is_word_char(text[j + 1])) {
          j += 2;
        } else {
          break;
        }
      }
      tokens.push_back(Token{std::string(text.substr(i, j - i)), i, j});
      i = j;
      continue;
    }
    tokens.push_back(Token{std::string(1, c), i, i + 1});
    ++i;
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Records and caches

json record_to_json(const ScoreRecord& r) {
  json j = {
      {"schema_version", kSchemaVersion},
      {"model_id", r.model_id},
      {"item_id", r.item_id},
      {"variant", r.variant},
      {"kind", to_string(r.kind)},
      {"fallback", r.fallback},
      {"input_digest", r.input_digest},
  };
  if (!r.candidate_logprobs.empty()) {
    json lp = json::object();
    for (const auto& [aux, v] : r.candidate_logprobs) lp[aux.surface()] = v;
    j["candidate_logprobs"] = std::move(lp);
  }
  if (r.seq_logprob) j["seq_logprob"] = *r.seq_logprob;
  if (r.n_tokens) j["n_tokens"] = *r.n_tokens;
  return j;
}

ScoreRecord record_from_json(const json& j) {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
      throw DataError(fmt::format("score record schema_version {} (expected {})", version,
                                  kSchemaVersion));
    }
    ScoreRecord r;
    r.model_id = j.at("model_id").get<std::string>();
    r.item_id = j.at("item_id").get<std::string>();
    r.variant = j.at("variant").get<std::string>();
    r.kind = parse_item_kind(j.at("kind").get<std::string>());
    r.fallback = j.value("fallback", false);
    r.input_digest = j.value("input_digest", std::string{});
    if (j.contains("candidate_logprobs")) {
      for (const auto& [aux, v] : j.at("candidate_logprobs").items()) {
        if (!v.is_number()) throw DataError("non-numeric candidate log-probability");
        r.candidate_logprobs[Auxiliary(aux)] = v.get<double>();
      }
    }
    if (j.contains("seq_logprob")) r.seq_logprob = j.at("seq_logprob").get<double>();
    if (j.contains("n_tokens")) {
      r.n_tokens = j.at("n_tokens").get<int>();
      if (*r.n_tokens < 1) throw DataError("n_tokens must be ≥ 1");
    }
    return r;
  } catch (const json::exception& e) {
    throw DataError(fmt::format("malformed score record: {}", e.what()));
  }
}

std::vector<ScoreRecord> read_score_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("{}: cannot open score cache", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string content = buf.str();

  std::vector<ScoreRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::string line = content.substr(pos, terminated ? nl - pos : std::string::npos);
    pos = terminated ? nl + 1 : content.size();
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      // An unterminated final line is an interrupted append.
      if (!terminated) break;
      throw DataError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
  }
  return out;
}

void write_score_cache(const std::vector<ScoreRecord>& records, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("{}: cannot write score cache", tmp.string()));
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
    if (!out) throw DataError(fmt::format("{}: write failed", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

std::unique_ptr<ScorerBackend> make_backend(std::string_view spec, const Lexicon& lexicon) {
  const auto colon = spec.find(':');
  if (colon == std::string_view::npos) {
    throw UsageError(fmt::format(
        "backend spec \"{}\" must be inproc:<id>, proto:<command>, mock:<rules> or replay:<path>",
        spec));
  }
  const auto kind = spec.substr(0, colon);
  const std::string arg(spec.substr(colon + 1));
  if (kind == "mock") return mock_scorer(MockRules::parse(arg), lexicon);
  if (kind == "replay") return std::make_unique<ReplayBackend>(std::filesystem::path(arg));
  if (kind == "proto") {
    if (arg.empty()) throw UsageError("proto backend needs a command");
    return std::make_unique<ProtoBackend>(arg);
  }
  if (kind == "inproc") {
    if (arg == "table-mlm") return std::make_unique<TableMlmBackend>();
    if (arg == "bigram-clm") return std::make_unique<BigramClmBackend>();
    throw UsageError(fmt::format(
        "unknown in-process model \"{}\" (available: table-mlm, bigram-clm)", arg));
  }
  throw UsageError(fmt::format("unknown backend kind \"{}\"", kind));
}

}  // namespace dlgresp
