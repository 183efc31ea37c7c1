#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlgresp/common.hpp"
#include "dlgresp/lexicon.hpp"
#include "dlgresp/stimgen.hpp"
#include "json.hpp"

namespace dlgresp {

enum class Capability : unsigned {
  sequence_logprob = 1u << 0,
  masked_candidates = 1u << 1,
  embeddings = 1u << 2,
  // Per-position masked conditionals, the building block of pseudo-log-likelihood.
  token_conditionals = 1u << 3,
};

class Capabilities {
 public:
  constexpr Capabilities() = default;
  constexpr Capabilities(std::initializer_list<Capability> caps) {
    for (auto c : caps) bits_ |= static_cast<unsigned>(c);
  }
  constexpr bool has(Capability c) const { return (bits_ & static_cast<unsigned>(c)) != 0; }
  std::vector<std::string> names() const;
  static Capabilities from_names(const std::vector<std::string>& names);

 private:
  unsigned bits_ = 0;
};

std::string_view to_string(Capability c);

enum class ModelStyle { masked, causal };
std::string_view to_string(ModelStyle s);

class UnsupportedCapability : public BackendError {
 public:
  using BackendError::BackendError;
};

// A candidate splits into several tokens under the backend's vocabulary.
class MultiTokenCandidate : public BackendError {
 public:
  using BackendError::BackendError;
};

// Replay lookups for a key the cache does not hold.
class CacheMiss : public BackendError {
 public:
  using BackendError::BackendError;
};

/// Payload of one scoring call. item_id/variant are carried for caches and
/// replay; live backends look only at the text fields.
struct ScoreRequest {
  std::string item_id;
  std::string variant;
  std::string text;
  std::string masked_text;
  std::vector<Auxiliary> candidates;
};

struct SequenceScore {
  double total = 0.0;  // natural-log probability summed over content tokens
  int n_tokens = 0;    // content tokens; special markers excluded
  double normalized() const { return total / static_cast<double>(n_tokens); }
};

using CandidateLogprobs = std::map<Auxiliary, double>;

struct Token {
  std::string text;
  std::size_t begin = 0;  // character offsets into the scored text
  std::size_t end = 0;
};

struct TokenEmbedding {
  Token token;
  std::vector<float> vector;
};

struct ScoreRecord {
  std::string model_id;
  std::string item_id;
  std::string variant;
  ItemKind kind = ItemKind::sequence;
  CandidateLogprobs candidate_logprobs;
  std::optional<double> seq_logprob;
  std::optional<int> n_tokens;
  // Candidates were scored as full sequences (normalized) instead of at a mask.
  bool fallback = false;
  std::string input_digest;

  bool operator==(const ScoreRecord&) const = default;
};

nlohmann::json record_to_json(const ScoreRecord& record);
ScoreRecord record_from_json(const nlohmann::json& j);

/// Backend-neutral scoring interface. Calls outside the declared
/// capabilities throw UnsupportedCapability.
class ScorerBackend {
 public:
  virtual ~ScorerBackend() = default;

  virtual std::string model_id() const = 0;
  virtual Capabilities capabilities() const = 0;
  virtual ModelStyle style() const = 0;
  /// Whether concurrent calls are safe; the harness serializes otherwise.
  virtual bool concurrent_safe() const { return false; }

  /// Raw log-probability of request.text: pseudo-log-likelihood for masked
  /// models, the chain-rule sum for causal ones.
  virtual SequenceScore sequence_logprob(const ScoreRequest& request);

  /// Log-probability of each candidate at the single mask in
  /// request.masked_text, with no renormalization over the candidates.
  virtual CandidateLogprobs masked_candidates(const ScoreRequest& request);

  /// Last-layer embeddings of the content tokens of request.text.
  virtual std::vector<TokenEmbedding> embeddings(const ScoreRequest& request);

  /// Content-token segmentation (token_conditionals capability).
  virtual std::vector<Token> tokenize(std::string_view text);

  /// log P(token_i | text with token i masked) for every position, in one batch.
  virtual std::vector<double> masked_token_logprobs(std::string_view text,
                                                    std::span<const Token> tokens);

  /// Single-position variant of masked_token_logprobs.
  virtual double masked_token_logprob(std::string_view text, std::span<const Token> tokens,
                                      std::size_t position);

  /// A previously persisted record for this request, if the backend serves a
  /// cache. The harness returns it verbatim.
  virtual std::optional<ScoreRecord> recorded(const ScoreRequest& request, ItemKind kind);

 protected:
  [[noreturn]] void unsupported(Capability c) const;
};

/// Pseudo-log-likelihood: sum over content positions of the log-probability
/// of the original token with that position masked.
SequenceScore pseudo_log_likelihood(ScorerBackend& backend, std::string_view text);

/// Per-content-token normalized sequence score, in nats.
double sequence_score(ScorerBackend& backend, std::string_view text);

/// Validates the single mask marker before delegating to the backend.
CandidateLogprobs masked_candidate_logprobs(ScorerBackend& backend, std::string_view masked_text,
                                            std::span<const Auxiliary> candidates);

struct Ranking {
  std::vector<Auxiliary> order;  // best first
  bool tie = false;              // some adjacent pair had equal scores
};

/// Orders candidates by descending log-probability; equal scores fall back
/// to lexicographic order and set `tie`.
Ranking rank_candidates(const ScoreRecord& record, std::span<const Auxiliary> candidates);
Ranking rank_candidates(const CandidateLogprobs& scores, std::span<const Auxiliary> candidates);

/// Digest of the inputs a record was computed from.
std::string input_digest(const StimulusItem& item, std::span<const Auxiliary> candidates);

/// Scores one suite item. Masked items fall back to per-candidate
/// normalized sequence scores when the backend cannot score the mask
/// (causal models, or candidates that split into several tokens).
ScoreRecord score_item(ScorerBackend& backend, const StimulusItem& item,
                       std::span<const Auxiliary> candidates);

/// Scores items with up to `jobs` workers. Calls into backends that are not
/// concurrent_safe are serialized. `on_record` is invoked in completion
/// order under a lock; the returned vector is in input order.
std::vector<ScoreRecord> score_items(
    ScorerBackend& backend, std::span<const StimulusItem> items,
    std::span<const Auxiliary> candidates, int jobs = 1,
    const std::function<void(const ScoreRecord&)>& on_record = {});

/// Whitespace/punctuation segmentation used by the built-in backends:
/// alphanumeric runs (with internal apostrophes and hyphens), single
/// punctuation characters, and kMaskMarker as one token.
std::vector<Token> word_tokenize(std::string_view text);

// ---------------------------------------------------------------------------
// Built-in backends

/// Rule table for the deterministic mock. Parsed from comma-separated
/// key=value pairs, e.g. "prefer=main,margin=2" or "order=did>does>is".
struct MockRules {
  enum class Prefer { none, main, embedded, pair, recent };
  Prefer prefer = Prefer::none;
  std::vector<Auxiliary> order;  // context-independent ranking, best first
  bool shuffle = false;          // per-item pseudo-random base ranking
  double margin = 1.0;           // nats added to the preferred candidate(s)
  double token_logprob = -1.0;   // base per-token log-probability
  double reject_bonus = 0.0;     // per-token bonus for "No" responses
  double embedding_noise = 0.05;
  int embedding_dim = 16;
  std::string name;  // model id suffix; defaults to the rule string

  static MockRules parse(std::string_view rules);
};

/// Rule-driven mock that reads the dialogue structure from the text. Needs
/// the lexicon to find which auxiliary elides each context verb phrase.
std::unique_ptr<ScorerBackend> mock_scorer(const MockRules& rules, const Lexicon& lexicon);

/// Masked-LM stand-in whose conditionals come from a (position, token)
/// table, falling back to a hashed value in [-8, -0.5].
class TableMlmBackend : public ScorerBackend {
 public:
  explicit TableMlmBackend(std::uint64_t seed = 0, std::string model_id = "table-mlm");

  void set(std::size_t position, const std::string& token, double logprob);
  double lookup(std::size_t position, const std::string& token) const;

  std::string model_id() const override { return model_id_; }
  Capabilities capabilities() const override;
  ModelStyle style() const override { return ModelStyle::masked; }
  bool concurrent_safe() const override { return true; }

  SequenceScore sequence_logprob(const ScoreRequest& request) override;
  CandidateLogprobs masked_candidates(const ScoreRequest& request) override;
  std::vector<TokenEmbedding> embeddings(const ScoreRequest& request) override;
  std::vector<Token> tokenize(std::string_view text) override;
  double masked_token_logprob(std::string_view text, std::span<const Token> tokens,
                              std::size_t position) override;

 private:
  std::uint64_t seed_;
  std::string model_id_;
  std::map<std::pair<std::size_t, std::string>, double> table_;
};

/// Causal stand-in: log P(token_i | prefix) from a bigram table with a
/// hashed fallback. No masked scoring, so masked items take the fallback path.
class BigramClmBackend : public ScorerBackend {
 public:
  explicit BigramClmBackend(std::uint64_t seed = 0, std::string model_id = "bigram-clm");

  void set(const std::string& previous, const std::string& token, double logprob);
  double lookup(const std::string& previous, const std::string& token) const;

  std::string model_id() const override { return model_id_; }
  Capabilities capabilities() const override;
  ModelStyle style() const override { return ModelStyle::causal; }
  bool concurrent_safe() const override { return true; }

  SequenceScore sequence_logprob(const ScoreRequest& request) override;

  static constexpr std::string_view kBegin = "<s>";

 private:
  std::uint64_t seed_;
  std::string model_id_;
  std::map<std::pair<std::string, std::string>, double> table_;
};

/// Serves records from a score cache file, keyed by (item_id, variant).
class ReplayBackend : public ScorerBackend {
 public:
  explicit ReplayBackend(const std::filesystem::path& cache);
  explicit ReplayBackend(std::vector<ScoreRecord> records);

  std::string model_id() const override { return model_id_; }
  Capabilities capabilities() const override;
  ModelStyle style() const override { return ModelStyle::masked; }
  bool concurrent_safe() const override { return true; }

  SequenceScore sequence_logprob(const ScoreRequest& request) override;
  CandidateLogprobs masked_candidates(const ScoreRequest& request) override;
  std::optional<ScoreRecord> recorded(const ScoreRequest& request, ItemKind kind) override;

  std::size_t size() const { return records_.size(); }

 private:
  const ScoreRecord& find(const ScoreRequest& request) const;

  std::string model_id_;
  std::map<std::pair<std::string, std::string>, ScoreRecord> records_;
};

/// Out-of-process backend speaking the line-delimited JSON protocol over the
/// stdin/stdout of a child process started with `/bin/sh -c command`.
class ProtoBackend : public ScorerBackend {
 public:
  explicit ProtoBackend(const std::string& command);
  ~ProtoBackend() override;
  ProtoBackend(const ProtoBackend&) = delete;
  ProtoBackend& operator=(const ProtoBackend&) = delete;

  std::string model_id() const override { return model_id_; }
  Capabilities capabilities() const override { return capabilities_; }
  ModelStyle style() const override { return style_; }
  bool concurrent_safe() const override { return false; }

  SequenceScore sequence_logprob(const ScoreRequest& request) override;
  CandidateLogprobs masked_candidates(const ScoreRequest& request) override;
  std::vector<TokenEmbedding> embeddings(const ScoreRequest& request) override;

 private:
  nlohmann::json call(const nlohmann::json& request);

  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
  std::string model_id_;
  Capabilities capabilities_;
  ModelStyle style_ = ModelStyle::masked;
};

/// Answers protocol requests read from `in` using `backend` until EOF or a
/// shutdown request. Returns the number of requests served.
std::size_t serve_protocol(ScorerBackend& backend, std::istream& in, std::ostream& out);

/// Handles one decoded protocol request.
nlohmann::json handle_protocol_request(ScorerBackend& backend, const nlohmann::json& request);

/// Builds a backend from `inproc:<id>`, `proto:<command>`, `mock:<rules>` or
/// `replay:<path>`.
std::unique_ptr<ScorerBackend> make_backend(std::string_view spec, const Lexicon& lexicon);

/// Reads a score cache; a truncated final line (interrupted write) is ignored.
std::vector<ScoreRecord> read_score_cache(const std::filesystem::path& path);
void write_score_cache(const std::vector<ScoreRecord>& records, const std::filesystem::path& path);

}  // namespace dlgresp
