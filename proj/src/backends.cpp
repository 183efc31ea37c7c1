#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "dlgresp/scoring.hpp"

namespace dlgresp {

namespace {

double parse_double(std::string_view key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size() || !std::isfinite(v)) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw UsageError(fmt::format("mock rules: {} expects a number, got \"{}\"", key, value));
  }
}

double hashed_logprob(std::uint64_t seed, std::string_view key) {
  const std::uint64_t h = mix_seed(seed, fnv1a(key));
  return -0.5 - 7.5 * static_cast<double>(h % 10000) / 9999.0;
}

// Structure recovered from a rendered dialogue.
struct ParsedDialogue {
  std::size_t context_begin = 0;  // first character inside the opening quote
  std::size_t context_end = 0;    // closing quote of the first turn
  std::size_t vp1_begin = 0, vp1_end = 0;
  std::size_t vp2_begin = 0, vp2_end = 0;
  std::size_t arc_begin = std::string::npos, arc_end = std::string::npos;
  Auxiliary vp1_aux;  // earlier phrase: embedded / distant
  Auxiliary vp2_aux;  // later phrase: main / recent
  Header header = Header::reject;
  std::optional<Auxiliary> response_aux;
};

class RuleMockBackend final : public ScorerBackend {
 public:
  RuleMockBackend(MockRules rules, const Lexicon& lexicon)
      : rules_(std::move(rules)), lexicon_(lexicon) {}

  std::string model_id() const override { return "mock:" + rules_.name; }
  Capabilities capabilities() const override {
    return {Capability::sequence_logprob, Capability::masked_candidates, Capability::embeddings};
  }
  ModelStyle style() const override { return ModelStyle::masked; }
  bool concurrent_safe() const override { return true; }

  SequenceScore sequence_logprob(const ScoreRequest& request) override {
    const auto tokens = word_tokenize(request.text);
    if (tokens.empty()) throw BackendError("mock: empty text");
    const auto d = parse(request.text);
    const double n = static_cast<double>(tokens.size());
    double total = n * rules_.token_logprob;
    if (d.header == Header::reject) total += n * rules_.reject_bonus;
    if (d.response_aux) {
      const auto scores = raw_scores(d, lexicon_.auxiliaries(), request.text);
      if (auto it = scores.find(*d.response_aux); it != scores.end()) total += it->second;
    }
    return SequenceScore{total, static_cast<int>(tokens.size())};
  }

  CandidateLogprobs masked_candidates(const ScoreRequest& request) override {
    const auto d = parse(request.masked_text);
    for (const auto& c : request.candidates) {
      if (word_tokenize(c.surface()).size() != 1) {
        throw MultiTokenCandidate(fmt::format("mock: candidate \"{}\" is not one token",
                                              c.surface()));
      }
    }
    auto scores = raw_scores(d, request.candidates, request.masked_text);
    // Log-softmax over the offered candidates.
    double max_score = -std::numeric_limits<double>::infinity();
    for (const auto& [aux, s] : scores) max_score = std::max(max_score, s);
    double z = 0.0;
    for (const auto& [aux, s] : scores) z += std::exp(s - max_score);
    const double log_z = max_score + std::log(z);
    for (auto& [aux, s] : scores) s -= log_z;
    return scores;
  }

  std::vector<TokenEmbedding> embeddings(const ScoreRequest& request) override {
    const auto d = parse(request.text);
    const auto tokens = word_tokenize(request.text);
    const int dim = rules_.embedding_dim;
    std::vector<TokenEmbedding> out;
    out.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto& tok = tokens[i];
      const std::size_t mid = tok.begin + (tok.end - tok.begin - 1) / 2;
      int cluster = 0;  // neither
      const bool punctuation = tok.end - tok.begin == 1 && !std::isalnum(
          static_cast<unsigned char>(request.text[tok.begin]));
      if (mid >= d.context_begin && mid < d.context_end && !punctuation) {
        const bool in_arc = d.arc_begin != std::string::npos && mid >= d.arc_begin &&
                            mid < d.arc_end;
        cluster = in_arc ? 1 : 2;
      }
      Rng rng(mix_seed(fnv1a(tok.text), i));
      TokenEmbedding te{tok, std::vector<float>(static_cast<std::size_t>(dim))};
      for (int k = 0; k < dim; ++k) {
        te.vector[static_cast<std::size_t>(k)] =
            static_cast<float>(rules_.embedding_noise * rng.normal());
      }
      te.vector[static_cast<std::size_t>(cluster)] += 1.0f;
      out.push_back(std::move(te));
    }
    return out;
  }

 private:
  std::map<Auxiliary, double> raw_scores(const ParsedDialogue& d,
                                         std::span<const Auxiliary> candidates,
                                         std::string_view text) const {
    std::vector<Auxiliary> ranked(candidates.begin(), candidates.end());
    std::sort(ranked.begin(), ranked.end());
    if (!rules_.order.empty()) {
      std::stable_sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
        return order_rank(a) < order_rank(b);
      });
    } else if (rules_.shuffle) {
      Rng rng(fnv1a(text));
      rng.shuffle(ranked);
    }
    std::map<Auxiliary, double> scores;
    const bool flat = rules_.order.empty() && !rules_.shuffle;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      scores[ranked[r]] = flat ? -1.0 : -1.0 - static_cast<double>(r);
    }
    double top = -std::numeric_limits<double>::infinity();
    for (const auto& [aux, s] : scores) top = std::max(top, s);
    auto boost = [&](const Auxiliary& aux, double amount) {
      if (auto it = scores.find(aux); it != scores.end()) it->second = top + amount;
    };
    switch (rules_.prefer) {
      case MockRules::Prefer::main:
      case MockRules::Prefer::recent:
        boost(d.vp2_aux, rules_.margin);
        break;
      case MockRules::Prefer::embedded:
        boost(d.vp1_aux, rules_.margin);
        break;
      case MockRules::Prefer::pair:
        boost(d.vp2_aux, 2.0 * rules_.margin);
        boost(d.vp1_aux, rules_.margin);
        break;
      case MockRules::Prefer::none:
        break;
    }
    return scores;
  }

  std::size_t order_rank(const Auxiliary& a) const {
    auto it = std::find(rules_.order.begin(), rules_.order.end(), a);
    return static_cast<std::size_t>(it - rules_.order.begin());
  }

  ParsedDialogue parse(std::string_view text) const {
    ParsedDialogue d;
    const auto open = text.find('"');
    const auto close = open == std::string_view::npos ? open : text.find('"', open + 1);
    if (close == std::string_view::npos) {
      throw BackendError("mock: cannot find the quoted context in the input");
    }
    d.context_begin = open + 1;
    d.context_end = close;
    const auto context = text.substr(d.context_begin, close - d.context_begin);

    struct Match {
      std::size_t begin, end;
      Auxiliary aux;
    };
    std::vector<Match> matches;
    for (const auto& [aux, entries] : lexicon_.all_verb_phrases()) {
      for (const auto& e : entries) {
        for (auto pos = context.find(e.text); pos != std::string_view::npos;
             pos = context.find(e.text, pos + 1)) {
          matches.push_back(Match{pos, pos + e.text.size(), aux});
        }
      }
    }
    // Keep maximal matches: longer phrases win over phrases they contain.
    std::sort(matches.begin(), matches.end(), [](const Match& a, const Match& b) {
      if (a.begin != b.begin) return a.begin < b.begin;
      return a.end > b.end;
    });
    std::vector<Match> kept;
    for (const auto& m : matches) {
      if (!kept.empty() && m.begin < kept.back().end) continue;
      kept.push_back(m);
    }
    if (kept.size() != 2) {
      throw BackendError(fmt::format("mock: expected two lexicon verb phrases in context, found {}",
                                     kept.size()));
    }
    d.vp1_begin = d.context_begin + kept[0].begin;
    d.vp1_end = d.context_begin + kept[0].end;
    d.vp2_begin = d.context_begin + kept[1].begin;
    d.vp2_end = d.context_begin + kept[1].end;
    d.vp1_aux = kept[0].aux;
    d.vp2_aux = kept[1].aux;

    const auto who = context.find(", who ");
    if (who != std::string_view::npos) {
      d.arc_begin = d.context_begin + who + 2;
      d.arc_end = d.vp1_end;
    }

    const auto response = text.substr(close + 1);
    const auto quote = response.find('"');
    const auto reply = quote == std::string_view::npos ? response : response.substr(quote + 1);
    d.header = reply.starts_with("Wait no") ? Header::wait : Header::reject;
    const auto not_pos = reply.rfind(" not.");
    if (not_pos != std::string_view::npos) {
      const auto space = reply.rfind(' ', not_pos - 1);
      if (space != std::string_view::npos) {
        const auto word = reply.substr(space + 1, not_pos - space - 1);
        if (word != kMaskMarker) d.response_aux = Auxiliary(std::string(word));
      }
    }
    return d;
  }

  MockRules rules_;
  const Lexicon& lexicon_;
};

}  // namespace

MockRules MockRules::parse(std::string_view rules) {
  MockRules out;
  out.name = std::string(rules);
  std::size_t pos = 0;
  while (pos <= rules.size()) {
    auto comma = rules.find(',', pos);
    if (comma == std::string_view::npos) comma = rules.size();
    const std::string item = trim(rules.substr(pos, comma - pos));
    pos = comma + 1;
    if (item.empty()) continue;
    const auto eq = item.find('=');
    const std::string key = eq == std::string::npos ? item : item.substr(0, eq);
    const std::string value = eq == std::string::npos ? "" : item.substr(eq + 1);
    if (key == "uniform") {
      out.prefer = Prefer::none;
    } else if (key == "shuffle") {
      out.shuffle = true;
    } else if (key == "prefer") {
      if (value == "main") out.prefer = Prefer::main;
      else if (value == "embedded") out.prefer = Prefer::embedded;
      else if (value == "pair") out.prefer = Prefer::pair;
      else if (value == "recent") out.prefer = Prefer::recent;
      else if (value == "none") out.prefer = Prefer::none;
      else throw UsageError(fmt::format("mock rules: unknown prefer value \"{}\"", value));
    } else if (key == "order") {
      std::size_t p = 0;
      while (p <= value.size()) {
        auto gt = value.find('>', p);
        if (gt == std::string::npos) gt = value.size();
        const std::string aux = trim(std::string_view(value).substr(p, gt - p));
        if (aux.empty()) throw UsageError("mock rules: empty auxiliary in order");
        if (std::find(out.order.begin(), out.order.end(), Auxiliary(aux)) != out.order.end()) {
          throw UsageError(fmt::format("mock rules: \"{}\" repeated in order", aux));
        }
        out.order.emplace_back(aux);
        p = gt + 1;
      }
    } else if (key == "margin") {
      out.margin = parse_double(key, value);
      if (out.margin < 0) throw UsageError("mock rules: margin must be non-negative");
    } else if (key == "token_logprob") {
      out.token_logprob = parse_double(key, value);
    } else if (key == "reject_bonus") {
      out.reject_bonus = parse_double(key, value);
    } else if (key == "noise") {
      out.embedding_noise = parse_double(key, value);
    } else if (key == "dim") {
      out.embedding_dim = static_cast<int>(parse_double(key, value));
      if (out.embedding_dim < 3) throw UsageError("mock rules: dim must be ≥ 3");
    } else if (key == "name") {
      out.name = value;
    } else {
      throw UsageError(fmt::format("mock rules: unknown key \"{}\"", key));
    }
  }
  if (out.name.empty()) out.name = "default";
  return out;
}

std::unique_ptr<ScorerBackend> mock_scorer(const MockRules& rules, const Lexicon& lexicon) {
  return std::make_unique<RuleMockBackend>(rules, lexicon);
}

// ---------------------------------------------------------------------------
// TableMlmBackend

TableMlmBackend::TableMlmBackend(std::uint64_t seed, std::string model_id)
    : seed_(seed), model_id_(std::move(model_id)) {}

void TableMlmBackend::set(std::size_t position, const std::string& token, double logprob) {
  table_[{position, token}] = logprob;
}

double TableMlmBackend::lookup(std::size_t position, const std::string& token) const {
  if (auto it = table_.find({position, token}); it != table_.end()) return it->second;
  return hashed_logprob(seed_, fmt::format("{}\x1f{}", position, token));
}

Capabilities TableMlmBackend::capabilities() const {
  return {Capability::sequence_logprob, Capability::masked_candidates, Capability::embeddings,
          Capability::token_conditionals};
}

SequenceScore TableMlmBackend::sequence_logprob(const ScoreRequest& request) {
  return pseudo_log_likelihood(*this, request.text);
}

std::vector<Token> TableMlmBackend::tokenize(std::string_view text) { return word_tokenize(text); }

double TableMlmBackend::masked_token_logprob(std::string_view, std::span<const Token> tokens,
                                             std::size_t position) {
  if (position >= tokens.size()) throw BackendError("table-mlm: position out of range");
  return lookup(position, tokens[position].text);
}

CandidateLogprobs TableMlmBackend::masked_candidates(const ScoreRequest& request) {
  const auto tokens = word_tokenize(request.masked_text);
  std::optional<std::size_t> slot;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].text == kMaskMarker) slot = i;
  }
  if (!slot) throw BackendError("table-mlm: no mask in input");
  CandidateLogprobs out;
  for (const auto& c : request.candidates) {
    const auto pieces = word_tokenize(c.surface());
    if (pieces.size() != 1) {
      throw MultiTokenCandidate(fmt::format("table-mlm: \"{}\" is {} tokens", c.surface(),
                                            pieces.size()));
    }
    out[c] = lookup(*slot, c.surface());
  }
  return out;
}

std::vector<TokenEmbedding> TableMlmBackend::embeddings(const ScoreRequest& request) {
  std::vector<TokenEmbedding> out;
  const auto tokens = word_tokenize(request.text);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    Rng rng(mix_seed(seed_, fnv1a(fmt::format("{}\x1f{}", i, tokens[i].text))));
    TokenEmbedding te{tokens[i], std::vector<float>(8)};
    for (auto& v : te.vector) v = static_cast<float>(rng.normal());
    out.push_back(std::move(te));
  }
  return out;
}

// ---------------------------------------------------------------------------
// BigramClmBackend

BigramClmBackend::BigramClmBackend(std::uint64_t seed, std::string model_id)
    : seed_(seed), model_id_(std::move(model_id)) {}

void BigramClmBackend::set(const std::string& previous, const std::string& token, double logprob) {
  table_[{previous, token}] = logprob;
}

double BigramClmBackend::lookup(const std::string& previous, const std::string& token) const {
  if (auto it = table_.find({previous, token}); it != table_.end()) return it->second;
  return hashed_logprob(seed_, previous + "\x1f" + token);
}

Capabilities BigramClmBackend::capabilities() const { return {Capability::sequence_logprob}; }

SequenceScore BigramClmBackend::sequence_logprob(const ScoreRequest& request) {
  const auto tokens = word_tokenize(request.text);
  if (tokens.empty()) throw BackendError("bigram-clm: empty text");
  SequenceScore s;
  std::string previous(kBegin);
  for (const auto& t : tokens) {
    s.total += lookup(previous, t.text);
    previous = t.text;
  }
  s.n_tokens = static_cast<int>(tokens.size());
  return s;
}

// ---------------------------------------------------------------------------
// ReplayBackend

ReplayBackend::ReplayBackend(const std::filesystem::path& cache)
    : ReplayBackend(read_score_cache(cache)) {}

ReplayBackend::ReplayBackend(std::vector<ScoreRecord> records) {
  for (auto& r : records) {
    if (model_id_.empty()) model_id_ = r.model_id;
    if (r.model_id != model_id_) {
      throw DataError(fmt::format("score cache mixes models \"{}\" and \"{}\"", model_id_,
                                  r.model_id));
    }
    auto key = std::make_pair(r.item_id, r.variant);
    records_.insert_or_assign(std::move(key), std::move(r));
  }
  if (model_id_.empty()) model_id_ = "replay:empty";
}

Capabilities ReplayBackend::capabilities() const {
  return {Capability::sequence_logprob, Capability::masked_candidates};
}

const ScoreRecord& ReplayBackend::find(const ScoreRequest& request) const {
  auto it = records_.find({request.item_id, request.variant});
  if (it == records_.end()) {
    throw CacheMiss(fmt::format("cache miss: no score for item \"{}\" variant \"{}\"",
                                request.item_id, request.variant));
  }
  return it->second;
}

SequenceScore ReplayBackend::sequence_logprob(const ScoreRequest& request) {
  const auto& r = find(request);
  if (!r.seq_logprob || !r.n_tokens) {
    throw CacheMiss(fmt::format("cache miss: item \"{}\" variant \"{}\" has no sequence score",
                                request.item_id, request.variant));
  }
  return SequenceScore{*r.seq_logprob, *r.n_tokens};
}

CandidateLogprobs ReplayBackend::masked_candidates(const ScoreRequest& request) {
  const auto& r = find(request);
  CandidateLogprobs out;
  for (const auto& c : request.candidates) {
    auto it = r.candidate_logprobs.find(c);
    if (it == r.candidate_logprobs.end()) {
      throw CacheMiss(fmt::format("cache miss: item \"{}\" variant \"{}\" has no score for \"{}\"",
                                  request.item_id, request.variant, c.surface()));
    }
    out.emplace(c, it->second);
  }
  return out;
}

std::optional<ScoreRecord> ReplayBackend::recorded(const ScoreRequest& request, ItemKind) {
  return find(request);
}

}  // namespace dlgresp
