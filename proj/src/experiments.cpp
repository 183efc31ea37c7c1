#include "dlgresp/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace dlgresp {

using nlohmann::json;

namespace {

constexpr std::pair<std::string_view, Experiment> kExperimentNames[] = {
    {"header", Experiment::header},
    {"rejection", Experiment::rejection},
    {"conjunction", Experiment::conjunction},
    {"top1", Experiment::ellipsis_top1},
    {"top2", Experiment::ellipsis_top2},
};

// Human reference lines from Syrett & Koev (2015).
constexpr double kHumanNoHeaderMainClause = 0.50;  // reported only as "roughly even"
constexpr double kHumanNoHeaderArc = 0.23;
constexpr double kHumanRejectTargetsAtIssue = 0.789;
constexpr double kChance = 0.5;

void add_outcome(ExperimentResult& result, ComparisonOutcome outcome) {
  auto& tally = result.groups[outcome.group];
  tally.successes += outcome.credit;
  tally.n += 1;
  if (outcome.winner == Winner::tie) tally.ties += 1;
  result.per_item.push_back(std::move(outcome));
}

ComparisonOutcome pairwise(const StimulusItem& item, std::string group, double margin,
                           double epsilon) {
  ComparisonOutcome o;
  o.item_id = item.id;
  o.variant = item.variant;
  o.group = std::move(group);
  o.margin = margin;
  if (std::fabs(margin) <= epsilon) {
    o.winner = Winner::tie;
    o.credit = 0.5;
  } else if (margin > 0) {
    o.winner = Winner::a;
    o.credit = 1.0;
  } else {
    o.winner = Winner::b;
    o.credit = 0.0;
  }
  return o;
}

double normalized_sequence(const ScoreRecord& r) {
  if (!r.seq_logprob || !r.n_tokens || *r.n_tokens < 1) {
    throw DataError(fmt::format("score for {} / {} has no sequence log-probability", r.item_id,
                                r.variant));
  }
  return *r.seq_logprob / static_cast<double>(*r.n_tokens);
}

double candidate_score(const ScoreRecord& r, const Auxiliary& aux) {
  auto it = r.candidate_logprobs.find(aux);
  if (it == r.candidate_logprobs.end()) {
    throw DataError(fmt::format("score for {} / {} lacks candidate \"{}\"", r.item_id, r.variant,
                                aux.surface()));
  }
  return it->second;
}

void require_mode(const Suite& suite, Mode mode, Experiment e) {
  for (const auto& item : suite.items) {
    if (item.context.mode != mode) {
      throw DataError(fmt::format("{} test needs a {} suite, got item {}", to_string(e),
                                  to_string(mode), item.id));
    }
  }
}

std::vector<const StimulusItem*> masked_items(const Suite& suite) {
  std::vector<const StimulusItem*> out;
  for (const auto& item : suite.items) {
    if (item.kind == ItemKind::masked) out.push_back(&item);
  }
  if (out.empty()) throw DataError("suite contains no masked instances");
  return out;
}

ExperimentResult pairwise_masked(Experiment e, const Suite& suite, const ScoreIndex& scores,
                                 const ExperimentOptions& options) {
  ExperimentResult result;
  result.experiment = e;
  for (const auto* item : masked_items(suite)) {
    const auto& rec = scores.at(item->id, item->variant);
    // main_aux targets the main clause (arc) or the more recent conjunct.
    const double margin = candidate_score(rec, item->context.pair.main) -
                          candidate_score(rec, item->context.pair.embedded);
    add_outcome(result, pairwise(*item, std::string(to_string(item->header)), margin,
                                 options.tie_epsilon));
  }
  return result;
}

void require_candidates(const ExperimentOptions& options, Experiment e) {
  if (options.candidates.size() < 2) {
    throw DataError(fmt::format("{} test needs the full candidate set", to_string(e)));
  }
}

ExperimentResult top_k(Experiment e, int k, const Suite& suite, const ScoreIndex& scores,
                       const ExperimentOptions& options) {
  require_mode(suite, Mode::arc, e);
  require_candidates(options, e);
  ExperimentResult result;
  result.experiment = e;
  for (const auto* item : masked_items(suite)) {
    const auto& rec = scores.at(item->id, item->variant);
    const auto& main = item->context.pair.main;
    const auto& embedded = item->context.pair.embedded;
    const auto ranking = rank_candidates(rec, options.candidates);

    std::vector<Auxiliary> correct;
    if (k == 1) {
      correct = item->header == Header::reject ? std::vector{main}
                                               : std::vector{main, embedded};
    } else {
      correct = {main, embedded};
    }
    auto in_correct = [&](const Auxiliary& a) {
      return std::find(correct.begin(), correct.end(), a) != correct.end();
    };

    bool ok;
    double margin;
    double best_outside = -std::numeric_limits<double>::infinity();
    for (const auto& c : options.candidates) {
      if (!in_correct(c)) best_outside = std::max(best_outside, candidate_score(rec, c));
    }
    if (k == 1) {
      ok = in_correct(ranking.order.front());
      double best_inside = -std::numeric_limits<double>::infinity();
      for (const auto& c : correct) best_inside = std::max(best_inside, candidate_score(rec, c));
      margin = best_inside - best_outside;
    } else {
      ok = in_correct(ranking.order[0]) && in_correct(ranking.order[1]);
      margin = std::min(candidate_score(rec, main), candidate_score(rec, embedded)) - best_outside;
    }

    ComparisonOutcome o;
    o.item_id = item->id;
    o.variant = item->variant;
    o.group = std::string(to_string(item->header));
    o.margin = margin;
    o.credit = ok ? 1.0 : 0.0;
    if (std::fabs(margin) <= options.tie_epsilon) {
      o.winner = Winner::tie;
    } else {
      o.winner = margin > 0 ? Winner::a : Winner::b;
    }
    add_outcome(result, std::move(o));
  }
  return result;
}

json tally_to_json(const GroupTally& t, double level) {
  json j = {{"successes", t.successes}, {"n", t.n}, {"ties", t.ties}};
  if (t.n > 0) {
    const auto p = stats::wilson_ci(t.successes, t.n, level);
    j["estimate"] = p.estimate;
    j["ci_low"] = p.ci_low;
    j["ci_high"] = p.ci_high;
    j["level"] = p.level;
  }
  return j;
}

}  // namespace

std::string_view to_string(Experiment e) {
  for (const auto& [name, value] : kExperimentNames) {
    if (value == e) return name;
  }
  return "?";
}

Experiment parse_experiment(std::string_view s) {
  for (const auto& [name, value] : kExperimentNames) {
    if (name == s) return value;
  }
  if (s == "ellipsis_top1") return Experiment::ellipsis_top1;
  if (s == "ellipsis_top2") return Experiment::ellipsis_top2;
  throw UsageError(fmt::format("unknown experiment \"{}\"", s));
}

std::string_view to_string(Winner w) {
  switch (w) {
    case Winner::a: return "a";
    case Winner::b: return "b";
    case Winner::tie: return "tie";
  }
  return "?";
}

std::size_t ExperimentResult::total_n() const {
  std::size_t n = 0;
  for (const auto& [g, t] : groups) n += static_cast<std::size_t>(t.n);
  return n;
}

ScoreIndex::ScoreIndex(std::span<const ScoreRecord> records) {
  for (const auto& r : records) add(r);
}

void ScoreIndex::add(ScoreRecord record) {
  auto key = std::make_pair(record.item_id, record.variant);
  records_.insert_or_assign(std::move(key), std::move(record));
}

const ScoreRecord* ScoreIndex::find(const std::string& item_id, const std::string& variant) const {
  auto it = records_.find({item_id, variant});
  return it == records_.end() ? nullptr : &it->second;
}

const ScoreRecord& ScoreIndex::at(const std::string& item_id, const std::string& variant) const {
  if (const auto* r = find(item_id, variant)) return *r;
  throw DataError(fmt::format("missing score for item \"{}\" variant \"{}\"", item_id, variant));
}

Mode mode_for(Experiment experiment) {
  return experiment == Experiment::conjunction ? Mode::conjunction : Mode::arc;
}

std::vector<StimulusItem> items_for(Experiment experiment, const Suite& suite) {
  const ItemKind kind = experiment == Experiment::header ? ItemKind::sequence : ItemKind::masked;
  std::vector<StimulusItem> out;
  for (const auto& item : suite.items) {
    if (item.kind == kind) out.push_back(item);
  }
  return out;
}

ExperimentResult run_header_test(const Suite& suite, const ScoreIndex& scores,
                                 const ExperimentOptions& options) {
  std::map<std::pair<std::string, std::string>, const StimulusItem*> by_key;
  for (const auto& item : suite.items) {
    if (item.kind == ItemKind::sequence) by_key[{item.id, item.variant}] = &item;
  }
  if (by_key.empty()) throw DataError("header test: suite has no fully rendered variants");

  ExperimentResult result;
  result.experiment = Experiment::header;
  for (const auto& item : suite.items) {
    if (item.kind != ItemKind::sequence || item.header != Header::reject) continue;
    const std::string target(to_string(item.target));
    const std::string wait_variant = "wait-" + target;
    auto it = by_key.find({item.id, wait_variant});
    if (it == by_key.end()) {
      throw DataError(fmt::format("header test: item {} has no {} variant", item.id, wait_variant));
    }
    const double margin = normalized_sequence(scores.at(item.id, item.variant)) -
                          normalized_sequence(scores.at(item.id, wait_variant));
    add_outcome(result, pairwise(item, target, margin, options.tie_epsilon));
  }
  if (suite.config.mode == Mode::arc) {
    result.references["main"] = {kHumanNoHeaderMainClause, "human (approx.)", true};
    result.references["embedded"] = {kHumanNoHeaderArc, "human", false};
  }
  return result;
}

ExperimentResult run_rejection_test(const Suite& suite, const ScoreIndex& scores,
                                    const ExperimentOptions& options) {
  require_mode(suite, Mode::arc, Experiment::rejection);
  auto result = pairwise_masked(Experiment::rejection, suite, scores, options);
  result.references["reject"] = {kHumanRejectTargetsAtIssue, "human", false};

  std::vector<double> reject, wait;
  for (const auto& o : result.per_item) {
    (o.group == "reject" ? reject : wait).push_back(o.credit);
  }
  try {
    result.header_contrast = stats::one_sided_welch_t(reject, wait);
  } catch (const DataError& e) {
    result.header_contrast_note = e.what();
  }
  return result;
}

ExperimentResult run_conjunction_test(const Suite& suite, const ScoreIndex& scores,
                                      const ExperimentOptions& options) {
  require_mode(suite, Mode::conjunction, Experiment::conjunction);
  auto result = pairwise_masked(Experiment::conjunction, suite, scores, options);
  for (Header h : kHeaders) result.references[std::string(to_string(h))] = {kChance, "chance", false};
  return result;
}

ExperimentResult run_ellipsis_top1(const Suite& suite, const ScoreIndex& scores,
                                   const ExperimentOptions& options) {
  return top_k(Experiment::ellipsis_top1, 1, suite, scores, options);
}

ExperimentResult run_ellipsis_top2(const Suite& suite, const ScoreIndex& scores,
                                   const ExperimentOptions& options) {
  return top_k(Experiment::ellipsis_top2, 2, suite, scores, options);
}

ExperimentResult run_experiment(Experiment experiment, const Suite& suite,
                                const ScoreIndex& scores, const ExperimentOptions& options) {
  switch (experiment) {
    case Experiment::header: return run_header_test(suite, scores, options);
    case Experiment::rejection: return run_rejection_test(suite, scores, options);
    case Experiment::conjunction: return run_conjunction_test(suite, scores, options);
    case Experiment::ellipsis_top1: return run_ellipsis_top1(suite, scores, options);
    case Experiment::ellipsis_top2: return run_ellipsis_top2(suite, scores, options);
  }
  throw UsageError("unknown experiment");
}

ExperimentResult run_experiment(Experiment experiment, const Suite& suite, ScorerBackend& backend,
                                const ExperimentOptions& options) {
  const auto items = items_for(experiment, suite);
  const auto records = score_items(backend, items, options.candidates);
  return run_experiment(experiment, suite, ScoreIndex(records), options);
}

ErrorDistribution error_distribution(const ExperimentResult& result, const Suite& suite,
                                     const ScoreIndex& scores, std::span<const Auxiliary> candidates,
                                     int k) {
  if (k != 1 && k != 2) throw UsageError("error_distribution: k must be 1 or 2");
  const Experiment expected = k == 1 ? Experiment::ellipsis_top1 : Experiment::ellipsis_top2;
  if (result.experiment != expected) {
    throw UsageError(fmt::format("error_distribution(k={}) needs a {} result", k,
                                 to_string(expected)));
  }
  std::map<std::pair<std::string, std::string>, const StimulusItem*> by_key;
  for (const auto& item : suite.items) by_key[{item.id, item.variant}] = &item;

  ErrorDistribution dist;
  dist.k = k;
  for (const auto& o : result.per_item) {
    if (o.credit > 0.0) continue;
    auto it = by_key.find({o.item_id, o.variant});
    if (it == by_key.end()) {
      throw DataError(fmt::format("error_distribution: item {} / {} not in suite", o.item_id,
                                  o.variant));
    }
    const auto& item = *it->second;
    const auto ranking = rank_candidates(scores.at(o.item_id, o.variant), candidates);
    dist.erroneous_items[o.group] += 1;
    for (int r = 0; r < k; ++r) {
      const auto& aux = ranking.order[static_cast<std::size_t>(r)];
      if (aux == item.context.pair.main || aux == item.context.pair.embedded) {
        if (k == 1 && aux == item.context.pair.embedded) dist.embedded_wins[o.group] += 1;
        continue;
      }
      dist.counts[o.group][aux] += 1;
    }
  }
  for (const auto& [header, counts] : dist.counts) {
    double total = 0.0;
    for (const auto& [aux, c] : counts) total += c;
    for (const auto& [aux, c] : counts) dist.proportions[header][aux] = c / total;
  }
  return dist;
}

VerbBreakdown verb_breakdown(const ExperimentResult& rejection, const Suite& suite) {
  if (rejection.experiment != Experiment::rejection) {
    throw UsageError("verb_breakdown needs a rejection result");
  }
  std::map<std::pair<std::string, std::string>, const StimulusItem*> by_key;
  for (const auto& item : suite.items) by_key[{item.id, item.variant}] = &item;

  VerbBreakdown vb;
  for (const auto& o : rejection.per_item) {
    auto it = by_key.find({o.item_id, o.variant});
    if (it == by_key.end()) {
      throw DataError(fmt::format("verb_breakdown: item {} / {} not in suite", o.item_id,
                                  o.variant));
    }
    const auto& pair = it->second->context.pair;
    for (const auto& [grouping, aux] :
         {std::pair<std::string, Auxiliary>{"embedded", pair.embedded}, {"main", pair.main}}) {
      auto& t = vb.cells[grouping][aux][o.group];
      t.successes += o.credit;
      t.n += 1;
      if (o.winner == Winner::tie) t.ties += 1;
    }
  }
  return vb;
}

json result_to_json(const ExperimentResult& result, double ci_level) {
  json groups = json::object();
  for (const auto& [g, t] : result.groups) groups[g] = tally_to_json(t, ci_level);
  json refs = json::object();
  for (const auto& [g, r] : result.references) {
    refs[g] = {{"value", r.value}, {"label", r.label}, {"approximate", r.approximate}};
  }
  json items = json::array();
  for (const auto& o : result.per_item) {
    items.push_back({{"item_id", o.item_id},
                     {"variant", o.variant},
                     {"group", o.group},
                     {"winner", to_string(o.winner)},
                     {"margin", o.margin},
                     {"credit", o.credit}});
  }
  json j = {{"experiment", to_string(result.experiment)},
            {"groups", std::move(groups)},
            {"references", std::move(refs)},
            {"per_item", std::move(items)}};
  if (result.header_contrast) {
    const auto& t = *result.header_contrast;
    j["header_contrast"] = {{"t", t.t},
                            {"df", t.df},
                            {"p_one_sided", t.p_one_sided},
                            {"mean_a", t.mean_a},
                            {"mean_b", t.mean_b},
                            {"direction", "reject > wait"}};
  } else if (!result.header_contrast_note.empty()) {
    j["header_contrast_note"] = result.header_contrast_note;
  }
  return j;
}

json errors_to_json(const ErrorDistribution& errors) {
  json j = {{"k", errors.k}};
  json by_header = json::object();
  for (Header h : kHeaders) {
    const std::string header(to_string(h));
    json counts = json::object();
    json props = json::object();
    if (auto it = errors.counts.find(header); it != errors.counts.end()) {
      for (const auto& [aux, c] : it->second) counts[aux.surface()] = c;
    }
    if (auto it = errors.proportions.find(header); it != errors.proportions.end()) {
      for (const auto& [aux, p] : it->second) props[aux.surface()] = p;
    }
    auto count_of = [&](const std::map<std::string, int>& m) {
      auto it = m.find(header);
      return it == m.end() ? 0 : it->second;
    };
    by_header[header] = {{"intruder_counts", std::move(counts)},
                         {"intruder_proportions", std::move(props)},
                         {"erroneous_items", count_of(errors.erroneous_items)},
                         {"embedded_wins", count_of(errors.embedded_wins)}};
  }
  j["headers"] = std::move(by_header);
  return j;
}

json breakdown_to_json(const VerbBreakdown& breakdown, double ci_level) {
  json j = json::object();
  for (const auto& [grouping, by_aux] : breakdown.cells) {
    json g = json::object();
    for (const auto& [aux, by_header] : by_aux) {
      json a = json::object();
      for (const auto& [header, t] : by_header) a[header] = tally_to_json(t, ci_level);
      g[aux.surface()] = std::move(a);
    }
    j[grouping] = std::move(g);
  }
  return j;
}

}  // namespace dlgresp
