#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <string>

#include "doctest.h"
#include "dlgresp/experiments.hpp"
#include "support.hpp"

using namespace dlgresp;

namespace {

Suite small_suite(Mode mode, int n_per_pair = 2, std::uint64_t seed = 5) {
  auto cfg = SuiteConfig::defaults(mode);
  cfg.n_per_pair = n_per_pair;
  cfg.seed = seed;
  return build_suite(default_lexicon(), cfg);
}

// Random log-probabilities for every instance of a suite. Values sit on a
// coarse grid so ties occur.
ScoreIndex random_scores(const Suite& suite, std::uint64_t seed, int grid = 4) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> pick(0, grid);
  ScoreIndex idx;
  for (const auto& item : suite.items) {
    ScoreRecord r;
    r.model_id = "random";
    r.item_id = item.id;
    r.variant = item.variant;
    r.kind = item.kind;
    if (item.kind == ItemKind::masked) {
      for (const auto& a : default_lexicon().auxiliaries()) r.candidate_logprobs[a] = -pick(gen);
    } else {
      r.n_tokens = 10 + pick(gen);
      r.seq_logprob = -static_cast<double>(pick(gen) * 10 + *r.n_tokens);
    }
    idx.add(r);
  }
  return idx;
}

ExperimentOptions options(double eps = 0.0) {
  ExperimentOptions o;
  o.tie_epsilon = eps;
  o.candidates = default_lexicon().auxiliaries();
  return o;
}

// Rank of each candidate under a stable sort by (score desc, surface asc).
std::vector<Auxiliary> oracle_order(const ScoreRecord& r) {
  std::vector<std::pair<double, std::string>> v;
  for (const auto& [a, lp] : r.candidate_logprobs) v.emplace_back(-lp, a.surface());
  std::sort(v.begin(), v.end());
  std::vector<Auxiliary> out;
  for (const auto& [s, a] : v) out.emplace_back(a);
  return out;
}

}  // namespace

TEST_CASE("experiment names") {
  for (auto e : {Experiment::header, Experiment::rejection, Experiment::conjunction,
                 Experiment::ellipsis_top1, Experiment::ellipsis_top2}) {
    CHECK(parse_experiment(to_string(e)) == e);
  }
  CHECK(parse_experiment("ellipsis_top2") == Experiment::ellipsis_top2);
  CHECK_THROWS_AS(parse_experiment("sentiment"), UsageError);
  CHECK(mode_for(Experiment::conjunction) == Mode::conjunction);
  CHECK(mode_for(Experiment::ellipsis_top1) == Mode::arc);
}

TEST_CASE("header test against a direct count") {
  const auto suite = small_suite(Mode::arc);
  const auto scores = random_scores(suite, 1);
  const auto result = run_header_test(suite, scores);

  std::map<std::string, double> succ;
  std::map<std::string, int> n, ties;
  for (const auto& item : suite.items) {
    if (item.kind != ItemKind::sequence || item.header != Header::reject) continue;
    const std::string t(to_string(item.target));
    const auto& r = scores.at(item.id, "reject-" + t);
    const auto& w = scores.at(item.id, "wait-" + t);
    const double a = *r.seq_logprob / *r.n_tokens, b = *w.seq_logprob / *w.n_tokens;
    n[t] += 1;
    if (a > b) succ[t] += 1;
    if (a == b) {
      succ[t] += 0.5;
      ties[t] += 1;
    }
  }
  REQUIRE(result.groups.size() == 2);
  for (const auto& [t, tally] : result.groups) {
    CHECK(tally.n == n[t]);
    CHECK(tally.successes == succ[t]);
    CHECK(tally.ties == ties[t]);
    CHECK(tally.n == static_cast<int>(suite.contexts.size()));
  }
  CHECK(result.references.at("embedded").value == 0.23);
  CHECK(result.references.at("main").approximate);
}

TEST_CASE("rejection test against a direct count") {
  const auto suite = small_suite(Mode::arc);
  const auto scores = random_scores(suite, 2);
  const auto result = run_rejection_test(suite, scores, options());

  std::map<std::string, double> succ;
  std::vector<double> reject, wait;
  for (const auto& item : suite.items) {
    if (item.kind != ItemKind::masked) continue;
    const auto& lp = scores.at(item.id, item.variant).candidate_logprobs;
    const double m = lp.at(item.context.pair.main), e = lp.at(item.context.pair.embedded);
    const double c = m > e ? 1.0 : (m == e ? 0.5 : 0.0);
    succ[std::string(to_string(item.header))] += c;
    (item.header == Header::reject ? reject : wait).push_back(c);
  }
  CHECK(result.groups.at("reject").successes == succ["reject"]);
  CHECK(result.groups.at("wait").successes == succ["wait"]);
  CHECK(result.groups.at("reject").n == static_cast<int>(suite.contexts.size()));
  CHECK(result.references.at("reject").value == 0.789);
  REQUIRE(result.header_contrast.has_value());
  const auto t = stats::one_sided_welch_t(reject, wait);
  CHECK(result.header_contrast->t == t.t);
  CHECK(result.header_contrast->p_one_sided == t.p_one_sided);
}

TEST_CASE("a constant outcome leaves a note instead of a contrast") {
  const auto suite = small_suite(Mode::arc);
  auto mock = mock_scorer(MockRules::parse("prefer=main"), default_lexicon());
  const auto r = run_experiment(Experiment::rejection, suite, *mock, options());
  CHECK(r.groups.at("reject").successes == r.groups.at("reject").n);
  CHECK_FALSE(r.header_contrast.has_value());
  CHECK_FALSE(r.header_contrast_note.empty());
  CHECK(result_to_json(r).contains("header_contrast_note"));
}

TEST_CASE("tie epsilon widens the tie band") {
  const auto suite = small_suite(Mode::arc);
  const auto scores = random_scores(suite, 3);
  const auto strict = run_rejection_test(suite, scores, options(0.0));
  const auto loose = run_rejection_test(suite, scores, options(1.0));
  int expected_ties = 0;
  for (const auto& o : strict.per_item) expected_ties += std::fabs(o.margin) <= 1.0;
  int got = 0;
  for (const auto& [g, t] : loose.groups) got += t.ties;
  CHECK(got == expected_ties);
  CHECK(got > 0);
  for (const auto& o : loose.per_item) {
    if (o.winner == Winner::tie) CHECK(o.credit == 0.5);
  }
}

TEST_CASE("conjunction test needs a conjunction suite") {
  const auto arc = small_suite(Mode::arc);
  const auto conj = small_suite(Mode::conjunction);
  const auto scores = random_scores(conj, 4);
  CHECK_THROWS_AS(run_conjunction_test(arc, random_scores(arc, 4), options()), DataError);
  CHECK_THROWS_AS(run_rejection_test(conj, scores, options()), DataError);
  const auto r = run_conjunction_test(conj, scores, options());
  CHECK(r.references.at("reject").value == 0.5);
  CHECK(r.total_n() == 2 * conj.contexts.size());
}

TEST_CASE("top-k success matches a sorted-candidate oracle") {
  const auto suite = small_suite(Mode::arc);
  const auto scores = random_scores(suite, 6);
  const auto top1 = run_ellipsis_top1(suite, scores, options());
  const auto top2 = run_ellipsis_top2(suite, scores, options());

  std::map<std::string, int> s1, s2;
  for (const auto& item : suite.items) {
    if (item.kind != ItemKind::masked) continue;
    const auto order = oracle_order(scores.at(item.id, item.variant));
    const auto& m = item.context.pair.main;
    const auto& e = item.context.pair.embedded;
    const std::string h(to_string(item.header));
    const bool ok1 = item.header == Header::reject ? order[0] == m
                                                   : (order[0] == m || order[0] == e);
    const std::set<Auxiliary> top{order[0], order[1]};
    s1[h] += ok1;
    s2[h] += top == std::set<Auxiliary>{m, e};
  }
  for (const char* h : {"reject", "wait"}) {
    CAPTURE(h);
    CHECK(top1.groups.at(h).successes == s1[h]);
    CHECK(top2.groups.at(h).successes == s2[h]);
  }
  // No half credit in top-k tests.
  for (const auto& o : top1.per_item) CHECK((o.credit == 0.0 || o.credit == 1.0));
}

TEST_CASE("top-k closed forms under a fixed candidate order") {
  // With the ranking did > does > ... top-1 "No" succeeds only where did is
  // main (5 of 30 ordered pairs); "Wait no" also where did is embedded.
  const auto suite = small_suite(Mode::arc, 1);
  auto mock = mock_scorer(MockRules::parse("order=did>does>has>is>was>would"), default_lexicon());
  const auto top1 = run_experiment(Experiment::ellipsis_top1, suite, *mock, options());
  CHECK(top1.groups.at("reject").successes == 5);
  CHECK(top1.groups.at("wait").successes == 10);
  CHECK(top1.groups.at("reject").n == 30);
  // Top-2 succeeds only on the {did, does} pairs.
  const auto top2 = run_experiment(Experiment::ellipsis_top2, suite, *mock, options());
  CHECK(top2.groups.at("reject").successes == 2);
  CHECK(top2.groups.at("wait").successes == 2);
  CHECK_THROWS_AS(run_ellipsis_top1(suite, ScoreIndex(), ExperimentOptions{}), DataError);
}

TEST_CASE("error distribution") {
  const auto suite = small_suite(Mode::arc, 1);
  auto mock = mock_scorer(MockRules::parse("order=did>does>has>is>was>would"), default_lexicon());
  const auto cands = default_lexicon().auxiliaries();
  const auto records = score_items(*mock, items_for(Experiment::ellipsis_top1, suite), cands);
  const ScoreIndex scores(records);

  const auto top1 = run_ellipsis_top1(suite, scores, options());
  const auto e1 = error_distribution(top1, suite, scores, cands, 1);
  // "No" errors: 25 items; did wins as the embedded auxiliary in 5 of them.
  CHECK(e1.erroneous_items.at("reject") == 25);
  CHECK(e1.embedded_wins.at("reject") == 5);
  CHECK(e1.counts.at("reject").at(Auxiliary("did")) == 20);
  CHECK(e1.proportions.at("reject").at(Auxiliary("did")) == 1.0);
  CHECK(e1.erroneous_items.at("wait") == 20);

  const auto top2 = run_ellipsis_top2(suite, scores, options());
  const auto e2 = error_distribution(top2, suite, scores, cands, 2);
  // Failed top-2 items: intruders are did/does whenever they are outside the pair.
  int total = 0;
  for (const auto& [aux, c] : e2.counts.at("reject")) {
    CHECK((aux == Auxiliary("did") || aux == Auxiliary("does")));
    total += c;
  }
  CHECK(total == 2 * 28 - 16);  // 28 failures; 16 of them hold exactly one of did/does
  double mass = 0.0;
  for (const auto& [aux, p] : e2.proportions.at("reject")) mass += p;
  CHECK(mass == doctest::Approx(1.0));

  CHECK_THROWS_AS(error_distribution(top1, suite, scores, cands, 2), UsageError);
  const auto j = errors_to_json(e1);
  CHECK(j.at("headers").at("reject").at("embedded_wins") == 5);
}

TEST_CASE("verb breakdown regroups rejection outcomes") {
  const auto suite = small_suite(Mode::arc);
  const auto scores = random_scores(suite, 8);
  const auto rej = run_rejection_test(suite, scores, options());
  const auto vb = verb_breakdown(rej, suite);
  REQUIRE(vb.cells.size() == 2);
  for (const auto& [grouping, by_aux] : vb.cells) {
    CHECK(by_aux.size() == 6);
    double succ = 0.0;
    int n = 0;
    for (const auto& [aux, by_header] : by_aux) {
      CHECK(by_header.size() == 2);
      for (const auto& [h, t] : by_header) {
        succ += t.successes;
        n += t.n;
        // Each auxiliary sits in 5 pairs per grouping, 2 contexts each.
        CHECK(t.n == 10);
      }
    }
    CHECK(n == static_cast<int>(rej.total_n()));
    CHECK(succ == rej.groups.at("reject").successes + rej.groups.at("wait").successes);
  }
  const auto j = breakdown_to_json(vb);
  CHECK(j.at("main").at("did").at("reject").contains("ci_low"));
  CHECK_THROWS_AS(verb_breakdown(run_ellipsis_top1(suite, scores, options()), suite), UsageError);
}

TEST_CASE("result JSON carries intervals and per-item outcomes") {
  const auto suite = small_suite(Mode::arc);
  const auto scores = random_scores(suite, 9);
  const auto r = run_rejection_test(suite, scores, options());
  const auto j = result_to_json(r, 0.9);
  const auto& g = j.at("groups").at("reject");
  const auto ci = stats::wilson_ci(g.at("successes").get<double>(), g.at("n").get<int>(), 0.9);
  CHECK(g.at("ci_low") == ci.ci_low);
  CHECK(g.at("level") == 0.9);
  CHECK(j.at("per_item").size() == r.total_n());
  CHECK(j.at("experiment") == "rejection");
}

TEST_CASE("missing scores are data errors") {
  const auto suite = small_suite(Mode::arc);
  CHECK_THROWS_WITH_AS(run_rejection_test(suite, ScoreIndex(), options()),
                       doctest::Contains("missing score"), DataError);
}
