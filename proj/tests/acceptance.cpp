// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "dlgresp/experiments.hpp"
#include "dlgresp/probing.hpp"
#include "dlgresp/run.hpp"
#include "dlgresp/scoring.hpp"
#include "dlgresp/stats.hpp"
#include "dlgresp/stimgen.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dlgresp;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

int failures = 0;

void report(const char* id, const char* title, const std::function<Verdict()>& body,
            double limit_seconds = 0.0) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = fmt::format("exception: {}", e.what());
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (limit_seconds > 0.0) {
    v.expect(secs < limit_seconds, fmt::format("runtime {:.2f}s >= {:.0f}s", secs, limit_seconds));
  }
  if (!v.pass) ++failures;
  fmt::print("{} {} {} ({:.2f}s){}{}\n", id, v.pass ? "PASS" : "FAIL", title, secs,
             v.detail.empty() ? "" : ": ", v.detail);
  std::fflush(stdout);
}

ExperimentOptions full_candidates() {
  ExperimentOptions o;
  o.candidates = default_lexicon().auxiliaries();
  return o;
}

const Suite& default_arc_suite() {
  static const Suite suite = build_suite(default_lexicon(), SuiteConfig::defaults(Mode::arc));
  return suite;
}

double estimate(const ExperimentResult& r, const std::string& group) {
  const auto& t = r.groups.at(group);
  return t.successes / t.n;
}

// Exact rational comparison: successes / n == num / den.
bool exactly(const ExperimentResult& r, const std::string& group, int num, int den) {
  const auto& t = r.groups.at(group);
  return t.successes * den == static_cast<double>(num) * t.n;
}

Verdict generation_counts() {
  Verdict v;
  const auto& lex = default_lexicon();
  const auto suite = build_suite(lex, SuiteConfig::defaults(Mode::arc));
  const auto pairs = ordered_pairs(lex.auxiliaries());
  v.expect(pairs.size() == 30, fmt::format("{} ordered pairs", pairs.size()));
  v.expect(suite.contexts.size() == 300, fmt::format("{} contexts", suite.contexts.size()));
  v.expect(suite.count(ItemKind::masked) == 600,
           fmt::format("{} masked", suite.count(ItemKind::masked)));
  v.expect(suite.count(ItemKind::sequence) == 1200,
           fmt::format("{} renderings", suite.count(ItemKind::sequence)));
  std::map<Auxiliary, int> main_n, emb_n;
  for (const auto& c : suite.contexts) {
    ++main_n[c.pair.main];
    ++emb_n[c.pair.embedded];
  }
  for (const auto& a : lex.auxiliaries()) {
    v.expect(main_n[a] == 50, fmt::format("{} main in {}", a.surface(), main_n[a]));
    v.expect(emb_n[a] == 50, fmt::format("{} embedded in {}", a.surface(), emb_n[a]));
  }
  return v;
}

Verdict pll_oracle() {
  Verdict v;
  std::mt19937_64 gen(2718);
  const std::vector<std::string> vocab = {"the", "nurse", "who", "adopted", "a",   "dog",
                                          ",",   ".",     "No",  "he",      "did", "not",
                                          "\"",  "said",  "and", "Wait",    "is",  "was"};
  std::uniform_int_distribution<std::size_t> word(0, vocab.size() - 1);
  std::uniform_int_distribution<int> length(1, 40);
  std::uniform_real_distribution<double> lp(-12.0, -0.01);
  TableMlmBackend mlm(99);
  for (std::size_t pos = 0; pos < 40; ++pos) {
    for (const auto& w : vocab) {
      if (gen() % 2 == 0) mlm.set(pos, w, lp(gen));
    }
  }
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::string> words(static_cast<std::size_t>(length(gen)));
    std::string text;
    for (auto& w : words) {
      w = vocab[word(gen)];
      if (!text.empty()) text += ' ';
      text += w;
    }
    double expected = 0.0;
    for (std::size_t k = 0; k < words.size(); ++k) expected += mlm.lookup(k, words[k]);
    const auto got = pseudo_log_likelihood(mlm, text);
    worst = std::max(worst, std::fabs(got.total - expected));
    if (got.n_tokens != static_cast<int>(words.size())) {
      v.expect(false, fmt::format("text {} has {} tokens, expected {}", i, got.n_tokens,
                                  words.size()));
      break;
    }
  }
  v.expect(worst <= 1e-6, fmt::format("max deviation {:.3g}", worst));
  return v;
}

Verdict metric_oracles() {
  Verdict v;
  const auto& suite = default_arc_suite();
  const auto opts = full_candidates();
  auto run = [&](const char* rules, Experiment e) {
    auto mock = mock_scorer(MockRules::parse(rules), default_lexicon());
    return run_experiment(e, suite, *mock, opts);
  };
  auto expect_value = [&](const ExperimentResult& r, const char* group, int num, int den,
                          const char* label) {
    v.expect(exactly(r, group, num, den),
             fmt::format("{} {} = {:.6f}, expected {}/{}", label, group, estimate(r, group), num,
                         den));
  };
  const auto main_rej = run("prefer=main", Experiment::rejection);
  const auto main_top1 = run("prefer=main", Experiment::ellipsis_top1);
  for (const char* h : {"reject", "wait"}) {
    expect_value(main_rej, h, 1, 1, "main-preferring rejection");
    expect_value(main_top1, h, 1, 1, "main-preferring top-1");
  }
  const auto emb_rej = run("prefer=embedded", Experiment::rejection);
  const auto emb_top1 = run("prefer=embedded", Experiment::ellipsis_top1);
  expect_value(emb_rej, "reject", 0, 1, "embedded-preferring rejection");
  expect_value(emb_rej, "wait", 0, 1, "embedded-preferring rejection");
  expect_value(emb_top1, "reject", 0, 1, "embedded-preferring top-1");
  expect_value(emb_top1, "wait", 1, 1, "embedded-preferring top-1");
  const auto pair_top2 = run("prefer=pair", Experiment::ellipsis_top2);
  const auto fixed_top2 = run("order=did>does>has>is>was>would", Experiment::ellipsis_top2);
  for (const char* h : {"reject", "wait"}) {
    expect_value(pair_top2, h, 1, 1, "pair top-2");
    expect_value(fixed_top2, h, 2, 30, "did,does top-2");
  }
  return v;
}

Verdict frequency_bias() {
  Verdict v;
  auto mock = mock_scorer(MockRules::parse("order=did>does>has>is>was>would"), default_lexicon());
  const auto r =
      run_experiment(Experiment::ellipsis_top1, default_arc_suite(), *mock, full_candidates());
  v.expect(exactly(r, "reject", 1, 6),
           fmt::format("reject {:.6f}, expected 1/6", estimate(r, "reject")));
  v.expect(exactly(r, "wait", 1, 3), fmt::format("wait {:.6f}, expected 1/3", estimate(r, "wait")));
  return v;
}

Verdict statistics() {
  Verdict v;
  std::mt19937_64 gen(1009);
  std::uniform_int_distribution<int> n_dist(2, 500);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double ci_err = 0.0, t_err = 0.0, df_err = 0.0, p_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int n = n_dist(gen);
    const double s = std::round(u(gen) * n * 2.0) / 2.0;
    const auto got = stats::wilson_ci(s, n, 0.95);
    const auto ref = testing::wilson_reference(s, n, 0.95);
    ci_err = std::max({ci_err, std::fabs(got.ci_low - std::max(0.0, ref.low)),
                       std::fabs(got.ci_high - std::min(1.0, ref.high))});
  }
  int cases = 0;
  while (cases < 100) {
    std::vector<double> a(static_cast<std::size_t>(n_dist(gen))),
        b(static_cast<std::size_t>(n_dist(gen)));
    std::bernoulli_distribution pa(u(gen)), pb(u(gen));
    for (auto& x : a) x = pa(gen);
    for (auto& x : b) x = pb(gen);
    auto constant = [](const std::vector<double>& x) {
      return std::all_of(x.begin(), x.end(), [&](double e) { return e == x.front(); });
    };
    if (constant(a) && constant(b)) continue;
    const auto got = stats::one_sided_welch_t(a, b);
    const auto ref = testing::welch_reference(a, b);
    t_err = std::max(t_err, std::fabs(got.t - ref.t));
    df_err = std::max(df_err, std::fabs(got.df - ref.df));
    p_err = std::max(p_err, std::fabs(got.p_one_sided - ref.p));
    ++cases;
  }
  v.expect(ci_err <= 1e-6, fmt::format("Wilson deviation {:.3g}", ci_err));
  v.expect(p_err <= 1e-6, fmt::format("p deviation {:.3g}", p_err));
  v.expect(t_err <= 1e-9, fmt::format("t deviation {:.3g}", t_err));
  v.expect(df_err <= 1e-9, fmt::format("df deviation {:.3g}", df_err));

  const auto w = stats::one_sided_welch_t(std::vector<double>{1, 1, 0, 1},
                                          std::vector<double>{0, 1, 0, 0});
  v.expect(fmt::format("{:.3f}", w.t) == "1.414", fmt::format("worked t = {:.6f}", w.t));
  v.expect(fmt::format("{:.3f}", w.df) == "6.000", fmt::format("worked df = {:.6f}", w.df));
  return v;
}

std::vector<TokenRecord> synthetic_tokens(int items, int per_item, int dim, bool separable,
                                          std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::discrete_distribution<int> skewed({0.5, 0.3, 0.2});
  std::vector<TokenRecord> out;
  for (int i = 0; i < items; ++i) {
    for (int t = 0; t < per_item; ++t) {
      TokenRecord r;
      r.item_id = fmt::format("ctx-{:04d}", i);
      r.variant = "reject-mask";
      r.token_index = t;
      r.token = fmt::format("w{}", t);
      r.embedding.resize(static_cast<std::size_t>(dim));
      for (auto& x : r.embedding) x = noise(gen);
      const int label = separable ? t % kProbeClasses : skewed(gen);
      if (separable) r.embedding[static_cast<std::size_t>(label)] += 6.0f;
      r.label = static_cast<SpanLabel>(label);
      out.push_back(std::move(r));
    }
  }
  return out;
}

Verdict probe_sanity() {
  Verdict v;
  const ProbeConfig config;
  const auto separable = run_probe_protocol(synthetic_tokens(300, 40, 32, true, 5), config);
  v.expect(separable.runs.size() == 3, "expected 3 runs");
  v.expect(separable.mean_accuracy >= 0.99,
           fmt::format("separable mean accuracy {:.4f}", separable.mean_accuracy));

  const auto noise = run_probe_protocol(synthetic_tokens(300, 40, 32, false, 6), config);
  double majority = 0.0;
  for (const auto& r : noise.runs) majority += r.majority_share / noise.runs.size();
  v.expect(std::fabs(noise.mean_accuracy - majority) <= 0.05,
           fmt::format("random-label accuracy {:.4f} vs majority {:.4f}", noise.mean_accuracy,
                       majority));
  v.detail += fmt::format("{}separable {:.4f}, random-label {:.4f} (majority {:.4f})",
                          v.detail.empty() ? "" : "; ", separable.mean_accuracy,
                          noise.mean_accuracy, majority);
  return v;
}

std::string cli(const std::string& args) {
  return testing::cli_path().string() + " -q " + args + " >/dev/null 2>&1";
}

// Every file under a directory, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = testing::slurp(e.path());
  }
  return out;
}

Verdict replay_determinism() {
  Verdict v;
  testing::TempDir dir("acceptance-replay");
  const auto source = (dir / "source").string();
  auto sh = [&](const std::string& args) {
    const int rc = testing::run_shell(cli(args));
    v.expect(rc == 0, fmt::format("`{}` exited {}", args, rc));
    return rc == 0;
  };
  if (!sh("generate --out " + source + " --seed 77") ||
      !sh("score --run " + source + " --backend mock:shuffle,prefer=main,noise=0.5 --jobs 4") ||
      !sh("probe --run " + source + " --backend mock:shuffle,prefer=main,noise=0.5")) {
    return v;
  }
  const auto cache = (dir / "source/scores/scores.jsonl").string();
  const auto embeddings = (dir / "source/scores/embeddings.jsonl").string();

  std::vector<std::map<std::string, std::string>> outputs;
  for (const char* name : {"first", "second"}) {
    const auto run = (dir / name).string();
    if (!sh("generate --out " + run + " --seed 77") ||
        !sh("score --run " + run + " --backend replay:" + cache) || !sh("run all --run " + run) ||
        !sh("probe --run " + run + " --embeddings " + embeddings) ||
        !sh("report --svg " + run)) {
      return v;
    }
    auto files = tree(dir / name / "reports");
    for (auto& [k, text] : tree(dir / name / "results")) files["results/" + k] = text;
    outputs.push_back(std::move(files));
  }
  v.expect(outputs[0].size() >= 10, fmt::format("only {} report files", outputs[0].size()));
  v.expect(outputs[0].size() == outputs[1].size(), "different report sets");
  for (const auto& [name, text] : outputs[0]) {
    auto it = outputs[1].find(name);
    v.expect(it != outputs[1].end() && it->second == text, fmt::format("{} differs", name));
  }
  if (v.pass) v.detail = fmt::format("{} files identical", outputs[0].size());
  return v;
}

}  // namespace

int main() {
  report("AC1", "generation counts", generation_counts, 5.0);
  report("AC2", "pseudo-log-likelihood oracle", pll_oracle, 10.0);
  report("AC3", "metric oracles with constructed mocks", metric_oracles);
  report("AC4", "frequency-bias closed form", frequency_bias);
  report("AC5", "Wilson and Welch against the reference", statistics);
  report("AC6", "probe sanity", probe_sanity, 60.0);
  report("AC7", "replay determinism", replay_determinism);
  fmt::print("AC8 is checked by acceptance_model (needs a masked-LM backend)\n");
  fmt::print("{} of 7 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
