#include <algorithm>
#include <random>
#include <set>
#include <string>

#include "doctest.h"
#include "dlgresp/probing.hpp"
#include "support.hpp"

using namespace dlgresp;

namespace {

// Gaussian clusters in 8 dimensions, one centre per label.
std::vector<TokenRecord> clusters(int items, int tokens_per_item, double spread,
                                  std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spread));
  std::vector<TokenRecord> out;
  for (int i = 0; i < items; ++i) {
    for (int t = 0; t < tokens_per_item; ++t) {
      TokenRecord r;
      r.item_id = "ctx-" + std::to_string(i);
      r.variant = "reject-mask";
      r.token_index = t;
      r.token = "w" + std::to_string(t);
      r.begin = static_cast<std::size_t>(t) * 3;
      r.end = r.begin + 2;
      r.label = static_cast<SpanLabel>(t % kProbeClasses);
      r.embedding.assign(8, 0.0f);
      for (auto& v : r.embedding) v = noise(gen);
      r.embedding[static_cast<std::size_t>(t % kProbeClasses)] += 3.0f;
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::set<std::string> ids(const std::vector<TokenRecord>& rs) {
  std::set<std::string> out;
  for (const auto& r : rs) out.insert(r.item_id);
  return out;
}

ProbeConfig quick_config() {
  ProbeConfig c;
  c.max_epochs = 30;
  return c;
}

}  // namespace

TEST_CASE("labels come from the span holding the token midpoint") {
  const auto item = render_item(testing::cuisine_context(), Header::reject, "he", Auxiliary("did"),
                                {"Marco", "Ellie"}, DialogueFormat::novel);
  const auto at = [&](const std::string& word) {
    const auto pos = item.text.find(word);
    return label_at(item, pos, pos + word.size());
  };
  CHECK(at("nurse") == SpanLabel::at_issue);
  CHECK(at("cuisine") == SpanLabel::not_at_issue);
  CHECK(at("Marco") == SpanLabel::neither);
  CHECK_FALSE(at("replied").has_value());
  CHECK_FALSE(label_at(item, item.context_end, item.context_end + 3).has_value());
  // A piece straddling a boundary belongs where its midpoint falls.
  for (const auto& s : item.spans) {
    if (s.end - s.begin < 4 || s.end >= item.context_end) continue;
    CHECK(label_at(item, s.end - 1, s.end + 2) != s.label);
    CHECK(label_at(item, s.end - 2, s.end + 1) == s.label);
  }
}

TEST_CASE("split is by item with the requested share") {
  const auto records = clusters(10, 4, 0.5, 1);
  const auto [train, test] = split_by_item(records, 0.7, 3);
  CHECK(ids(train).size() == 7);
  CHECK(ids(test).size() == 3);
  std::vector<std::string> both;
  const auto a = ids(train), b = ids(test);
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  CHECK(both.empty());
  CHECK(train.size() + test.size() == records.size());
  CHECK(split_by_item(records, 0.7, 3) == split_by_item(records, 0.7, 3));
  CHECK(split_by_item(records, 0.7, 3) != split_by_item(records, 0.7, 4));
  CHECK_THROWS_AS(split_by_item(records, 1.0, 3), UsageError);
  CHECK_THROWS_AS(split_by_item(records, 0.0, 3), UsageError);
}

TEST_CASE("probe separates clustered embeddings") {
  const auto records = clusters(60, 9, 0.6, 2);
  const auto result = run_probe_protocol(records, quick_config());
  REQUIRE(result.runs.size() == 3);
  CHECK(result.dimension == 8);
  for (const auto& run : result.runs) {
    CHECK(run.accuracy >= 0.99);
    CHECK(run.train_items == 42);
    CHECK(run.test_items == 18);
    CHECK(run.majority_share == doctest::Approx(1.0 / 3.0));
  }
  double mean = 0.0;
  for (const auto& run : result.runs) mean += run.accuracy;
  CHECK(result.mean_accuracy == doctest::Approx(mean / 3.0).epsilon(1e-15));
  std::set<std::uint64_t> seeds;
  for (const auto& run : result.runs) seeds.insert(run.seed);
  CHECK(seeds.size() == 3);
}

TEST_CASE("probe on noise stays near chance") {
  auto records = clusters(60, 9, 0.6, 4);
  std::mt19937_64 gen(9);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  for (auto& r : records) {
    for (auto& v : r.embedding) v = noise(gen);
  }
  const auto result = run_probe_protocol(records, quick_config());
  CHECK(result.mean_accuracy < 0.5);
}

TEST_CASE("training is deterministic and order-independent") {
  const auto records = clusters(20, 6, 1.0, 5);
  const auto a = train_probe(records, quick_config(), 77);
  auto shuffled = records;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(3));
  const auto b = train_probe(shuffled, quick_config(), 77);
  CHECK(a.w1 == b.w1);
  CHECK(a.w2 == b.w2);
  CHECK(a.b2 == b.b2);
  CHECK(a.epochs_trained == b.epochs_trained);
  CHECK(a.epochs_trained <= 30);
  const auto c = train_probe(records, quick_config(), 78);
  CHECK(a.w1 != c.w1);
  CHECK(a.w1.rows() == 50);
}

TEST_CASE("probe input errors") {
  auto records = clusters(10, 3, 0.5, 6);
  for (auto& r : records) r.label = SpanLabel::at_issue;
  CHECK_THROWS_AS(train_probe(records, quick_config(), 1), DataError);
  CHECK_THROWS_AS(run_probe_protocol(std::vector<TokenRecord>{}, quick_config()), DataError);

  auto ragged = clusters(10, 3, 0.5, 6);
  ragged[4].embedding.pop_back();
  CHECK_THROWS_AS(run_probe_protocol(ragged, quick_config()), DataError);
}

TEST_CASE("probe config JSON") {
  ProbeConfig c;
  c.hidden_size = 16;
  c.seed = 9;
  CHECK(ProbeConfig::from_json(c.to_json()).to_json() == c.to_json());
  auto j = c.to_json();
  j["dropout"] = 0.1;
  CHECK_THROWS_AS(ProbeConfig::from_json(j), DataError);
}

TEST_CASE("probe datasets from a backend") {
  auto cfg = SuiteConfig::defaults(Mode::arc);
  cfg.n_per_pair = 1;
  const auto suite = build_suite(default_lexicon(), cfg);
  auto mock = mock_scorer(MockRules::parse("dim=12"), default_lexicon());
  const auto records = build_probe_dataset(suite, *mock);
  REQUIRE_FALSE(records.empty());
  std::set<SpanLabel> labels;
  for (const auto& r : records) {
    CHECK(r.embedding.size() == 12);
    labels.insert(r.label);
    const auto& item = suite.at(r.item_id, r.variant);
    CHECK(item.text.substr(r.begin, r.end - r.begin) == r.token);
    CHECK(r.end <= item.context_end);
  }
  CHECK(labels.size() == 3);

  testing::TempDir dir("probe");
  write_probe_dataset(records, dir / "emb.jsonl");
  CHECK(read_probe_dataset(dir / "emb.jsonl") == records);

  BigramClmBackend clm;
  CHECK_THROWS_AS(build_probe_dataset(suite, clm), UnsupportedCapability);
}
