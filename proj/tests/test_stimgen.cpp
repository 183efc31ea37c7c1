#include <algorithm>
#include <map>
#include <set>
#include <string>

#include "doctest.h"
#include "dlgresp/stimgen.hpp"
#include "support.hpp"

using namespace dlgresp;

namespace {

const std::pair<std::string, std::string> kSpeakers{"Marco", "Ellie"};

std::string label_of(const StimulusItem& item, const std::string& word) {
  const auto pos = item.text.find(word);
  REQUIRE(pos != std::string::npos);
  for (const auto& s : item.spans) {
    if (pos >= s.begin && pos + word.size() <= s.end) return std::string(to_string(s.label));
  }
  return "none";
}

std::size_t count_occurrences(const std::string& s, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("ordered pairs") {
  const auto auxes = make_auxiliaries({"is", "did", "has"});
  const auto pairs = ordered_pairs(auxes);
  REQUIRE(pairs.size() == 6);
  CHECK(pairs.front() == VerbPair{Auxiliary("did"), Auxiliary("has")});
  CHECK(pairs.back() == VerbPair{Auxiliary("is"), Auxiliary("has")});
  CHECK(std::is_sorted(pairs.begin(), pairs.end()));
  for (const auto& p : pairs) CHECK(p.embedded != p.main);

  const auto dup = make_auxiliaries({"is", "is"});
  CHECK_THROWS_AS(ordered_pairs(dup), DataError);
  const auto one = make_auxiliaries({"is"});
  CHECK_THROWS_AS(ordered_pairs(one), DataError);
}

TEST_CASE("ordered pair count is n(n-1) for every lexicon size") {
  const std::vector<std::string> all = {"a", "b", "c", "d", "e", "f", "g", "h"};
  for (std::size_t n = 2; n <= all.size(); ++n) {
    const auto auxes = make_auxiliaries(std::vector<std::string>(all.begin(), all.begin() + n));
    const auto pairs = ordered_pairs(auxes);
    CHECK(pairs.size() == n * (n - 1));
    CHECK(std::set<VerbPair>(pairs.begin(), pairs.end()).size() == pairs.size());
  }
}

TEST_CASE("rendering the running example") {
  const auto ctx = testing::cuisine_context();
  CHECK(render_context(ctx) ==
        "The nurse, who has interest in French cuisine, adopted a rescue dog.");
  CHECK(render_response(Header::reject, "he", Auxiliary("did")) == "No, he did not.");
  CHECK(render_response(Header::wait, "he", Auxiliary("does")) == "Wait no, he does not.");
  CHECK(render_masked_response(Header::wait, "she") == "Wait no, she [MASK] not.");

  const auto item =
      render_item(ctx, Header::reject, "he", Auxiliary("did"), kSpeakers, DialogueFormat::novel);
  CHECK(item.text ==
        "Marco said, \"The nurse, who has interest in French cuisine, adopted a rescue dog,\" "
        "and Ellie replied, \"No, he did not.\"");
  CHECK(item.target == Target::main);
  CHECK(item.variant == "reject-main");
  CHECK(item.id == "arc-does-did-0");

  const auto masked = make_masked(
      render_item(ctx, Header::wait, "he", Auxiliary("did"), kSpeakers, DialogueFormat::novel));
  CHECK(masked.masked_text ==
        "Marco said, \"The nurse, who has interest in French cuisine, adopted a rescue dog,\" "
        "and Ellie replied, \"Wait no, he [MASK] not.\"");
  CHECK(masked.variant == "wait-mask");
  CHECK(masked.kind == ItemKind::masked);
}

TEST_CASE("simple dialogue format") {
  const auto item = render_item(testing::cuisine_context(), Header::wait, "he", Auxiliary("does"),
                                kSpeakers, DialogueFormat::simple);
  CHECK(item.text ==
        "A: \"The nurse, who has interest in French cuisine, adopted a rescue dog.\" "
        "B: \"Wait no, he does not.\"");
  CHECK(item.target == Target::embedded);
  CHECK(item.speaker_a == "A");
}

TEST_CASE("conjunction rendering") {
  auto ctx = testing::cuisine_context();
  ctx.mode = Mode::conjunction;
  CHECK(render_context(ctx) ==
        "The nurse has interest in French cuisine and adopted a rescue dog.");
  CHECK(target_for(ctx, Auxiliary("did")) == Target::recent);
  CHECK(target_for(ctx, Auxiliary("does")) == Target::distant);
  CHECK_THROWS_AS(target_for(ctx, Auxiliary("is")), DataError);
}

TEST_CASE("span labels of the running example") {
  const auto item = render_item(testing::cuisine_context(), Header::reject, "he",
                                Auxiliary("did"), kSpeakers, DialogueFormat::novel);
  CHECK(label_of(item, "nurse") == "at_issue");
  CHECK(label_of(item, "French") == "not_at_issue");
  CHECK(label_of(item, "said") == "neither");
  CHECK(label_of(item, "rescue") == "at_issue");
  CHECK(label_of(item, "replied") == "none");
}

TEST_CASE("default arc suite counts") {
  const auto suite = build_suite(default_lexicon(), SuiteConfig::defaults(Mode::arc));
  CHECK(suite.contexts.size() == 300);
  CHECK(suite.count(ItemKind::masked) == 600);
  CHECK(suite.count(ItemKind::sequence) == 1200);

  // Counting oracle: over ordered pairs each auxiliary is main in (n-1)
  // pairs and embedded in (n-1) pairs, each holding 10 contexts.
  std::map<std::string, int> main_n, emb_n;
  for (const auto& c : suite.contexts) {
    ++main_n[c.pair.main.surface()];
    ++emb_n[c.pair.embedded.surface()];
  }
  for (const auto& a : default_lexicon().auxiliaries()) {
    CHECK(main_n[a.surface()] == 50);
    CHECK(emb_n[a.surface()] == 50);
  }
}

TEST_CASE("suite invariants") {
  for (Mode mode : {Mode::arc, Mode::conjunction}) {
    auto config = SuiteConfig::defaults(mode);
    config.sequence_variants = true;
    const auto suite = build_suite(default_lexicon(), config);
    std::set<std::pair<std::string, std::string>> keys;
    for (const auto& item : suite.items) {
      CAPTURE(item.id);
      CHECK(keys.emplace(item.id, item.variant).second);
      CHECK(item.speaker_a != item.speaker_b);
      CHECK(item.context.vp1.aux == item.context.pair.embedded);
      CHECK(item.context.vp2.aux == item.context.pair.main);
      CHECK(item.context.vp1.text != item.context.vp2.text);
      // Spans tile [0, context_end) in order.
      REQUIRE_FALSE(item.spans.empty());
      CHECK(item.spans.front().begin == 0);
      CHECK(item.spans.back().end == item.context_end);
      for (std::size_t i = 1; i < item.spans.size(); ++i) {
        CHECK(item.spans[i].begin == item.spans[i - 1].end);
        CHECK(item.spans[i].label != item.spans[i - 1].label);
      }
      const bool has_nai = std::any_of(item.spans.begin(), item.spans.end(), [](const auto& s) {
        return s.label == SpanLabel::not_at_issue;
      });
      CHECK(has_nai == (mode == Mode::arc));
      if (item.kind == ItemKind::masked) {
        CHECK(count_occurrences(item.masked_text, kMaskMarker) == 1);
        CHECK(item.masked_text.substr(0, item.context_end) ==
              item.text.substr(0, item.context_end));
      }
    }
  }
}

TEST_CASE("verb phrases are drawn without replacement within a pair") {
  const auto contexts = generate_contexts(default_lexicon(), 10, 99, Mode::arc);
  std::map<std::pair<std::string, std::string>, std::set<std::string>> vp1, vp2;
  for (const auto& c : contexts) {
    const auto key = std::make_pair(c.pair.embedded.surface(), c.pair.main.surface());
    CHECK(vp1[key].insert(c.vp1.text).second);
    CHECK(vp2[key].insert(c.vp2.text).second);
  }
  CHECK_THROWS_AS(generate_contexts(default_lexicon(), 15, 1, Mode::arc), DataError);
}

TEST_CASE("generation is deterministic and mode-independent in content") {
  auto arc_cfg = SuiteConfig::defaults(Mode::arc);
  arc_cfg.seed = 7;
  const auto a = serialize_suite(build_suite(default_lexicon(), arc_cfg));
  const auto b = serialize_suite(build_suite(default_lexicon(), arc_cfg));
  CHECK(a == b);

  arc_cfg.seed = 8;
  CHECK(serialize_suite(build_suite(default_lexicon(), arc_cfg)) != a);

  const auto arc = generate_contexts(default_lexicon(), 10, 5, Mode::arc);
  const auto conj = generate_contexts(default_lexicon(), 10, 5, Mode::conjunction);
  REQUIRE(arc.size() == conj.size());
  for (std::size_t i = 0; i < arc.size(); ++i) {
    CHECK(arc[i].vp1 == conj[i].vp1);
    CHECK(arc[i].noun == conj[i].noun);
  }
}

TEST_CASE("suite files round-trip") {
  testing::TempDir dir("stimgen");
  const auto suite = build_suite(default_lexicon(), SuiteConfig::defaults(Mode::arc));
  write_suite(suite, dir / "arc.jsonl");
  const auto back = read_suite(dir / "arc.jsonl");
  CHECK(back.items == suite.items);
  CHECK(back.contexts == suite.contexts);
  CHECK(serialize_suite(back) == testing::slurp(dir / "arc.jsonl"));

  SUBCASE("duplicate records are rejected") {
    const auto text = testing::slurp(dir / "arc.jsonl");
    const auto first = text.substr(0, text.find('\n') + 1);
    testing::spit(dir / "dup.jsonl", first + first);
    CHECK_THROWS_WITH_AS(read_suite(dir / "dup.jsonl"),
                         doctest::Contains("duplicate item"), DataError);
  }
  SUBCASE("malformed lines cite the line number") {
    testing::spit(dir / "bad.jsonl", "{\"schema_version\": 1}\n");
    CHECK_THROWS_WITH_AS(read_suite(dir / "bad.jsonl"), doctest::Contains("bad.jsonl:1"),
                         DataError);
  }
}
