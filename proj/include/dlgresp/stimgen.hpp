#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlgresp/lexicon.hpp"
#include "json.hpp"

namespace dlgresp {

enum class Mode { arc, conjunction };
enum class Header { reject, wait };
enum class Target { main, embedded, recent, distant };
enum class DialogueFormat { novel, simple };
enum class SpanLabel { at_issue, not_at_issue, neither };
enum class ItemKind { sequence, masked };

std::string_view to_string(Mode m);
std::string_view to_string(Header h);
std::string_view to_string(Target t);
std::string_view to_string(DialogueFormat f);
std::string_view to_string(SpanLabel l);
std::string_view to_string(ItemKind k);

Mode parse_mode(std::string_view s);
Header parse_header(std::string_view s);
Target parse_target(std::string_view s);
DialogueFormat parse_format(std::string_view s);
SpanLabel parse_span_label(std::string_view s);
ItemKind parse_item_kind(std::string_view s);

inline constexpr Header kHeaders[] = {Header::reject, Header::wait};

/// The response opener: "No" for reject, "Wait no" for wait.
std::string_view header_text(Header h);

/// Placeholder written at the auxiliary slot of masked responses. Backends
/// substitute their own mask token.
inline constexpr std::string_view kMaskMarker = "[MASK]";

struct VerbPair {
  Auxiliary embedded;  // targets vp1: inside the ARC, or the first conjunct
  Auxiliary main;      // targets vp2: the main clause, or the second conjunct

  auto operator<=>(const VerbPair&) const = default;
  bool operator==(const VerbPair&) const = default;
};

struct ContextSpec {
  Mode mode = Mode::arc;
  std::string noun;
  VerbPhraseEntry vp1;
  VerbPhraseEntry vp2;
  VerbPair pair;
  int index = 0;  // position among the contexts of this pair

  /// `{mode}-{embedded_aux}-{main_aux}-{index}`
  std::string id() const;

  bool operator==(const ContextSpec&) const = default;
};

struct LabeledSpan {
  std::size_t begin = 0;  // [begin, end) character offsets into the item text
  std::size_t end = 0;
  SpanLabel label = SpanLabel::neither;

  bool operator==(const LabeledSpan&) const = default;
};

/// One rendered two-turn dialogue. `id` names the context; `variant`
/// distinguishes the scoring instances built from it ("reject-main",
/// "wait-mask", ...), so (id, variant) is unique within a suite.
struct StimulusItem {
  std::string id;
  std::string variant;
  ItemKind kind = ItemKind::sequence;
  ContextSpec context;
  Header header = Header::reject;
  std::string pronoun;
  Auxiliary response_aux;
  Target target = Target::main;
  std::string speaker_a;
  std::string speaker_b;
  DialogueFormat format = DialogueFormat::novel;
  std::string text;         // fully rendered with response_aux
  std::string masked_text;  // masked items only: kMaskMarker at the auxiliary slot
  std::size_t context_end = 0;  // spans partition [0, context_end)
  std::vector<LabeledSpan> spans;

  bool operator==(const StimulusItem&) const = default;
};

/// All ordered pairs of distinct auxiliaries, lexicographic by (embedded, main).
std::vector<VerbPair> ordered_pairs(std::span<const Auxiliary> auxes);

/// n_per_pair contexts per ordered pair. Verb phrases are drawn without
/// replacement within a pair; nouns uniformly. Sampling does not depend on
/// `mode`, so the arc and conjunction suites of one seed share their content.
std::vector<ContextSpec> generate_contexts(const Lexicon& lexicon, int n_per_pair,
                                           std::uint64_t seed, Mode mode);

std::string render_context(const ContextSpec& spec);
std::string render_response(Header header, std::string_view pronoun, const Auxiliary& aux);
std::string render_masked_response(Header header, std::string_view pronoun);

/// Target implied by answering `spec` with `aux`. Throws if aux elides
/// neither verb phrase.
Target target_for(const ContextSpec& spec, const Auxiliary& aux);

StimulusItem render_item(const ContextSpec& spec, Header header, std::string_view pronoun,
                         const Auxiliary& aux,
                         const std::pair<std::string, std::string>& speakers,
                         DialogueFormat format);

/// Adds masked_text and marks the item as a masked scoring instance.
StimulusItem make_masked(StimulusItem item);

struct SuiteConfig {
  Mode mode = Mode::arc;
  int n_per_pair = 10;
  std::uint64_t seed = 1234;
  DialogueFormat format = DialogueFormat::novel;
  bool sequence_variants = true;  // {reject, wait} x {both targets}, fully rendered
  bool masked_variants = true;    // {reject, wait} with the auxiliary masked

  static SuiteConfig defaults(Mode mode);
};

struct Suite {
  SuiteConfig config;
  std::vector<ContextSpec> contexts;
  std::vector<StimulusItem> items;

  const StimulusItem& at(std::string_view id, std::string_view variant) const;
  std::size_t count(ItemKind kind) const;
};

Suite build_suite(const Lexicon& lexicon, const SuiteConfig& config);

nlohmann::json item_to_json(const StimulusItem& item);
StimulusItem item_from_json(const nlohmann::json& record);

/// Line-delimited suite file, one scoring instance per line.
void write_suite(const Suite& suite, const std::filesystem::path& path);
std::string serialize_suite(const Suite& suite);
/// Reads items back; contexts are reconstructed from them. config.mode and
/// config.format are taken from the records, the rest is left at defaults.
Suite read_suite(const std::filesystem::path& path);

}  // namespace dlgresp
