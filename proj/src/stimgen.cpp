#include "dlgresp/stimgen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace dlgresp {

namespace {

using nlohmann::json;

constexpr std::uint64_t kContextStream = 1;
constexpr std::uint64_t kDialogueStream = 2;

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::pair<std::string_view, Enum> (&table)[N],
                std::string_view what) {
  for (const auto& [name, value] : table) {
    if (name == s) return value;
  }
  throw DataError(fmt::format("unknown {} \"{}\"", what, s));
}

constexpr std::pair<std::string_view, Mode> kModes[] = {{"arc", Mode::arc},
                                                        {"conjunction", Mode::conjunction}};
constexpr std::pair<std::string_view, Header> kHeaderNames[] = {{"reject", Header::reject},
                                                                {"wait", Header::wait}};
constexpr std::pair<std::string_view, Target> kTargets[] = {{"main", Target::main},
                                                            {"embedded", Target::embedded},
                                                            {"recent", Target::recent},
                                                            {"distant", Target::distant}};
constexpr std::pair<std::string_view, DialogueFormat> kFormats[] = {
    {"novel", DialogueFormat::novel}, {"simple", DialogueFormat::simple}};
constexpr std::pair<std::string_view, SpanLabel> kLabels[] = {
    {"at_issue", SpanLabel::at_issue},
    {"not_at_issue", SpanLabel::not_at_issue},
    {"neither", SpanLabel::neither}};
constexpr std::pair<std::string_view, ItemKind> kKinds[] = {{"sequence", ItemKind::sequence},
                                                            {"masked", ItemKind::masked}};

template <typename Enum, std::size_t N>
std::string_view name_of(Enum v, const std::pair<std::string_view, Enum> (&table)[N]) {
  for (const auto& [name, value] : table) {
    if (value == v) return name;
  }
  return "?";
}

// Accumulates text while recording labeled spans; adjacent pieces with the
// same label merge into one maximal span.
class SpanWriter {
 public:
  void add(std::string_view piece, SpanLabel label) {
    if (piece.empty()) return;
    const std::size_t begin = text_.size();
    text_.append(piece);
    if (!spans_.empty() && spans_.back().label == label && spans_.back().end == begin) {
      spans_.back().end = text_.size();
    } else {
      spans_.push_back(LabeledSpan{begin, text_.size(), label});
    }
  }
  void append_unlabeled(std::string_view piece) { text_.append(piece); }
  std::size_t size() const { return text_.size(); }
  std::string& text() { return text_; }
  std::vector<LabeledSpan>& spans() { return spans_; }

 private:
  std::string text_;
  std::vector<LabeledSpan> spans_;
};

// Context sentence body without the final period, labeled piecewise.
void write_context_body(SpanWriter& w, const ContextSpec& spec) {
  if (spec.mode == Mode::arc) {
    w.add("The " + spec.noun, SpanLabel::at_issue);
    w.add(", ", SpanLabel::neither);
    w.add("who " + spec.vp1.text, SpanLabel::not_at_issue);
    w.add(", ", SpanLabel::neither);
    w.add(spec.vp2.text, SpanLabel::at_issue);
  } else {
    w.add(fmt::format("The {} {} and {}", spec.noun, spec.vp1.text, spec.vp2.text),
          SpanLabel::at_issue);
  }
}

std::string response_with_slot(Header header, std::string_view pronoun, std::string_view slot) {
  return fmt::format("{}, {} {} not.", header_text(header), pronoun, slot);
}

}  // namespace

std::string_view to_string(Mode m) { return name_of(m, kModes); }
std::string_view to_string(Header h) { return name_of(h, kHeaderNames); }
std::string_view to_string(Target t) { return name_of(t, kTargets); }
std::string_view to_string(DialogueFormat f) { return name_of(f, kFormats); }
std::string_view to_string(SpanLabel l) { return name_of(l, kLabels); }
std::string_view to_string(ItemKind k) { return name_of(k, kKinds); }

Mode parse_mode(std::string_view s) { return parse_enum(s, kModes, "mode"); }
Header parse_header(std::string_view s) { return parse_enum(s, kHeaderNames, "header"); }
Target parse_target(std::string_view s) { return parse_enum(s, kTargets, "target"); }
DialogueFormat parse_format(std::string_view s) { return parse_enum(s, kFormats, "format"); }
SpanLabel parse_span_label(std::string_view s) { return parse_enum(s, kLabels, "span label"); }
ItemKind parse_item_kind(std::string_view s) { return parse_enum(s, kKinds, "item kind"); }

std::string_view header_text(Header h) { return h == Header::reject ? "No" : "Wait no"; }

std::string ContextSpec::id() const {
  return fmt::format("{}-{}-{}-{}", to_string(mode), pair.embedded.surface(), pair.main.surface(),
                     index);
}

std::vector<VerbPair> ordered_pairs(std::span<const Auxiliary> auxes) {
  std::vector<Auxiliary> sorted(auxes.begin(), auxes.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw DataError("ordered_pairs: duplicate auxiliary");
  }
  if (sorted.size() < 2) throw DataError("ordered_pairs: need ≥ 2 auxiliaries");
  std::vector<VerbPair> pairs;
  pairs.reserve(sorted.size() * (sorted.size() - 1));
  for (const auto& first : sorted) {
    for (const auto& second : sorted) {
      if (first != second) pairs.push_back(VerbPair{first, second});
    }
  }
  return pairs;
}

std::vector<ContextSpec> generate_contexts(const Lexicon& lexicon, int n_per_pair,
                                           std::uint64_t seed, Mode mode) {
  if (n_per_pair < 1) throw DataError("generate_contexts: n_per_pair must be ≥ 1");
  const auto n = static_cast<std::size_t>(n_per_pair);
  Rng rng(mix_seed(seed, kContextStream));
  std::vector<ContextSpec> out;
  for (const auto& pair : ordered_pairs(lexicon.auxiliaries())) {
    const auto& embedded_vps = lexicon.verb_phrases(pair.embedded);
    const auto& main_vps = lexicon.verb_phrases(pair.main);
    for (const auto* inventory : {&embedded_vps, &main_vps}) {
      if (inventory->size() < n) {
        throw DataError(fmt::format(
            "generate_contexts: auxiliary \"{}\" has {} verb phrases, {} needed per pair",
            inventory->front().aux.surface(), inventory->size(), n));
      }
    }
    const auto vp1_idx = rng.sample_without_replacement(embedded_vps.size(), n);
    const auto vp2_idx = rng.sample_without_replacement(main_vps.size(), n);
    for (std::size_t i = 0; i < n; ++i) {
      ContextSpec spec;
      spec.mode = mode;
      spec.noun = lexicon.occupations()[rng.below(lexicon.occupations().size())];
      spec.vp1 = embedded_vps[vp1_idx[i]];
      spec.vp2 = main_vps[vp2_idx[i]];
      spec.pair = pair;
      spec.index = static_cast<int>(i);
      out.push_back(std::move(spec));
    }
  }
  return out;
}

std::string render_context(const ContextSpec& spec) {
  if (spec.mode == Mode::arc) {
    return fmt::format("The {}, who {}, {}.", spec.noun, spec.vp1.text, spec.vp2.text);
  }
  return fmt::format("The {} {} and {}.", spec.noun, spec.vp1.text, spec.vp2.text);
}

std::string render_response(Header header, std::string_view pronoun, const Auxiliary& aux) {
  return response_with_slot(header, pronoun, aux.surface());
}

std::string render_masked_response(Header header, std::string_view pronoun) {
  return response_with_slot(header, pronoun, kMaskMarker);
}

Target target_for(const ContextSpec& spec, const Auxiliary& aux) {
  const bool arc = spec.mode == Mode::arc;
  if (aux == spec.pair.main) return arc ? Target::main : Target::recent;
  if (aux == spec.pair.embedded) return arc ? Target::embedded : Target::distant;
  throw DataError(fmt::format("auxiliary \"{}\" targets no verb phrase of context {}",
                              aux.surface(), spec.id()));
}

StimulusItem render_item(const ContextSpec& spec, Header header, std::string_view pronoun,
                         const Auxiliary& aux,
                         const std::pair<std::string, std::string>& speakers,
                         DialogueFormat format) {
  if (speakers.first == speakers.second) {
    throw DataError(fmt::format("render_item: speakers must differ (both \"{}\")", speakers.first));
  }
  StimulusItem item;
  item.id = spec.id();
  item.variant = fmt::format("{}-{}", to_string(header), to_string(target_for(spec, aux)));
  item.kind = ItemKind::sequence;
  item.context = spec;
  item.header = header;
  item.pronoun = std::string(pronoun);
  item.response_aux = aux;
  item.target = target_for(spec, aux);
  item.format = format;

  SpanWriter w;
  const std::string response = render_response(header, pronoun, aux);
  if (format == DialogueFormat::novel) {
    item.speaker_a = speakers.first;
    item.speaker_b = speakers.second;
    w.add(speakers.first + " said, \"", SpanLabel::neither);
    write_context_body(w, spec);
    w.add(",\"", SpanLabel::neither);
    item.context_end = w.size();
    w.append_unlabeled(fmt::format(" and {} replied, \"{}\"", speakers.second, response));
  } else {
    item.speaker_a = "A";
    item.speaker_b = "B";
    w.add("A: \"", SpanLabel::neither);
    write_context_body(w, spec);
    w.add(".\"", SpanLabel::neither);
    item.context_end = w.size();
    w.append_unlabeled(fmt::format(" B: \"{}\"", response));
  }
  item.text = std::move(w.text());
  item.spans = std::move(w.spans());
  return item;
}

StimulusItem make_masked(StimulusItem item) {
  item.kind = ItemKind::masked;
  item.variant = fmt::format("{}-mask", to_string(item.header));
  const std::string response = render_response(item.header, item.pronoun, item.response_aux);
  const std::string masked = render_masked_response(item.header, item.pronoun);
  const auto pos = item.text.rfind(response);
  if (pos == std::string::npos || pos < item.context_end) {
    throw DataError(fmt::format("make_masked: response not found in item {}", item.id));
  }
  item.masked_text = item.text.substr(0, pos) + masked + item.text.substr(pos + response.size());
  return item;
}

SuiteConfig SuiteConfig::defaults(Mode mode) {
  SuiteConfig c;
  c.mode = mode;
  // The conjunction experiment only compares masked candidates.
  c.sequence_variants = mode == Mode::arc;
  return c;
}

const StimulusItem& Suite::at(std::string_view id, std::string_view variant) const {
  for (const auto& item : items) {
    if (item.id == id && item.variant == variant) return item;
  }
  throw DataError(fmt::format("suite has no item {} / {}", id, variant));
}

std::size_t Suite::count(ItemKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [&](const auto& i) { return i.kind == kind; }));
}

Suite build_suite(const Lexicon& lexicon, const SuiteConfig& config) {
  Suite suite;
  suite.config = config;
  suite.contexts = generate_contexts(lexicon, config.n_per_pair, config.seed, config.mode);

  Rng rng(mix_seed(config.seed, kDialogueStream));
  const auto& names = lexicon.names();
  const auto& pronouns = lexicon.pronouns();
  for (const auto& spec : suite.contexts) {
    // Speakers and pronoun are fixed per context so that variants differ only
    // in header and auxiliary.
    const auto picks = rng.sample_without_replacement(names.size(), 2);
    const std::pair<std::string, std::string> speakers{names[picks[0]], names[picks[1]]};
    const std::string& pronoun = pronouns[rng.below(pronouns.size())];

    if (config.sequence_variants) {
      for (const auto& aux : {spec.pair.main, spec.pair.embedded}) {
        for (Header h : kHeaders) {
          suite.items.push_back(render_item(spec, h, pronoun, aux, speakers, config.format));
        }
      }
    }
    if (config.masked_variants) {
      for (Header h : kHeaders) {
        suite.items.push_back(
            make_masked(render_item(spec, h, pronoun, spec.pair.main, speakers, config.format)));
      }
    }
  }
  return suite;
}

json item_to_json(const StimulusItem& item) {
  json spans = json::array();
  for (const auto& s : item.spans) {
    spans.push_back(json::array({s.begin, s.end, to_string(s.label)}));
  }
  json r = {
      {"schema_version", kSchemaVersion},
      {"id", item.id},
      {"variant", item.variant},
      {"kind", to_string(item.kind)},
      {"mode", to_string(item.context.mode)},
      {"format", to_string(item.format)},
      {"text", item.text},
      {"header", to_string(item.header)},
      {"target", to_string(item.target)},
      {"response_aux", item.response_aux.surface()},
      {"pair", {{"embedded", item.context.pair.embedded.surface()},
                {"main", item.context.pair.main.surface()}}},
      {"noun", item.context.noun},
      {"vp1", item.context.vp1.text},
      {"vp2", item.context.vp2.text},
      {"index", item.context.index},
      {"pronoun", item.pronoun},
      {"speaker_a", item.speaker_a},
      {"speaker_b", item.speaker_b},
      {"context_end", item.context_end},
      {"spans", std::move(spans)},
  };
  if (item.kind == ItemKind::masked) r["masked_text"] = item.masked_text;
  return r;
}

StimulusItem item_from_json(const json& r) {
  try {
    const int version = r.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
      throw DataError(fmt::format("suite record schema_version {} (expected {})", version,
                                  kSchemaVersion));
    }
    StimulusItem item;
    item.id = r.at("id").get<std::string>();
    item.variant = r.at("variant").get<std::string>();
    item.kind = parse_item_kind(r.at("kind").get<std::string>());
    item.context.mode = parse_mode(r.at("mode").get<std::string>());
    item.format = parse_format(r.at("format").get<std::string>());
    item.text = r.at("text").get<std::string>();
    if (item.kind == ItemKind::masked) item.masked_text = r.at("masked_text").get<std::string>();
    item.header = parse_header(r.at("header").get<std::string>());
    item.target = parse_target(r.at("target").get<std::string>());
    item.response_aux = Auxiliary(r.at("response_aux").get<std::string>());
    item.context.pair.embedded = Auxiliary(r.at("pair").at("embedded").get<std::string>());
    item.context.pair.main = Auxiliary(r.at("pair").at("main").get<std::string>());
    item.context.noun = r.at("noun").get<std::string>();
    item.context.vp1 = VerbPhraseEntry{r.at("vp1").get<std::string>(), item.context.pair.embedded};
    item.context.vp2 = VerbPhraseEntry{r.at("vp2").get<std::string>(), item.context.pair.main};
    item.context.index = r.at("index").get<int>();
    item.pronoun = r.at("pronoun").get<std::string>();
    item.speaker_a = r.at("speaker_a").get<std::string>();
    item.speaker_b = r.at("speaker_b").get<std::string>();
    item.context_end = r.at("context_end").get<std::size_t>();
    for (const auto& s : r.at("spans")) {
      item.spans.push_back(LabeledSpan{s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(),
                                       parse_span_label(s.at(2).get<std::string>())});
    }
    if (item.id != item.context.id()) {
      throw DataError(fmt::format("suite record id {} does not match its context fields", item.id));
    }
    return item;
  } catch (const json::exception& e) {
    throw DataError(fmt::format("malformed suite record: {}", e.what()));
  }
}

std::string serialize_suite(const Suite& suite) {
  std::string out;
  for (const auto& item : suite.items) {
    out += item_to_json(item).dump();
    out += '\n';
  }
  return out;
}

void write_suite(const Suite& suite, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("{}: cannot write suite file", path.string()));
  out << serialize_suite(suite);
  if (!out) throw DataError(fmt::format("{}: write failed", path.string()));
}

Suite read_suite(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("{}: cannot open suite file", path.string()));
  Suite suite;
  std::set<std::string> seen_contexts;
  std::set<std::pair<std::string, std::string>> seen_items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    StimulusItem item;
    try {
      item = item_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
    if (!seen_items.emplace(item.id, item.variant).second) {
      throw DataError(fmt::format("{}:{}: duplicate item {} / {}", path.string(), line_no,
                                  item.id, item.variant));
    }
    if (seen_contexts.insert(item.id).second) suite.contexts.push_back(item.context);
    suite.config.mode = item.context.mode;
    suite.config.format = item.format;
    suite.items.push_back(std::move(item));
  }
  suite.config.sequence_variants = suite.count(ItemKind::sequence) > 0;
  suite.config.masked_variants = suite.count(ItemKind::masked) > 0;
  return suite;
}

}  // namespace dlgresp
