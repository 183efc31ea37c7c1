#include "dlgresp/lexicon.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace dlgresp {

namespace detail {
extern const char* const kDefaultLexiconJson;
}

namespace {

using nlohmann::json;

const std::set<std::string, std::less<>> kAllowedPronouns = {"he", "she"};
const std::set<std::string, std::less<>> kTopLevelKeys = {"auxiliaries", "verb_phrases",
                                                          "occupations", "names", "pronouns"};

[[noreturn]] void fail(const std::string& key, const std::string& message) {
  throw LexiconError(fmt::format("lexicon: {}: {}", key, message));
}

std::vector<std::string> string_list(const json& doc, const std::string& key,
                                     const std::string& display = {}) {
  const std::string& shown = display.empty() ? key : display;
  if (!doc.contains(key)) fail(shown, "missing required key");
  const json& node = doc.at(key);
  if (!node.is_array()) fail(shown, "expected an array of strings");
  std::vector<std::string> out;
  out.reserve(node.size());
  for (std::size_t i = 0; i < node.size(); ++i) {
    const std::string where = fmt::format("{}[{}]", shown, i);
    if (!node[i].is_string()) fail(where, "expected a string");
    std::string value = node[i].get<std::string>();
    if (trim(value).empty()) fail(where, "empty entry");
    if (trim(value) != value) fail(where, fmt::format("surrounding whitespace in \"{}\"", value));
    out.push_back(std::move(value));
  }
  return out;
}

void require_distinct(const std::vector<std::string>& values, const std::string& key) {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!seen.insert(values[i]).second) {
      fail(fmt::format("{}[{}]", key, i), fmt::format("duplicate entry \"{}\"", values[i]));
    }
  }
}

std::pair<std::size_t, std::size_t> line_and_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace

std::vector<Auxiliary> make_auxiliaries(const std::vector<std::string>& surfaces) {
  std::vector<Auxiliary> out;
  out.reserve(surfaces.size());
  for (const auto& s : surfaces) out.emplace_back(s);
  return out;
}

Lexicon Lexicon::from_json(const json& doc) {
  if (!doc.is_object()) fail("<root>", "expected a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (!kTopLevelKeys.contains(key)) fail(key, "unknown top-level key");
  }

  Lexicon lex;

  const auto aux_surfaces = string_list(doc, "auxiliaries");
  require_distinct(aux_surfaces, "auxiliaries");
  if (aux_surfaces.size() < kMinAuxiliaries) {
    fail("auxiliaries", fmt::format("need ≥ {} auxiliaries, found {}", kMinAuxiliaries,
                                    aux_surfaces.size()));
  }
  for (std::size_t i = 0; i < aux_surfaces.size(); ++i) {
    if (aux_surfaces[i].find(' ') != std::string::npos) {
      fail(fmt::format("auxiliaries[{}]", i), "auxiliary must be a single word");
    }
  }
  lex.auxiliaries_ = make_auxiliaries(aux_surfaces);
  std::sort(lex.auxiliaries_.begin(), lex.auxiliaries_.end());

  if (!doc.contains("verb_phrases")) fail("verb_phrases", "missing required key");
  const json& vp_node = doc.at("verb_phrases");
  if (!vp_node.is_object()) fail("verb_phrases", "expected an object keyed by auxiliary");

  for (const auto& [aux_key, list] : vp_node.items()) {
    const Auxiliary aux(aux_key);
    if (!std::binary_search(lex.auxiliaries_.begin(), lex.auxiliaries_.end(), aux)) {
      fail("verb_phrases." + aux_key, fmt::format("unknown auxiliary key \"{}\"", aux_key));
    }
    const std::string list_key = "verb_phrases." + aux_key;
    auto texts = string_list(vp_node, aux_key, list_key);
    auto& entries = lex.verb_phrases_[aux];
    for (std::size_t i = 0; i < texts.size(); ++i) {
      const std::string where = fmt::format("{}[{}]", list_key, i);
      const std::string& text = texts[i];
      const char last = text.back();
      if (last == '.' || last == '!' || last == '?') {
        fail(where, fmt::format("verb phrase \"{}\" ends with sentence punctuation", text));
      }
      if (auto it = lex.index_.find(text); it != lex.index_.end()) {
        if (it->second == aux) {
          fail(where, fmt::format("duplicate verb phrase \"{}\"", text));
        }
        fail(where, fmt::format("ambiguous verb phrase \"{}\": listed under both \"{}\" and \"{}\"",
                                text, it->second.surface(), aux.surface()));
      }
      lex.index_.emplace(text, aux);
      entries.push_back(VerbPhraseEntry{text, aux});
    }
  }
  for (const auto& aux : lex.auxiliaries_) {
    const auto it = lex.verb_phrases_.find(aux);
    const std::size_t count = it == lex.verb_phrases_.end() ? 0 : it->second.size();
    if (count < kMinVerbPhrasesPerAux) {
      fail("verb_phrases." + aux.surface(),
           fmt::format("insufficient verb phrases for auxiliary \"{}\": {} < {}", aux.surface(),
                       count, kMinVerbPhrasesPerAux));
    }
  }

  lex.occupations_ = string_list(doc, "occupations");
  if (lex.occupations_.empty()) fail("occupations", "need at least one occupation");
  require_distinct(lex.occupations_, "occupations");

  lex.names_ = string_list(doc, "names");
  require_distinct(lex.names_, "names");
  if (lex.names_.size() < kMinNames) {
    fail("names", fmt::format("need ≥ {} distinct names, found {}", kMinNames, lex.names_.size()));
  }

  lex.pronouns_ = string_list(doc, "pronouns");
  if (lex.pronouns_.empty()) fail("pronouns", "need at least one pronoun");
  require_distinct(lex.pronouns_, "pronouns");
  for (std::size_t i = 0; i < lex.pronouns_.size(); ++i) {
    if (!kAllowedPronouns.contains(lex.pronouns_[i])) {
      fail(fmt::format("pronouns[{}]", i),
           fmt::format("unsupported pronoun \"{}\" (allowed: he, she)", lex.pronouns_[i]));
    }
  }
  return lex;
}

const std::vector<VerbPhraseEntry>& Lexicon::verb_phrases(const Auxiliary& aux) const {
  auto it = verb_phrases_.find(aux);
  if (it == verb_phrases_.end()) {
    throw LexiconError(fmt::format("lexicon: no verb phrases for auxiliary \"{}\"", aux.surface()));
  }
  return it->second;
}

std::size_t Lexicon::verb_phrase_count() const {
  std::size_t n = 0;
  for (const auto& [aux, list] : verb_phrases_) n += list.size();
  return n;
}

std::optional<Auxiliary> Lexicon::lookup(std::string_view verb_phrase) const {
  if (auto it = index_.find(verb_phrase); it != index_.end()) return it->second;
  return std::nullopt;
}

json Lexicon::to_json() const {
  json doc = json::object();
  json auxes = json::array();
  for (const auto& a : auxiliaries_) auxes.push_back(a.surface());
  doc["auxiliaries"] = std::move(auxes);
  json vps = json::object();
  for (const auto& [aux, list] : verb_phrases_) {
    json arr = json::array();
    for (const auto& e : list) arr.push_back(e.text);
    vps[aux.surface()] = std::move(arr);
  }
  doc["verb_phrases"] = std::move(vps);
  doc["occupations"] = occupations_;
  doc["names"] = names_;
  doc["pronouns"] = pronouns_;
  return doc;
}

bool Lexicon::operator==(const Lexicon& other) const {
  return auxiliaries_ == other.auxiliaries_ && verb_phrases_ == other.verb_phrases_ &&
         occupations_ == other.occupations_ && names_ == other.names_ &&
         pronouns_ == other.pronouns_;
}

Lexicon parse_lexicon(std::string_view text, std::string_view source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_and_column(text, e.byte == 0 ? 0 : e.byte - 1);
    throw LexiconError(fmt::format("{}:{}:{}: lexicon parse error: {}", source, line, col, e.what()));
  }
  try {
    return Lexicon::from_json(doc);
  } catch (const LexiconError& e) {
    throw LexiconError(fmt::format("{}: {}", source, e.what()));
  }
}

Lexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LexiconError(fmt::format("{}: cannot open lexicon file", path.string()));
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_lexicon(buf.str(), path.string());
}

void save_lexicon(const Lexicon& lexicon, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("{}: cannot write lexicon file", path.string()));
  out << lexicon.to_json().dump(2) << '\n';
}

std::string_view default_lexicon_text() { return detail::kDefaultLexiconJson; }

const Lexicon& default_lexicon() {
  static const Lexicon lexicon = parse_lexicon(default_lexicon_text(), "<default lexicon>");
  return lexicon;
}

std::string lexicon_digest(const Lexicon& lexicon) { return fnv1a_hex(lexicon.to_json().dump()); }

Lexicon restrict_auxiliaries(const Lexicon& lexicon, const std::vector<Auxiliary>& keep) {
  json doc = lexicon.to_json();
  json auxes = json::array();
  json vps = json::object();
  for (const auto& aux : keep) {
    if (!lexicon.all_verb_phrases().contains(aux)) {
      throw LexiconError(fmt::format("lexicon: unknown auxiliary \"{}\"", aux.surface()));
    }
    auxes.push_back(aux.surface());
    vps[aux.surface()] = doc["verb_phrases"][aux.surface()];
  }
  doc["auxiliaries"] = std::move(auxes);
  doc["verb_phrases"] = std::move(vps);
  return Lexicon::from_json(doc);
}

}  // namespace dlgresp
