#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dlgresp/common.hpp"
#include "json.hpp"

namespace dlgresp {

/// Surface form of a stranded auxiliary in an elided response ("did", "would").
class Auxiliary {
 public:
  Auxiliary() = default;
  explicit Auxiliary(std::string surface) : surface_(std::move(surface)) {}

  const std::string& surface() const { return surface_; }

  auto operator<=>(const Auxiliary&) const = default;
  bool operator==(const Auxiliary&) const = default;

 private:
  std::string surface_;
};

std::vector<Auxiliary> make_auxiliaries(const std::vector<std::string>& surfaces);

struct VerbPhraseEntry {
  std::string text;  // no subject, no final punctuation
  Auxiliary aux;     // the auxiliary that elides this phrase

  bool operator==(const VerbPhraseEntry&) const = default;
};

inline constexpr std::size_t kMinAuxiliaries = 2;
inline constexpr std::size_t kMinVerbPhrasesPerAux = 10;
inline constexpr std::size_t kMinNames = 2;

class LexiconError : public DataError {
 public:
  using DataError::DataError;
};

/// Controlled vocabulary for stimulus generation. Immutable once built; every
/// instance satisfies the validation rules enforced by parse_lexicon.
class Lexicon {
 public:
  /// Validates and builds. Throws LexiconError naming the offending key.
  static Lexicon from_json(const nlohmann::json& doc);

  const std::vector<Auxiliary>& auxiliaries() const { return auxiliaries_; }
  const std::vector<VerbPhraseEntry>& verb_phrases(const Auxiliary& aux) const;
  const std::map<Auxiliary, std::vector<VerbPhraseEntry>>& all_verb_phrases() const {
    return verb_phrases_;
  }
  const std::vector<std::string>& occupations() const { return occupations_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::string>& pronouns() const { return pronouns_; }

  std::size_t verb_phrase_count() const;

  /// The auxiliary that elides `verb_phrase`, if the phrase is in the lexicon.
  std::optional<Auxiliary> lookup(std::string_view verb_phrase) const;

  nlohmann::json to_json() const;

  bool operator==(const Lexicon& other) const;

 private:
  Lexicon() = default;

  std::vector<Auxiliary> auxiliaries_;
  std::map<Auxiliary, std::vector<VerbPhraseEntry>> verb_phrases_;
  std::vector<std::string> occupations_;
  std::vector<std::string> names_;
  std::vector<std::string> pronouns_;
  std::map<std::string, Auxiliary, std::less<>> index_;
};

/// Parses lexicon JSON text. Syntax errors cite line and column.
Lexicon parse_lexicon(std::string_view text, std::string_view source = "<memory>");
Lexicon load_lexicon(const std::filesystem::path& path);
void save_lexicon(const Lexicon& lexicon, const std::filesystem::path& path);

/// The lexicon compiled in from data/default_lexicon.json.
const Lexicon& default_lexicon();
std::string_view default_lexicon_text();

/// Digest of the canonical serialization.
std::string lexicon_digest(const Lexicon& lexicon);

/// Copy of `lexicon` restricted to `keep` (order-insensitive). Throws if any
/// requested auxiliary is unknown or fewer than two remain.
Lexicon restrict_auxiliaries(const Lexicon& lexicon, const std::vector<Auxiliary>& keep);

}  // namespace dlgresp
