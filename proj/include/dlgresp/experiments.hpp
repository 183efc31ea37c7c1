#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlgresp/scoring.hpp"
#include "dlgresp/stats.hpp"
#include "dlgresp/stimgen.hpp"
#include "json.hpp"

namespace dlgresp {

enum class Experiment { header, rejection, conjunction, ellipsis_top1, ellipsis_top2 };
std::string_view to_string(Experiment e);
Experiment parse_experiment(std::string_view s);

enum class Winner { a, b, tie };
std::string_view to_string(Winner w);

/// One scored comparison. For pairwise tests `a` is the option the
/// experiment counts as a success ("No" header, main-clause or recent
/// auxiliary). For top-k tests `a` means the correct set outranks every
/// other candidate and margin is the score gap at the top-k boundary.
struct ComparisonOutcome {
  std::string item_id;
  std::string variant;
  std::string group;
  Winner winner = Winner::tie;
  double margin = 0.0;
  double credit = 0.0;  // contribution to the group's successes
};

struct GroupTally {
  double successes = 0.0;  // ties add 0.5 in pairwise tests
  int n = 0;
  int ties = 0;
};

struct Reference {
  double value = 0.0;
  std::string label;
  bool approximate = false;
};

struct ExperimentResult {
  Experiment experiment = Experiment::header;
  std::map<std::string, GroupTally> groups;
  std::vector<ComparisonOutcome> per_item;
  std::map<std::string, Reference> references;
  // Rejection test: reject-header indicators against wait-header indicators.
  std::optional<stats::TTestResult> header_contrast;
  std::string header_contrast_note;  // why header_contrast is absent, if it is

  std::size_t total_n() const;
};

struct ExperimentOptions {
  double tie_epsilon = 0.0;
  std::vector<Auxiliary> candidates;  // full candidate set for masked scoring
};

/// Score lookup keyed by (item_id, variant).
class ScoreIndex {
 public:
  ScoreIndex() = default;
  explicit ScoreIndex(std::span<const ScoreRecord> records);

  void add(ScoreRecord record);
  const ScoreRecord& at(const std::string& item_id, const std::string& variant) const;
  const ScoreRecord* find(const std::string& item_id, const std::string& variant) const;
  std::size_t size() const { return records_.size(); }

 private:
  std::map<std::pair<std::string, std::string>, ScoreRecord> records_;
};

/// Items an experiment needs scored.
std::vector<StimulusItem> items_for(Experiment experiment, const Suite& suite);
Mode mode_for(Experiment experiment);

ExperimentResult run_header_test(const Suite& suite, const ScoreIndex& scores,
                                 const ExperimentOptions& options = {});
ExperimentResult run_rejection_test(const Suite& suite, const ScoreIndex& scores,
                                    const ExperimentOptions& options = {});
ExperimentResult run_conjunction_test(const Suite& suite, const ScoreIndex& scores,
                                      const ExperimentOptions& options = {});
ExperimentResult run_ellipsis_top1(const Suite& suite, const ScoreIndex& scores,
                                   const ExperimentOptions& options);
ExperimentResult run_ellipsis_top2(const Suite& suite, const ScoreIndex& scores,
                                   const ExperimentOptions& options);

ExperimentResult run_experiment(Experiment experiment, const Suite& suite,
                                const ScoreIndex& scores, const ExperimentOptions& options);

/// Scores what the experiment needs with `backend`, then runs it.
ExperimentResult run_experiment(Experiment experiment, const Suite& suite, ScorerBackend& backend,
                                const ExperimentOptions& options);

/// Intruding auxiliaries among top-k errors, per header. Intruders are
/// top-k candidates outside the item's relevant pair; top-1 reject errors
/// won by the embedded-clause auxiliary are counted separately.
struct ErrorDistribution {
  int k = 1;
  std::map<std::string, std::map<Auxiliary, double>> proportions;
  std::map<std::string, std::map<Auxiliary, int>> counts;
  std::map<std::string, int> erroneous_items;
  std::map<std::string, int> embedded_wins;
};

ErrorDistribution error_distribution(const ExperimentResult& result, const Suite& suite,
                                     const ScoreIndex& scores, std::span<const Auxiliary> candidates,
                                     int k);

/// Rejection outcomes regrouped by the auxiliary that targets the ARC
/// ("embedded") and the one that targets the main clause ("main").
struct VerbBreakdown {
  // grouping -> auxiliary -> header -> tally
  std::map<std::string, std::map<Auxiliary, std::map<std::string, GroupTally>>> cells;
};

VerbBreakdown verb_breakdown(const ExperimentResult& rejection, const Suite& suite);

nlohmann::json result_to_json(const ExperimentResult& result, double ci_level = 0.95);
nlohmann::json errors_to_json(const ErrorDistribution& errors);
nlohmann::json breakdown_to_json(const VerbBreakdown& breakdown, double ci_level = 0.95);

}  // namespace dlgresp
