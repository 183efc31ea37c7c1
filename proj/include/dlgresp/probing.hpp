#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dlgresp/scoring.hpp"
#include "dlgresp/stimgen.hpp"
#include "json.hpp"

namespace dlgresp {

inline constexpr int kProbeClasses = 3;  // indexed by SpanLabel

struct TokenRecord {
  std::string item_id;  // context id; the split groups on this
  std::string variant;
  int token_index = 0;
  std::string token;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<float> embedding;
  SpanLabel label = SpanLabel::neither;

  bool operator==(const TokenRecord&) const = default;
};

struct ProbeConfig {
  int hidden_size = 50;
  double train_fraction = 0.7;
  int repetitions = 3;
  std::uint64_t seed = 2024;
  int max_epochs = 50;
  int patience = 5;
  double learning_rate = 1e-3;
  int batch_size = 32;
  double validation_fraction = 0.1;  // of training items, for early stopping

  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

/// Label of the character range [begin, end) of `item`: the span holding its
/// midpoint. nullopt when the midpoint falls outside the context region.
std::optional<SpanLabel> label_at(const StimulusItem& item, std::size_t begin, std::size_t end);

/// One record per backend token of each masked instance's context region,
/// embedded in the fully rendered dialogue.
std::vector<TokenRecord> build_probe_dataset(const Suite& suite, ScorerBackend& backend);

/// Item-level partition; the first element is the training side.
std::pair<std::vector<TokenRecord>, std::vector<TokenRecord>> split_by_item(
    std::span<const TokenRecord> records, double train_fraction, std::uint64_t seed);

/// input -> standardize -> hidden (ReLU) -> softmax over the three labels.
struct Probe {
  Eigen::VectorXf mean;
  Eigen::VectorXf scale;
  Eigen::MatrixXf w1;  // hidden x input
  Eigen::VectorXf b1;
  Eigen::MatrixXf w2;  // classes x hidden
  Eigen::VectorXf b2;
  int epochs_trained = 0;

  SpanLabel predict(std::span<const float> embedding) const;
  double accuracy(std::span<const TokenRecord> records) const;
};

/// Adam on mini-batches, early-stopped on held-out training items. The same
/// records and seed always give the same weights, whatever their order.
Probe train_probe(std::span<const TokenRecord> train, const ProbeConfig& config,
                  std::uint64_t seed);

struct ProbeRun {
  std::uint64_t seed = 0;
  std::size_t train_items = 0;
  std::size_t test_items = 0;
  std::size_t train_tokens = 0;
  std::size_t test_tokens = 0;
  double train_accuracy = 0.0;
  double accuracy = 0.0;
  double majority_share = 0.0;  // most frequent label's share of the test split
  int epochs = 0;
};

struct ProbeResult {
  ProbeConfig config;
  std::vector<ProbeRun> runs;
  double mean_accuracy = 0.0;
  std::size_t dimension = 0;
};

ProbeResult run_probe_protocol(std::span<const TokenRecord> records, const ProbeConfig& config);
ProbeResult run_probe_protocol(const Suite& suite, ScorerBackend& backend,
                               const ProbeConfig& config);

nlohmann::json probe_result_to_json(const ProbeResult& result);
nlohmann::json token_record_to_json(const TokenRecord& record);
TokenRecord token_record_from_json(const nlohmann::json& j);
void write_probe_dataset(std::span<const TokenRecord> records, const std::filesystem::path& path);
std::vector<TokenRecord> read_probe_dataset(const std::filesystem::path& path);

}  // namespace dlgresp
