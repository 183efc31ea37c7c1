#include "dlgresp/probing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <fmt/format.h>

namespace dlgresp {

using nlohmann::json;

namespace {

constexpr float kAdamBeta1 = 0.9f;
constexpr float kAdamBeta2 = 0.999f;
constexpr float kAdamEps = 1e-8f;

int label_index(SpanLabel l) { return static_cast<int>(l); }

bool canonical_less(const TokenRecord* a, const TokenRecord* b) {
  return std::tie(a->item_id, a->variant, a->token_index) <
         std::tie(b->item_id, b->variant, b->token_index);
}

std::vector<const TokenRecord*> canonical(std::span<const TokenRecord> records) {
  std::vector<const TokenRecord*> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(&r);
  std::sort(out.begin(), out.end(), canonical_less);
  return out;
}

std::vector<std::string> item_ids(std::span<const TokenRecord* const> records) {
  std::set<std::string> ids;
  for (const auto* r : records) ids.insert(r->item_id);
  return {ids.begin(), ids.end()};
}

std::size_t common_dimension(std::span<const TokenRecord* const> records) {
  if (records.empty()) throw DataError("probe: no token records");
  const std::size_t dim = records.front()->embedding.size();
  if (dim == 0) throw DataError("probe: empty embedding");
  for (const auto* r : records) {
    if (r->embedding.size() != dim) {
      throw DataError(fmt::format("probe: embedding dimension {} for {} token {}, expected {}",
                                  r->embedding.size(), r->item_id, r->token_index, dim));
    }
  }
  return dim;
}

struct Adam {
  Eigen::MatrixXf m, v;
  explicit Adam(Eigen::Index rows, Eigen::Index cols)
      : m(Eigen::MatrixXf::Zero(rows, cols)), v(Eigen::MatrixXf::Zero(rows, cols)) {}

  template <typename Param, typename Grad>
  void step(Param& p, const Grad& g, float lr, int t) {
    m = kAdamBeta1 * m + (1.0f - kAdamBeta1) * g;
    v = kAdamBeta2 * v + (1.0f - kAdamBeta2) * g.cwiseProduct(g);
    const float c1 = 1.0f - std::pow(kAdamBeta1, static_cast<float>(t));
    const float c2 = 1.0f - std::pow(kAdamBeta2, static_cast<float>(t));
    p -= (lr * (m / c1).array() / ((v / c2).array().sqrt() + kAdamEps)).matrix();
  }
};

// Columns are standardized samples.
struct Batch {
  Eigen::MatrixXf x;
  std::vector<int> y;
};

Batch make_batch(const Probe& probe, std::span<const TokenRecord* const> records,
                 std::span<const std::size_t> rows) {
  Batch b;
  b.x.resize(probe.mean.size(), static_cast<Eigen::Index>(rows.size()));
  b.y.reserve(rows.size());
  for (std::size_t c = 0; c < rows.size(); ++c) {
    const auto* r = records[rows[c]];
    Eigen::Map<const Eigen::VectorXf> e(r->embedding.data(),
                                        static_cast<Eigen::Index>(r->embedding.size()));
    b.x.col(static_cast<Eigen::Index>(c)) = (e - probe.mean).cwiseQuotient(probe.scale);
    b.y.push_back(label_index(r->label));
  }
  return b;
}

Eigen::MatrixXf softmax_columns(const Eigen::MatrixXf& z) {
  Eigen::MatrixXf p = z;
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    auto col = p.col(c);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    col /= col.sum();
  }
  return p;
}

double mean_loss(const Probe& probe, std::span<const TokenRecord* const> records) {
  std::vector<std::size_t> rows(records.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const Batch b = make_batch(probe, records, rows);
  const Eigen::MatrixXf h = ((probe.w1 * b.x).colwise() + probe.b1).cwiseMax(0.0f);
  const Eigen::MatrixXf p = softmax_columns((probe.w2 * h).colwise() + probe.b2);
  double loss = 0.0;
  for (std::size_t c = 0; c < b.y.size(); ++c) {
    loss -= std::log(std::max(p(b.y[c], static_cast<Eigen::Index>(c)), 1e-30f));
  }
  return loss / static_cast<double>(b.y.size());
}

}  // namespace

json ProbeConfig::to_json() const {
  return json{{"hidden_size", hidden_size},
              {"train_fraction", train_fraction},
              {"repetitions", repetitions},
              {"seed", seed},
              {"max_epochs", max_epochs},
              {"patience", patience},
              {"learning_rate", learning_rate},
              {"batch_size", batch_size},
              {"validation_fraction", validation_fraction}};
}

ProbeConfig ProbeConfig::from_json(const json& j) {
  ProbeConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "hidden_size") c.hidden_size = value.get<int>();
    else if (key == "train_fraction") c.train_fraction = value.get<double>();
    else if (key == "repetitions") c.repetitions = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "max_epochs") c.max_epochs = value.get<int>();
    else if (key == "patience") c.patience = value.get<int>();
    else if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "validation_fraction") c.validation_fraction = value.get<double>();
    else throw DataError(fmt::format("probe config: unknown key \"{}\"", key));
  }
  if (c.hidden_size < 1 || c.repetitions < 1 || c.max_epochs < 1 || c.batch_size < 1 ||
      c.patience < 1 || !(c.learning_rate > 0.0)) {
    throw DataError("probe config: sizes, epochs, patience and learning rate must be positive");
  }
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) {
    throw DataError("probe config: train_fraction must lie in (0, 1)");
  }
  if (!(c.validation_fraction >= 0.0 && c.validation_fraction < 1.0)) {
    throw DataError("probe config: validation_fraction must lie in [0, 1)");
  }
  return c;
}

std::optional<SpanLabel> label_at(const StimulusItem& item, std::size_t begin, std::size_t end) {
  if (end <= begin) return std::nullopt;
  // Twice the midpoint, to stay in integers.
  const std::size_t mid2 = begin + end - 1;
  if (mid2 >= 2 * item.context_end) return std::nullopt;
  for (const auto& s : item.spans) {
    if (mid2 >= 2 * s.begin && mid2 < 2 * s.end) return s.label;
  }
  return std::nullopt;
}

std::vector<TokenRecord> build_probe_dataset(const Suite& suite, ScorerBackend& backend) {
  if (!backend.capabilities().has(Capability::embeddings)) {
    throw UnsupportedCapability(
        fmt::format("backend {} does not provide token embeddings", backend.model_id()));
  }
  std::vector<TokenRecord> out;
  std::size_t dim = 0;
  bool any = false;
  for (const auto& item : suite.items) {
    if (item.kind != ItemKind::masked) continue;
    any = true;
    ScoreRequest req{item.id, item.variant, item.text, {}, {}};
    const auto embedded = backend.embeddings(req);
    int index = 0;
    for (const auto& e : embedded) {
      if (e.token.begin > e.token.end || e.token.end > item.text.size()) {
        throw BackendError(fmt::format(
            "token \"{}\" of {} / {} has offsets [{}, {}) outside the {}-character text",
            e.token.text, item.id, item.variant, e.token.begin, e.token.end, item.text.size()));
      }
      const auto label = label_at(item, e.token.begin, e.token.end);
      if (!label) continue;
      if (dim == 0) dim = e.vector.size();
      if (e.vector.size() != dim || dim == 0) {
        throw BackendError(fmt::format("embedding dimension {} for {} / {}, expected {}",
                                       e.vector.size(), item.id, item.variant, dim));
      }
      TokenRecord r;
      r.item_id = item.id;
      r.variant = item.variant;
      r.token_index = index++;
      r.token = e.token.text;
      r.begin = e.token.begin;
      r.end = e.token.end;
      r.embedding = e.vector;
      r.label = *label;
      out.push_back(std::move(r));
    }
  }
  if (!any) throw DataError("probe dataset: suite contains no masked instances");
  return out;
}

std::pair<std::vector<TokenRecord>, std::vector<TokenRecord>> split_by_item(
    std::span<const TokenRecord> records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw UsageError("split_by_item: train_fraction must lie in (0, 1)");
  }
  const auto sorted = canonical(records);
  auto ids = item_ids(sorted);
  const auto n_train =
      static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ids.size())));
  if (n_train == 0 || n_train >= ids.size()) {
    throw DataError(fmt::format("split_by_item: {} items cannot fill both sides at fraction {}",
                                ids.size(), train_fraction));
  }
  Rng rng(mix_seed(seed, 11));
  rng.shuffle(ids);
  const std::set<std::string> train_ids(ids.begin(), ids.begin() + static_cast<long>(n_train));

  std::pair<std::vector<TokenRecord>, std::vector<TokenRecord>> out;
  for (const auto* r : sorted) {
    (train_ids.count(r->item_id) ? out.first : out.second).push_back(*r);
  }
  return out;
}

SpanLabel Probe::predict(std::span<const float> embedding) const {
  if (static_cast<Eigen::Index>(embedding.size()) != mean.size()) {
    throw DataError(fmt::format("probe: input dimension {}, expected {}", embedding.size(),
                                mean.size()));
  }
  Eigen::Map<const Eigen::VectorXf> e(embedding.data(), static_cast<Eigen::Index>(embedding.size()));
  const Eigen::VectorXf x = (e - mean).cwiseQuotient(scale);
  const Eigen::VectorXf h = (w1 * x + b1).cwiseMax(0.0f);
  const Eigen::VectorXf z = w2 * h + b2;
  Eigen::Index best = 0;
  z.maxCoeff(&best);
  return static_cast<SpanLabel>(best);
}

double Probe::accuracy(std::span<const TokenRecord> records) const {
  if (records.empty()) throw DataError("probe: accuracy of an empty set");
  std::size_t correct = 0;
  for (const auto& r : records) {
    if (predict(r.embedding) == r.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

Probe train_probe(std::span<const TokenRecord> train, const ProbeConfig& config,
                  std::uint64_t seed) {
  const auto sorted = canonical(train);
  const std::size_t dim = common_dimension(sorted);
  std::set<SpanLabel> labels;
  for (const auto* r : sorted) labels.insert(r->label);
  if (labels.size() < 2) {
    throw DataError("probe: training data holds a single class");
  }

  // Held-out items for early stopping.
  std::vector<const TokenRecord*> fit, held;
  auto ids = item_ids(sorted);
  const auto n_held = static_cast<std::size_t>(
      std::llround(config.validation_fraction * static_cast<double>(ids.size())));
  if (n_held > 0 && n_held < ids.size()) {
    Rng rng(mix_seed(seed, 21));
    rng.shuffle(ids);
    const std::set<std::string> held_ids(ids.begin(), ids.begin() + static_cast<long>(n_held));
    for (const auto* r : sorted) (held_ids.count(r->item_id) ? held : fit).push_back(r);
  } else {
    fit = sorted;
  }

  Probe p;
  const auto d = static_cast<Eigen::Index>(dim);
  const auto h = static_cast<Eigen::Index>(config.hidden_size);
  p.mean = Eigen::VectorXf::Zero(d);
  p.scale = Eigen::VectorXf::Zero(d);
  {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
    for (const auto* r : fit) {
      for (Eigen::Index i = 0; i < d; ++i) {
        const double v = r->embedding[static_cast<std::size_t>(i)];
        sum[i] += v;
        sq[i] += v * v;
      }
    }
    const double n = static_cast<double>(fit.size());
    for (Eigen::Index i = 0; i < d; ++i) {
      const double m = sum[i] / n;
      const double var = std::max(0.0, sq[i] / n - m * m);
      p.mean[i] = static_cast<float>(m);
      p.scale[i] = var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f;
    }
  }

  Rng rng(mix_seed(seed, 22));
  auto he = [&](Eigen::Index rows, Eigen::Index cols, double fan_in) {
    Eigen::MatrixXf m(rows, cols);
    const double s = std::sqrt(2.0 / fan_in);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = static_cast<float>(rng.normal() * s);
    return m;
  };
  p.w1 = he(h, d, static_cast<double>(d));
  p.b1 = Eigen::VectorXf::Zero(h);
  p.w2 = he(kProbeClasses, h, static_cast<double>(h));
  p.b2 = Eigen::VectorXf::Zero(kProbeClasses);

  Adam aw1(h, d), ab1(h, 1), aw2(kProbeClasses, h), ab2(kProbeClasses, 1);
  const float lr = static_cast<float>(config.learning_rate);
  int t = 0;

  std::vector<std::size_t> order(fit.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Probe best = p;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const Batch b = make_batch(p, fit, std::span(order).subspan(start, stop - start));
      const auto bs = static_cast<float>(b.y.size());

      const Eigen::MatrixXf pre = (p.w1 * b.x).colwise() + p.b1;
      const Eigen::MatrixXf act = pre.cwiseMax(0.0f);
      Eigen::MatrixXf dz = softmax_columns((p.w2 * act).colwise() + p.b2);
      for (std::size_t c = 0; c < b.y.size(); ++c) dz(b.y[c], static_cast<Eigen::Index>(c)) -= 1.0f;
      dz /= bs;

      const Eigen::MatrixXf gw2 = dz * act.transpose();
      const Eigen::VectorXf gb2 = dz.rowwise().sum();
      const Eigen::MatrixXf dh =
          (p.w2.transpose() * dz).cwiseProduct((pre.array() > 0.0f).cast<float>().matrix());
      const Eigen::MatrixXf gw1 = dh * b.x.transpose();
      const Eigen::VectorXf gb1 = dh.rowwise().sum();

      ++t;
      aw1.step(p.w1, gw1, lr, t);
      ab1.step(p.b1, gb1, lr, t);
      aw2.step(p.w2, gw2, lr, t);
      ab2.step(p.b2, gb2, lr, t);
    }
    p.epochs_trained = epoch;
    if (held.empty()) continue;
    const double loss = mean_loss(p, held);
    if (loss < best_loss) {
      best_loss = loss;
      best = p;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  if (held.empty()) return p;
  return best;
}

ProbeResult run_probe_protocol(std::span<const TokenRecord> records, const ProbeConfig& config) {
  ProbeResult result;
  result.config = config;
  result.dimension = common_dimension(canonical(records));
  double sum = 0.0;
  for (int rep = 0; rep < config.repetitions; ++rep) {
    ProbeRun run;
    run.seed = mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(rep));
    const auto [train, test] = split_by_item(records, config.train_fraction, run.seed);
    const Probe probe = train_probe(train, config, run.seed);

    std::set<std::string> train_ids, test_ids;
    for (const auto& r : train) train_ids.insert(r.item_id);
    for (const auto& r : test) test_ids.insert(r.item_id);
    std::map<SpanLabel, std::size_t> counts;
    for (const auto& r : test) ++counts[r.label];
    std::size_t majority = 0;
    for (const auto& [l, c] : counts) majority = std::max(majority, c);

    run.train_items = train_ids.size();
    run.test_items = test_ids.size();
    run.train_tokens = train.size();
    run.test_tokens = test.size();
    run.train_accuracy = probe.accuracy(train);
    run.accuracy = probe.accuracy(test);
    run.majority_share = static_cast<double>(majority) / static_cast<double>(test.size());
    run.epochs = probe.epochs_trained;
    sum += run.accuracy;
    result.runs.push_back(run);
  }
  result.mean_accuracy = sum / static_cast<double>(result.runs.size());
  return result;
}

ProbeResult run_probe_protocol(const Suite& suite, ScorerBackend& backend,
                               const ProbeConfig& config) {
  const auto records = build_probe_dataset(suite, backend);
  return run_probe_protocol(records, config);
}

json probe_result_to_json(const ProbeResult& result) {
  json runs = json::array();
  for (const auto& r : result.runs) {
    runs.push_back({{"seed", r.seed},
                    {"train_items", r.train_items},
                    {"test_items", r.test_items},
                    {"train_tokens", r.train_tokens},
                    {"test_tokens", r.test_tokens},
                    {"train_accuracy", r.train_accuracy},
                    {"accuracy", r.accuracy},
                    {"majority_share", r.majority_share},
                    {"epochs", r.epochs}});
  }
  return json{{"config", result.config.to_json()},
              {"dimension", result.dimension},
              {"runs", std::move(runs)},
              {"mean_accuracy", result.mean_accuracy}};
}

json token_record_to_json(const TokenRecord& r) {
  return json{{"item_id", r.item_id},
              {"variant", r.variant},
              {"token_index", r.token_index},
              {"token", r.token},
              {"span", json::array({r.begin, r.end})},
              {"label", to_string(r.label)},
              {"embedding", r.embedding}};
}

TokenRecord token_record_from_json(const json& j) {
  TokenRecord r;
  r.item_id = j.at("item_id").get<std::string>();
  r.variant = j.value("variant", std::string{});
  r.token_index = j.at("token_index").get<int>();
  r.token = j.value("token", std::string{});
  r.begin = j.at("span").at(0).get<std::size_t>();
  r.end = j.at("span").at(1).get<std::size_t>();
  r.label = parse_span_label(j.at("label").get<std::string>());
  r.embedding = j.at("embedding").get<std::vector<float>>();
  return r;
}

void write_probe_dataset(std::span<const TokenRecord> records, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
    for (const auto& r : records) out << token_record_to_json(r).dump() << '\n';
    if (!out) throw DataError(fmt::format("write failed: {}", path.string()));
  }
  std::filesystem::rename(tmp, path);
}

std::vector<TokenRecord> read_probe_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot read {}", path.string()));
  std::vector<TokenRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(token_record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), lineno, e.what()));
    }
  }
  return out;
}

}  // namespace dlgresp
