#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctf/metrics.hpp"
#include "ctf/model.hpp"
#include "ctf/rng.hpp"
#include "ctf/text.hpp"
#include "ctf/util.hpp"

namespace ctf {

enum class Method { kBaseline, kBlind, kAugment, kClp, kClpNontoxic };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kBaseline: return "baseline";
    case Method::kBlind: return "blind";
    case Method::kAugment: return "augment";
    case Method::kClp: return "clp";
    case Method::kClpNontoxic: return "clp_nontoxic";
  }
  throw std::logic_error("bad method");
}

inline Method method_from_string(const std::string& s) {
  if (s == "baseline") return Method::kBaseline;
  if (s == "blind") return Method::kBlind;
  if (s == "augment") return Method::kAugment;
  if (s == "clp") return Method::kClp;
  if (s == "clp_nontoxic") return Method::kClpNontoxic;
  throw std::invalid_argument("unknown method: " + s +
                              " (expected baseline|blind|augment|clp|clp_nontoxic)");
}

inline bool uses_clp(Method m) { return m == Method::kClp || m == Method::kClpNontoxic; }

enum class DevMetric { kLoss, kAuc };

struct TrainConfig {
  Method method = Method::kBaseline;
  double lambda = 1.0;  // CLP weight; ignored unless method is clp/clp_nontoxic
  double learning_rate = 1e-3;
  int epochs = 5;
  int batch_size = 32;
  std::int64_t seed = 0;
  int runs = 1;  // metric averaging at the experiment level, not per train()
  ModelDims dims{};
  DevMetric dev_metric = DevMetric::kLoss;
};

inline void validate_config(const TrainConfig& cfg) {
  if (cfg.lambda < 0) throw std::invalid_argument("lambda must be nonnegative");
  if (cfg.learning_rate <= 0) throw std::invalid_argument("learning_rate must be positive");
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (cfg.runs < 1) throw std::invalid_argument("runs must be >= 1");
  if (cfg.dims.embed_dim < 1 || cfg.dims.window < 1 || cfg.dims.channels < 1) {
    throw std::invalid_argument("model dims must be >= 1");
  }
}

/// Flat JSON config; unknown keys rejected.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> allowed = {
      "method", "lambda", "learning_rate", "epochs",       "batch_size",   "seed",
      "runs",   "embedding_dim", "conv_window", "conv_channels", "dev_metric"};
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw std::invalid_argument("unknown train config key: " + key);
  }
  TrainConfig cfg;
  if (j.contains("method")) cfg.method = method_from_string(j.at("method").get<std::string>());
  if (j.contains("lambda")) cfg.lambda = j.at("lambda").get<double>();
  if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::int64_t>();
  if (j.contains("runs")) cfg.runs = j.at("runs").get<int>();
  if (j.contains("embedding_dim")) cfg.dims.embed_dim = j.at("embedding_dim").get<int>();
  if (j.contains("conv_window")) cfg.dims.window = j.at("conv_window").get<int>();
  if (j.contains("conv_channels")) cfg.dims.channels = j.at("conv_channels").get<int>();
  if (j.contains("dev_metric")) {
    const auto s = j.at("dev_metric").get<std::string>();
    if (s == "loss") cfg.dev_metric = DevMetric::kLoss;
    else if (s == "auc") cfg.dev_metric = DevMetric::kAuc;
    else throw std::invalid_argument("dev_metric must be loss or auc, got " + s);
  }
  validate_config(cfg);
  return cfg;
}

inline nlohmann::json config_to_json(const TrainConfig& cfg) {
  return nlohmann::json{{"method", to_string(cfg.method)},
                        {"lambda", cfg.lambda},
                        {"learning_rate", cfg.learning_rate},
                        {"epochs", cfg.epochs},
                        {"batch_size", cfg.batch_size},
                        {"seed", cfg.seed},
                        {"runs", cfg.runs},
                        {"embedding_dim", cfg.dims.embed_dim},
                        {"conv_window", cfg.dims.window},
                        {"conv_channels", cfg.dims.channels},
                        {"dev_metric", cfg.dev_metric == DevMetric::kLoss ? "loss" : "auc"}};
}

/// -[y ln p + (1-y) ln(1-p)] with p clamped to [1e-12, 1-1e-12].
inline double cross_entropy(double p, int y) {
  constexpr double kClamp = 1e-12;
  p = std::clamp(p, kClamp, 1.0 - kClamp);
  return y == 1 ? -std::log(p) : -std::log1p(-p);
}

/// |g(x) - g(x')|.
inline double clp_penalty(const ModelParams& params, const Document& doc,
                          const Document& counterfactual) {
  if (doc.tokens.empty() || counterfactual.tokens.empty()) {
    throw std::invalid_argument("clp_penalty: empty document");
  }
  return std::abs(forward(params, doc).logit - forward(params, counterfactual).logit);
}

// Penalty value plus weight * d|g(x) - g(x')|/dtheta accumulated into grads.
// Subgradient at equal logits is 0.
inline double clp_penalty_accumulate(const ModelParams& params, const Document& doc,
                                     const Document& counterfactual, double weight,
                                     Gradients& grads) {
  const auto cache_x = forward(params, doc);
  const auto cache_cf = forward(params, counterfactual);
  const double diff = cache_x.logit - cache_cf.logit;
  const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
  if (sign != 0.0 && weight != 0.0) {
    backward_into(params, cache_x, weight * sign, grads);
    backward_into(params, cache_cf, -weight * sign, grads);
  }
  return std::abs(diff);
}

struct BatchStats {
  double ce = 0.0;       // summed cross entropy
  double penalty = 0.0;  // summed |logit difference|, unweighted
  int penalized = 0;     // examples that contributed a penalty term
};

struct BatchResult {
  double loss = 0.0;  // ce + lambda * penalty
  Gradients grads;
  BatchStats stats;
};

/// Summed cross entropy over the batch; for clp/clp_nontoxic adds lambda
/// times the penalty against one sampled counterfactual per example.
/// Examples with no identity occurrence contribute no penalty, and
/// clp_nontoxic penalizes only label-0 examples.
inline BatchResult batch_objective(const ModelParams& params, std::span<const Document> batch,
                                   const TrainConfig& cfg,
                                   const std::vector<IdentityTerm>& train_terms, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("batch_objective: empty batch");
  BatchResult result;
  result.grads = Gradients::zeros_like(params);
  for (const auto& doc : batch) {
    if (!doc.label) throw std::invalid_argument("batch_objective: unlabeled document " + doc.id);
    const int y = *doc.label;
    const auto cache = forward(params, doc);
    const double p = sigmoid(cache.logit);
    result.stats.ce += cross_entropy(p, y);
    backward_into(params, cache, p - static_cast<double>(y), result.grads);
    if (uses_clp(cfg.method) && (cfg.method == Method::kClp || y == 0)) {
      if (const auto cf = random_training_counterfactual(doc, train_terms, rng)) {
        result.stats.penalty +=
            clp_penalty_accumulate(params, doc, *cf, cfg.lambda, result.grads);
        ++result.stats.penalized;
      }
    }
  }
  result.loss = result.stats.ce + cfg.lambda * result.stats.penalty;
  return result;
}

/// Method-specific view of the training data: blind rewrites every doc,
/// augment appends one sampled counterfactual per eligible doc (fresh draws
/// per call, so each epoch resamples), everything else passes through.
inline std::vector<Document> prepare_dataset(const std::vector<Document>& docs,
                                             const IdentityLexicon& lexicon, Method method,
                                             Rng& rng) {
  switch (method) {
    case Method::kBaseline:
    case Method::kClp:
    case Method::kClpNontoxic:
      return docs;
    case Method::kBlind: {
      std::vector<Document> out;
      out.reserve(docs.size());
      for (const auto& doc : docs) out.push_back(blind(doc, lexicon.train_terms));
      return out;
    }
    case Method::kAugment: {
      std::vector<Document> out = docs;
      for (const auto& doc : docs) {
        if (auto cf = random_training_counterfactual(doc, lexicon.train_terms, rng)) {
          out.push_back(std::move(*cf));
        }
      }
      return out;
    }
  }
  throw std::logic_error("bad method");
}

struct AdamState {
  Gradients m, v;
  std::int64_t t = 0;

  explicit AdamState(const ModelParams& p)
      : m(Gradients::zeros_like(p)), v(Gradients::zeros_like(p)) {}
};

inline void adam_step(ModelParams& params, const Gradients& grads, AdamState& state, double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  ++state.t;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
  auto update = [&](double* p, const double* g, double* m, double* v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
    }
  };
  update(params.embeddings.data(), grads.embeddings.data(), state.m.embeddings.data(),
         state.v.embeddings.data(), params.embeddings.size());
  update(params.conv_w.data(), grads.conv_w.data(), state.m.conv_w.data(),
         state.v.conv_w.data(), params.conv_w.size());
  update(params.conv_b.data(), grads.conv_b.data(), state.m.conv_b.data(),
         state.v.conv_b.data(), params.conv_b.size());
  update(params.dense_w.data(), grads.dense_w.data(), state.m.dense_w.data(),
         state.v.dense_w.data(), params.dense_w.size());
  update(&params.dense_b, &grads.dense_b, &state.m.dense_b, &state.v.dense_b, 1);
}

struct TrainData {
  std::vector<Document> train;
  std::vector<Document> dev;
};

struct TrainedModel {
  ModelParams params;
  TrainConfig config;
  std::vector<double> dev_history;  // per-epoch criterion, lower is better
  int selected_epoch = 0;           // 1-based argmin of dev_history, earliest tie
  std::vector<IdentityTerm> blind_terms;  // nonempty iff method == blind

  // Full prediction pipeline: the blind method blinds its inputs.
  double score(const Document& doc) const {
    if (config.method == Method::kBlind) {
      return predict(params, blind(doc, blind_terms));
    }
    return predict(params, doc);
  }

  // Self-contained scorer (owns copies), safe to outlive the model object.
  Scorer scorer() const {
    if (config.method == Method::kBlind) {
      return [params = params, terms = blind_terms](const Document& d) {
        return predict(params, blind(d, terms));
      };
    }
    return [params = params](const Document& d) { return predict(params, d); };
  }
};

namespace detail {

inline std::vector<Document> blind_all(const std::vector<Document>& docs,
                                       const std::vector<IdentityTerm>& terms) {
  std::vector<Document> out;
  out.reserve(docs.size());
  for (const auto& doc : docs) out.push_back(blind(doc, terms));
  return out;
}

inline double dev_criterion(const ModelParams& params, const std::vector<Document>& dev,
                            DevMetric metric) {
  if (metric == DevMetric::kLoss) {
    double sum = 0.0;
    for (const auto& doc : dev) sum += cross_entropy(predict(params, doc), *doc.label);
    return sum / static_cast<double>(dev.size());
  }
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(dev.size());
  for (const auto& doc : dev) {
    scores.push_back(predict(params, doc));
    labels.push_back(*doc.label);
  }
  const auto auc = roc_auc(scores, labels);
  if (!auc) throw std::invalid_argument("dev_metric=auc requires both classes in the dev set");
  return 1.0 - *auc;
}

}  // namespace detail

/// Minibatch Adam for config.epochs epochs; dev criterion recorded per epoch
/// and the parameter snapshot at the best epoch returned. Deterministic per
/// seed. Throws on divergence (non-finite loss).
inline TrainedModel train(const TrainData& data, const TrainConfig& cfg,
                          const IdentityLexicon& lexicon) {
  validate_config(cfg);
  if (data.train.empty() || data.dev.empty()) {
    throw std::invalid_argument("train: empty train or dev split");
  }
  for (const auto& doc : data.train) {
    if (!doc.label) throw std::invalid_argument("train: unlabeled train document " + doc.id);
  }
  for (const auto& doc : data.dev) {
    if (!doc.label) throw std::invalid_argument("train: unlabeled dev document " + doc.id);
  }
  const bool is_blind = cfg.method == Method::kBlind;
  // Vocabulary: the prepared training corpus plus tokens substitution can
  // introduce; fixed before the first update.
  const auto vocab_docs = is_blind ? detail::blind_all(data.train, lexicon.train_terms)
                                   : data.train;
  const auto vocab = build_vocab(vocab_docs, lexicon.train_terms);
  ModelParams params = init_params(vocab, cfg.dims, cfg.seed);
  const auto dev = is_blind ? detail::blind_all(data.dev, lexicon.train_terms) : data.dev;

  const auto seed = static_cast<std::uint64_t>(cfg.seed);
  Rng shuffle_rng(Rng::mix(seed, 0x51));
  Rng cf_rng(Rng::mix(seed, 0xcf));
  Rng augment_rng(Rng::mix(seed, 0xa6));

  AdamState adam(params);
  TrainedModel best;
  best.config = cfg;
  if (is_blind) best.blind_terms = lexicon.train_terms;
  double best_criterion = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto epoch_docs = prepare_dataset(data.train, lexicon, cfg.method, augment_rng);
    std::vector<std::size_t> order(epoch_docs.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    std::vector<Document> shuffled;
    shuffled.reserve(epoch_docs.size());
    for (const auto i : order) shuffled.push_back(std::move(epoch_docs[i]));
    const auto batch_size = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t start = 0; start < shuffled.size(); start += batch_size) {
      const std::size_t len = std::min(batch_size, shuffled.size() - start);
      const auto result = batch_objective(
          params, std::span<const Document>(shuffled.data() + start, len), cfg,
          lexicon.train_terms, cf_rng);
      if (!std::isfinite(result.loss)) {
        throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                 std::to_string(epoch));
      }
      adam_step(params, result.grads, adam, cfg.learning_rate);
    }
    const double criterion = detail::dev_criterion(params, dev, cfg.dev_metric);
    best.dev_history.push_back(criterion);
    if (criterion < best_criterion) {
      best_criterion = criterion;
      best.selected_epoch = epoch;
      best.params = params;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoints: self-describing JSON, exact round trip (doubles are emitted in
// shortest round-trip form).
// ---------------------------------------------------------------------------

inline std::uint64_t vocab_hash(const std::vector<std::string>& vocab) {
  std::string joined;
  for (const auto& t : vocab) {
    joined += t;
    joined.push_back('\n');
  }
  return fnv1a64(joined);
}

inline nlohmann::json checkpoint_to_json(const TrainedModel& model) {
  std::vector<std::string> blind_terms;
  for (const auto& t : model.blind_terms) blind_terms.push_back(t.text());
  return nlohmann::json{{"format", "ctf-checkpoint-v1"},
                        {"config", config_to_json(model.config)},
                        {"dims",
                         {{"embed_dim", model.params.dims.embed_dim},
                          {"window", model.params.dims.window},
                          {"channels", model.params.dims.channels}}},
                        {"vocab", model.params.vocab},
                        {"vocab_hash", to_hex(vocab_hash(model.params.vocab))},
                        {"embeddings", model.params.embeddings},
                        {"conv_w", model.params.conv_w},
                        {"conv_b", model.params.conv_b},
                        {"dense_w", model.params.dense_w},
                        {"dense_b", model.params.dense_b},
                        {"blind_terms", blind_terms},
                        {"dev_history", model.dev_history},
                        {"selected_epoch", model.selected_epoch}};
}

inline TrainedModel checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "ctf-checkpoint-v1") {
    throw std::runtime_error("not a ctf checkpoint");
  }
  TrainedModel model;
  model.config = config_from_json(j.at("config"));
  ModelParams& p = model.params;
  p.dims.embed_dim = j.at("dims").at("embed_dim").get<int>();
  p.dims.window = j.at("dims").at("window").get<int>();
  p.dims.channels = j.at("dims").at("channels").get<int>();
  p.vocab = j.at("vocab").get<std::vector<std::string>>();
  if (j.at("vocab_hash").get<std::string>() != to_hex(vocab_hash(p.vocab))) {
    throw std::runtime_error("checkpoint vocab hash mismatch (corrupt or edited checkpoint)");
  }
  for (std::size_t i = 0; i < p.vocab.size(); ++i) {
    p.index.emplace(p.vocab[i], static_cast<int>(i));
  }
  p.embeddings = j.at("embeddings").get<std::vector<double>>();
  p.conv_w = j.at("conv_w").get<std::vector<double>>();
  p.conv_b = j.at("conv_b").get<std::vector<double>>();
  p.dense_w = j.at("dense_w").get<std::vector<double>>();
  p.dense_b = j.at("dense_b").get<double>();
  const auto d = static_cast<std::size_t>(p.dims.embed_dim);
  const auto w = static_cast<std::size_t>(p.dims.window);
  const auto c = static_cast<std::size_t>(p.dims.channels);
  if (p.embeddings.size() != p.vocab.size() * d || p.conv_w.size() != w * d * c ||
      p.conv_b.size() != c || p.dense_w.size() != c) {
    throw std::runtime_error("checkpoint tensor shapes inconsistent with dims");
  }
  for (const double x : p.embeddings) {
    if (!std::isfinite(x)) throw std::runtime_error("checkpoint contains non-finite values");
  }
  for (const auto& t : j.at("blind_terms").get<std::vector<std::string>>()) {
    model.blind_terms.push_back(make_term(t));
  }
  model.dev_history = j.at("dev_history").get<std::vector<double>>();
  model.selected_epoch = j.at("selected_epoch").get<int>();
  return model;
}

inline void save_checkpoint(const TrainedModel& model, const std::string& path) {
  write_file_atomic(path, checkpoint_to_json(model).dump(2) + "\n");
}

inline TrainedModel load_checkpoint(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("invalid checkpoint JSON (" + path + "): " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace ctf
