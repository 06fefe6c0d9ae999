#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctf/model.hpp"
#include "ctf/text.hpp"
#include "ctf/util.hpp"

namespace ctf {

using Scorer = std::function<double(const Document&)>;

struct FairnessSpec {
  double epsilon = 0.05;   // per-example gap tolerance for the pass/fail flag
  int max_tokens = 10;     // CTF gaps are computed over short inputs only
  double threshold = 0.5;  // toxic iff score >= threshold
};

inline void validate_spec(const FairnessSpec& spec) {
  if (spec.epsilon < 0) throw std::invalid_argument("epsilon must be nonnegative");
  if (spec.max_tokens < 1) throw std::invalid_argument("max_tokens must be positive");
  if (spec.threshold <= 0 || spec.threshold >= 1) {
    throw std::invalid_argument("threshold must be in (0, 1)");
  }
}

/// Mean absolute prediction gap between an example and its counterfactuals;
/// nothing when the example has no valid counterfactuals.
inline std::optional<double> ctf_gap_example(const Scorer& score, const Document& doc,
                                             const CounterfactualSet& counterfactuals) {
  if (counterfactuals.variants.empty()) return std::nullopt;
  const double fx = score(doc);
  double sum = 0.0;
  for (const auto& v : counterfactuals.variants) {
    sum += std::abs(fx - score(v.doc));
  }
  return sum / static_cast<double>(counterfactuals.variants.size());
}

struct CtfGapResult {
  std::optional<double> gap;  // unset when no doc qualifies
  std::size_t n_evaluated = 0;
  std::optional<double> max_example_gap;
  std::optional<bool> within_epsilon;  // max per-example gap <= epsilon
};

/// Dataset gap: mean example gap over docs of at most max_tokens tokens,
/// restricted to label_filter when given, skipping docs with no valid
/// counterfactuals. Examples are weighted equally.
inline CtfGapResult ctf_gap_dataset(const Scorer& score, const std::vector<Document>& docs,
                                    const std::vector<IdentityTerm>& terms,
                                    const FairnessSpec& spec,
                                    std::optional<int> label_filter = std::nullopt) {
  validate_spec(spec);
  CtfGapResult result;
  double sum = 0.0, max_gap = 0.0;
  for (const auto& doc : docs) {
    if (doc.tokens.size() > static_cast<std::size_t>(spec.max_tokens)) continue;
    if (label_filter && doc.label != label_filter) continue;
    const auto counterfactuals = generate_all_counterfactuals(doc, terms);
    if (const auto gap = ctf_gap_example(score, doc, counterfactuals)) {
      sum += *gap;
      max_gap = std::max(max_gap, *gap);
      ++result.n_evaluated;
    }
  }
  if (result.n_evaluated > 0) {
    result.gap = sum / static_cast<double>(result.n_evaluated);
    result.max_example_gap = max_gap;
    result.within_epsilon = max_gap <= spec.epsilon;
  }
  return result;
}

struct TermRates {
  std::optional<double> tpr, tnr;  // unset when the term has no support for that rate
  std::size_t support_pos = 0, support_neg = 0;
};

struct OddsGaps {
  std::optional<double> tnr_gap, tpr_gap;
  std::vector<std::pair<IdentityTerm, TermRates>> per_term;
};

/// Equality-of-odds gaps: per-term TPR/TNR over docs containing the term,
/// averaged as |rate_a - rate_b| over all unordered term pairs. Terms with no
/// support for a rate are excluded from pairs involving that rate.
inline OddsGaps equality_of_odds_gaps(const Scorer& score, const std::vector<Document>& docs,
                                      const std::vector<IdentityTerm>& terms,
                                      const FairnessSpec& spec) {
  validate_spec(spec);
  const auto canon = canonical_terms(terms);
  std::vector<int> predicted(docs.size(), 0);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].label) predicted[i] = score(docs[i]) >= spec.threshold ? 1 : 0;
  }
  OddsGaps out;
  out.per_term.reserve(canon.size());
  for (const auto& term : canon) {
    TermRates rates;
    std::size_t tp = 0, tn = 0;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (!docs[i].label || find_occurrences(docs[i], term).empty()) continue;
      if (*docs[i].label == 1) {
        ++rates.support_pos;
        tp += predicted[i];
      } else {
        ++rates.support_neg;
        tn += 1 - predicted[i];
      }
    }
    if (rates.support_pos > 0) {
      rates.tpr = static_cast<double>(tp) / static_cast<double>(rates.support_pos);
    }
    if (rates.support_neg > 0) {
      rates.tnr = static_cast<double>(tn) / static_cast<double>(rates.support_neg);
    }
    out.per_term.emplace_back(term, rates);
  }
  auto pairwise_gap = [&](auto rate_of) -> std::optional<double> {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < out.per_term.size(); ++i) {
      const auto a = rate_of(out.per_term[i].second);
      if (!a) continue;
      for (std::size_t j = i + 1; j < out.per_term.size(); ++j) {
        const auto b = rate_of(out.per_term[j].second);
        if (!b) continue;
        sum += std::abs(*a - *b);
        ++pairs;
      }
    }
    if (pairs == 0) return std::nullopt;
    return sum / static_cast<double>(pairs);
  };
  out.tpr_gap = pairwise_gap([](const TermRates& r) { return r.tpr; });
  out.tnr_gap = pairwise_gap([](const TermRates& r) { return r.tnr; });
  return out;
}

/// Rank-based AUC (Mann-Whitney), ties counted 1/2. Unset when either class
/// is absent.
inline std::optional<double> roc_auc(const std::vector<double>& scores,
                                     const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  std::size_t n_pos = 0;
  double rank_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (labels[k] == 1) {
      ++n_pos;
      rank_sum += rank[k];
    }
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline std::optional<double> roc_auc(const Scorer& score, const std::vector<Document>& docs) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& doc : docs) {
    if (!doc.label) continue;
    scores.push_back(score(doc));
    labels.push_back(*doc.label);
  }
  return roc_auc(scores, labels);
}

/// Mean cosine similarity over unordered pairs of identity-token embedding
/// rows. Bigram terms and terms missing from the vocabulary are excluded;
/// fewer than two eligible terms is an error.
inline double identity_embedding_cosine(const ModelParams& params,
                                        const std::vector<IdentityTerm>& terms) {
  const auto d = static_cast<std::size_t>(params.dims.embed_dim);
  std::vector<const double*> rows;
  for (const auto& term : canonical_terms(terms)) {
    if (term.is_bigram()) continue;
    const auto it = params.index.find(term.tokens[0]);
    if (it == params.index.end()) continue;
    rows.push_back(params.embeddings.data() + static_cast<std::size_t>(it->second) * d);
  }
  if (rows.size() < 2) {
    throw std::invalid_argument("identity_embedding_cosine: fewer than 2 eligible terms");
  }
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += rows[i][k] * rows[j][k];
        na += rows[i][k] * rows[i][k];
        nb += rows[j][k] * rows[j][k];
      }
      if (na == 0.0 || nb == 0.0) continue;  // zero vector: similarity undefined
      sum += dot / (std::sqrt(na) * std::sqrt(nb));
      ++pairs;
    }
  }
  if (pairs == 0) {
    throw std::invalid_argument("identity_embedding_cosine: no comparable pairs");
  }
  return sum / static_cast<double>(pairs);
}

/// Mean prediction over the one-term documents.
inline double single_token_toxicity(const Scorer& score, const std::vector<IdentityTerm>& terms) {
  const auto canon = canonical_terms(terms);
  if (canon.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& term : canon) {
    sum += score(document_from_tokens("probe:" + term.text(), term.tokens));
  }
  return sum / static_cast<double>(canon.size());
}

struct MetricsReport {
  FairnessSpec spec;
  CtfGapResult ctf_nontoxic_train, ctf_nontoxic_heldout;
  CtfGapResult ctf_toxic_train, ctf_toxic_heldout;
  OddsGaps odds;  // over the training terms
  std::optional<double> auc;
  std::optional<double> identity_cosine;  // training terms; unset if < 2 eligible
  double single_token_tox = 0.0;          // training terms
};

inline MetricsReport compute_metrics(const Scorer& score, const ModelParams& params,
                                     const std::vector<Document>& docs,
                                     const IdentityLexicon& lexicon, const FairnessSpec& spec) {
  validate_spec(spec);
  MetricsReport report;
  report.spec = spec;
  report.ctf_nontoxic_train = ctf_gap_dataset(score, docs, lexicon.train_terms, spec, 0);
  report.ctf_nontoxic_heldout = ctf_gap_dataset(score, docs, lexicon.heldout_terms, spec, 0);
  report.ctf_toxic_train = ctf_gap_dataset(score, docs, lexicon.train_terms, spec, 1);
  report.ctf_toxic_heldout = ctf_gap_dataset(score, docs, lexicon.heldout_terms, spec, 1);
  report.odds = equality_of_odds_gaps(score, docs, lexicon.train_terms, spec);
  report.auc = roc_auc(score, docs);
  try {
    report.identity_cosine = identity_embedding_cosine(params, lexicon.train_terms);
  } catch (const std::invalid_argument&) {
    report.identity_cosine = std::nullopt;
  }
  report.single_token_tox = single_token_toxicity(score, lexicon.train_terms);
  return report;
}

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json opt_json(const std::optional<bool>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json ctf_json(const CtfGapResult& r) {
  return nlohmann::json{{"gap", opt_json(r.gap)},
                        {"n_evaluated", r.n_evaluated},
                        {"max_example_gap", opt_json(r.max_example_gap)},
                        {"within_epsilon", opt_json(r.within_epsilon)}};
}

}  // namespace detail

inline nlohmann::json report_to_json(const MetricsReport& r,
                                     const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json per_term = nlohmann::json::array();
  for (const auto& [term, rates] : r.odds.per_term) {
    per_term.push_back(nlohmann::json{{"term", term.text()},
                                      {"tpr", detail::opt_json(rates.tpr)},
                                      {"tnr", detail::opt_json(rates.tnr)},
                                      {"support_pos", rates.support_pos},
                                      {"support_neg", rates.support_neg}});
  }
  return nlohmann::json{
      {"format", "ctf-report-v1"},
      {"metadata", metadata},
      {"fairness_spec",
       {{"epsilon", r.spec.epsilon},
        {"max_tokens", r.spec.max_tokens},
        {"threshold", r.spec.threshold}}},
      {"ctf_gap",
       {{"nontoxic",
         {{"train_terms", detail::ctf_json(r.ctf_nontoxic_train)},
          {"heldout_terms", detail::ctf_json(r.ctf_nontoxic_heldout)}}},
        {"toxic",
         {{"train_terms", detail::ctf_json(r.ctf_toxic_train)},
          {"heldout_terms", detail::ctf_json(r.ctf_toxic_heldout)}}}}},
      {"equality_of_odds",
       {{"term_set", "train_terms"},
        {"tnr_gap", detail::opt_json(r.odds.tnr_gap)},
        {"tpr_gap", detail::opt_json(r.odds.tpr_gap)}}},
      {"auc", detail::opt_json(r.auc)},
      {"probes",
       {{"identity_embedding_cosine", detail::opt_json(r.identity_cosine)},
        {"single_token_toxicity", r.single_token_tox}}},
      {"per_term_rates", per_term}};
}

inline std::string per_term_rates_csv(const MetricsReport& r) {
  std::string out = "term,tpr,tnr,support_pos,support_neg\n";
  for (const auto& [term, rates] : r.odds.per_term) {
    out += term.text();
    out.push_back(',');
    if (rates.tpr) out += fmt_double(*rates.tpr);
    out.push_back(',');
    if (rates.tnr) out += fmt_double(*rates.tnr);
    out.push_back(',');
    out += std::to_string(rates.support_pos);
    out.push_back(',');
    out += std::to_string(rates.support_neg);
    out.push_back('\n');
  }
  return out;
}

}  // namespace ctf
