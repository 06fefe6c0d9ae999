#pragma once

#include <algorithm>
#include <cctype>
#include <compare>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctf/rng.hpp"
#include "ctf/util.hpp"

namespace ctf {

using Token = std::string;

// Sentinel substituted for identity terms by blind(). Uppercase on purpose:
// tokenize() lowercases every piece, so no tokenized input can produce it.
inline const Token kIdentityToken = "IDENTITY";

inline bool is_valid_token(const Token& t) {
  if (t.empty()) return false;
  for (unsigned char c : t) {
    if (std::isspace(c)) return false;
  }
  return true;
}

/// Lowercases, splits on whitespace, and strips leading/trailing punctuation
/// from each piece. Pieces that strip to nothing are dropped.
inline std::vector<Token> tokenize(const std::string& text) {
  std::vector<Token> out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && std::ispunct(static_cast<unsigned char>(text[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(text[e - 1]))) --e;
    if (e > b) {
      Token tok;
      tok.reserve(e - b);
      for (std::size_t k = b; k < e; ++k) {
        tok.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[k]))));
      }
      out.push_back(std::move(tok));
    }
    i = j;
  }
  return out;
}

inline std::string detokenize(const std::vector<Token>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

struct Document {
  std::string id;
  std::vector<Token> tokens;
  std::optional<int> label;  // 1 = toxic, 0 = nontoxic
  std::string raw_text;
};

inline Document make_document(std::string id, const std::string& raw_text,
                              std::optional<int> label = std::nullopt) {
  Document d;
  d.id = std::move(id);
  d.tokens = tokenize(raw_text);
  d.label = label;
  d.raw_text = raw_text;
  return d;
}

// For documents produced by substitution: raw_text is the detokenized form.
inline Document document_from_tokens(std::string id, std::vector<Token> tokens,
                                     std::optional<int> label = std::nullopt) {
  for (const auto& t : tokens) {
    if (!is_valid_token(t)) {
      throw std::invalid_argument("invalid token: \"" + t + "\"");
    }
  }
  Document d;
  d.id = std::move(id);
  d.raw_text = detokenize(tokens);
  d.tokens = std::move(tokens);
  d.label = label;
  return d;
}

/// An identity term: one token ("gay") or two consecutive tokens
/// ("african american").
struct IdentityTerm {
  std::vector<Token> tokens;

  bool is_bigram() const { return tokens.size() == 2; }
  std::string text() const { return detokenize(tokens); }

  auto operator<=>(const IdentityTerm&) const = default;
  bool operator==(const IdentityTerm&) const = default;
};

inline IdentityTerm make_term(const std::string& text) {
  IdentityTerm term{tokenize(text)};
  if (term.tokens.empty() || term.tokens.size() > 2) {
    throw std::invalid_argument("identity term must be 1 or 2 tokens: \"" + text + "\"");
  }
  return term;
}

inline std::vector<IdentityTerm> make_terms(const std::vector<std::string>& texts) {
  std::vector<IdentityTerm> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(make_term(t));
  return out;
}

// Sorted, deduplicated copy; the canonical order for pair enumeration.
inline std::vector<IdentityTerm> canonical_terms(std::vector<IdentityTerm> terms) {
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
  return terms;
}

/// The full term set, partitioned into the terms mitigation methods may use at
/// training time and the terms held out to probe generalization.
struct IdentityLexicon {
  std::vector<IdentityTerm> train_terms;    // sorted, unique
  std::vector<IdentityTerm> heldout_terms;  // sorted, unique, disjoint from train

  std::vector<IdentityTerm> all_terms() const {
    std::vector<IdentityTerm> all = train_terms;
    all.insert(all.end(), heldout_terms.begin(), heldout_terms.end());
    return canonical_terms(std::move(all));
  }
};

inline IdentityLexicon make_lexicon(const std::vector<std::string>& train_texts,
                                    const std::vector<std::string>& heldout_texts) {
  IdentityLexicon lex;
  lex.train_terms = make_terms(train_texts);
  lex.heldout_terms = make_terms(heldout_texts);
  std::sort(lex.train_terms.begin(), lex.train_terms.end());
  std::sort(lex.heldout_terms.begin(), lex.heldout_terms.end());
  auto check_unique = [](const std::vector<IdentityTerm>& v, const char* which) {
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (v[i] == v[i - 1]) {
        throw std::invalid_argument(std::string("duplicate ") + which + " term: " + v[i].text());
      }
    }
  };
  check_unique(lex.train_terms, "train");
  check_unique(lex.heldout_terms, "held-out");
  for (const auto& t : lex.heldout_terms) {
    if (std::binary_search(lex.train_terms.begin(), lex.train_terms.end(), t)) {
      throw std::invalid_argument("term in both train and held-out sets: " + t.text());
    }
  }
  return lex;
}

/// Lexicon file: one term per line, tokens space separated, '#' comments,
/// terms after a "[heldout]" marker line form the held-out set.
inline IdentityLexicon parse_lexicon(const std::string& content) {
  std::vector<std::string> train_texts, heldout_texts;
  bool in_heldout = false;
  std::size_t line_no = 0, pos = 0;
  while (pos <= content.size()) {
    const auto nl = content.find('\n', pos);
    std::string line = trim(content.substr(pos, nl == std::string::npos ? nl : nl - pos));
    ++line_no;
    pos = nl == std::string::npos ? content.size() + 1 : nl + 1;
    if (line.empty() || line[0] == '#') continue;
    if (line == "[heldout]") {
      if (in_heldout) {
        throw std::invalid_argument("lexicon line " + std::to_string(line_no) +
                                    ": duplicate [heldout] marker");
      }
      in_heldout = true;
      continue;
    }
    if (line[0] == '[') {
      throw std::invalid_argument("lexicon line " + std::to_string(line_no) +
                                  ": unknown section marker " + line);
    }
    (in_heldout ? heldout_texts : train_texts).push_back(line);
  }
  return make_lexicon(train_texts, heldout_texts);
}

inline IdentityLexicon load_lexicon(const std::string& path) {
  return parse_lexicon(read_file(path));
}

/// Two-file form: the whole second file is the held-out set.
inline IdentityLexicon load_lexicon(const std::string& train_path,
                                    const std::string& heldout_path) {
  const auto train = parse_lexicon(read_file(train_path));
  const auto heldout = parse_lexicon(read_file(heldout_path));
  if (!train.heldout_terms.empty() || !heldout.heldout_terms.empty()) {
    throw std::invalid_argument(
        "lexicon: [heldout] marker not allowed when a separate held-out file is given");
  }
  std::vector<std::string> train_texts, heldout_texts;
  for (const auto& t : train.train_terms) train_texts.push_back(t.text());
  for (const auto& t : heldout.train_terms) heldout_texts.push_back(t.text());
  return make_lexicon(train_texts, heldout_texts);
}

// Inclusive token-index span [first, last].
struct TokenSpan {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t length() const { return last - first + 1; }
  bool operator==(const TokenSpan&) const = default;
};

/// All non-overlapping occurrences of `term`, leftmost first. A bigram term
/// matches two consecutive tokens exactly.
inline std::vector<TokenSpan> find_occurrences(const Document& doc, const IdentityTerm& term) {
  std::vector<TokenSpan> spans;
  const std::size_t k = term.tokens.size();
  if (k == 0 || doc.tokens.size() < k) return spans;
  std::size_t i = 0;
  while (i + k <= doc.tokens.size()) {
    if (std::equal(term.tokens.begin(), term.tokens.end(), doc.tokens.begin() + i)) {
      spans.push_back({i, i + k - 1});
      i += k;
    } else {
      ++i;
    }
  }
  return spans;
}

struct TermMatch {
  TokenSpan span;
  std::size_t term_index;  // into the term list given to find_term_matches
};

/// Leftmost, non-overlapping matches against every term in `terms`. Where a
/// bigram and a unigram term both match at the same position the bigram wins.
inline std::vector<TermMatch> find_term_matches(const std::vector<Token>& tokens,
                                                const std::vector<IdentityTerm>& terms) {
  std::vector<TermMatch> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    std::size_t hit = terms.size();
    std::size_t hit_len = 0;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      const auto& tt = terms[t].tokens;
      if (tt.size() > hit_len && i + tt.size() <= tokens.size() &&
          std::equal(tt.begin(), tt.end(), tokens.begin() + i)) {
        hit = t;
        hit_len = tt.size();
      }
    }
    if (hit < terms.size()) {
      out.push_back({{i, i + hit_len - 1}, hit});
      i += hit_len;
    } else {
      ++i;
    }
  }
  return out;
}

/// Which occurrences a substitution pass may rewrite. Counterfactuals built
/// for evaluation leave bigram occurrences in place: only single tokens are
/// substituted (possibly with bigrams).
enum class SpanPolicy { kAllSpans, kUnigramSpansOnly };

namespace detail {

inline std::optional<std::vector<Token>> swap_occurrences(const std::vector<Token>& tokens,
                                                          const IdentityTerm& a,
                                                          const IdentityTerm& b,
                                                          SpanPolicy policy) {
  const std::vector<IdentityTerm> pair_terms = {a, b};
  auto matches = find_term_matches(tokens, pair_terms);
  if (policy == SpanPolicy::kUnigramSpansOnly) {
    std::erase_if(matches, [](const TermMatch& m) { return m.span.length() != 1; });
  }
  if (matches.empty()) return std::nullopt;
  std::vector<Token> out;
  out.reserve(tokens.size() + matches.size());
  std::size_t m = 0;
  for (std::size_t i = 0; i < tokens.size();) {
    if (m < matches.size() && matches[m].span.first == i) {
      const IdentityTerm& repl = matches[m].term_index == 0 ? b : a;
      out.insert(out.end(), repl.tokens.begin(), repl.tokens.end());
      i = matches[m].span.last + 1;
      ++m;
    } else {
      out.push_back(tokens[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace detail

/// Simultaneous bidirectional swap: every occurrence of `a` becomes `b` and
/// every occurrence of `b` becomes `a` in one pass. Returns nothing when
/// neither term occurs. The label is copied unchanged.
inline std::optional<Document> substitute_pair(const Document& doc, const IdentityTerm& a,
                                               const IdentityTerm& b,
                                               SpanPolicy policy = SpanPolicy::kAllSpans) {
  if (a == b) throw std::invalid_argument("substitute_pair: identical terms");
  auto swapped = detail::swap_occurrences(doc.tokens, a, b, policy);
  if (!swapped) return std::nullopt;
  return document_from_tokens(doc.id + "#cf", std::move(*swapped), doc.label);
}

struct CounterfactualVariant {
  Document doc;
  IdentityTerm term_a, term_b;  // the substituted pair
};

struct CounterfactualSet {
  Document source;
  std::vector<CounterfactualVariant> variants;
};

/// Counterfactual examples over every unordered pair of terms. Pairs where
/// neither term occurs contribute nothing; bigram occurrences in the input
/// are not rewritten (SpanPolicy::kUnigramSpansOnly).
inline CounterfactualSet generate_all_counterfactuals(const Document& doc,
                                                      const std::vector<IdentityTerm>& terms) {
  CounterfactualSet set{doc, {}};
  const auto canon = canonical_terms(terms);
  for (std::size_t i = 0; i < canon.size(); ++i) {
    for (std::size_t j = i + 1; j < canon.size(); ++j) {
      auto variant = substitute_pair(doc, canon[i], canon[j], SpanPolicy::kUnigramSpansOnly);
      if (variant && variant->tokens != doc.tokens) {
        set.variants.push_back({std::move(*variant), canon[i], canon[j]});
      }
    }
  }
  return set;
}

/// Training-time generator: every identity occurrence is independently
/// replaced by a term drawn uniformly from the other terms. Returns nothing
/// when the document has no identity occurrence (or no replacement exists).
inline std::optional<Document> random_training_counterfactual(
    const Document& doc, const std::vector<IdentityTerm>& terms, Rng& rng) {
  const auto canon = canonical_terms(terms);
  if (canon.size() < 2) return std::nullopt;
  const auto matches = find_term_matches(doc.tokens, canon);
  if (matches.empty()) return std::nullopt;
  std::vector<Token> out;
  out.reserve(doc.tokens.size() + matches.size());
  std::size_t m = 0;
  for (std::size_t i = 0; i < doc.tokens.size();) {
    if (m < matches.size() && matches[m].span.first == i) {
      std::size_t r = rng.uniform_index(canon.size() - 1);
      if (r >= matches[m].term_index) ++r;  // uniform over terms minus the occurring one
      out.insert(out.end(), canon[r].tokens.begin(), canon[r].tokens.end());
      i = matches[m].span.last + 1;
      ++m;
    } else {
      out.push_back(doc.tokens[i]);
      ++i;
    }
  }
  return document_from_tokens(doc.id + "#cf", std::move(out), doc.label);
}

/// Replaces every identity occurrence (unigram or bigram) with the reserved
/// IDENTITY token. Idempotent; label preserved.
inline Document blind(const Document& doc, const std::vector<IdentityTerm>& terms) {
  const auto matches = find_term_matches(doc.tokens, terms);
  if (matches.empty()) return doc;
  std::vector<Token> out;
  out.reserve(doc.tokens.size());
  std::size_t m = 0;
  for (std::size_t i = 0; i < doc.tokens.size();) {
    if (m < matches.size() && matches[m].span.first == i) {
      out.push_back(kIdentityToken);
      i = matches[m].span.last + 1;
      ++m;
    } else {
      out.push_back(doc.tokens[i]);
      ++i;
    }
  }
  Document blinded = document_from_tokens(doc.id, std::move(out), doc.label);
  return blinded;
}

/// The 50-term default lexicon: 35 training terms, 12 held-out unigrams plus
/// the 3 bigrams (bigrams are evaluation-only, so they live in the held-out
/// set).
inline IdentityLexicon default_lexicon() {
  static const std::vector<std::string> train = {
      "lesbian", "gay",      "bisexual", "transgender", "trans",    "queer",    "lgbt",
      "homosexual", "straight", "heterosexual", "male",  "female",   "african",  "black",
      "white",   "european", "hispanic", "latino",      "latina",   "mexican",  "canadian",
      "american", "asian",   "indian",   "chinese",     "japanese", "christian", "muslim",
      "jewish",  "buddhist", "catholic", "protestant",  "old",      "young",    "elderly"};
  static const std::vector<std::string> heldout = {
      "lgbtq",    "nonbinary", "latinx",   "sikh",  "taoist", "older",
      "younger",  "teenage",   "millenial", "blind", "deaf",   "paralyzed",
      "african american", "middle eastern", "middle aged"};
  return make_lexicon(train, heldout);
}

}  // namespace ctf
