#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctf/rng.hpp"
#include "ctf/text.hpp"
#include "ctf/util.hpp"

namespace ctf {

enum class Split { kTrain, kDev, kTest };

struct Corpus {
  enum class Provenance { kSynthetic, kIngested };

  std::vector<Document> docs;
  Provenance provenance = Provenance::kIngested;
  std::vector<Split> split_tags;  // empty until split() tags the corpus

  bool is_split() const { return !docs.empty() && split_tags.size() == docs.size(); }

  std::vector<Document> docs_in(Split s) const {
    if (!is_split()) throw std::logic_error("corpus has not been split");
    std::vector<Document> out;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (split_tags[i] == s) out.push_back(docs[i]);
    }
    return out;
  }
};

/// Template corpus spec. Slot markers inside a template: NAME, ADJECTIVE,
/// IDENTITY_ADJ. A sentence is toxic iff a toxic adjective fills an
/// ADJECTIVE slot; identity terms never carry label signal.
struct TemplateSpec {
  std::vector<std::string> templates;
  std::vector<std::string> identity_adjectives;  // empty: use caller-provided terms
  std::vector<std::string> toxic_adjectives;
  std::vector<std::string> nontoxic_adjectives;
  std::vector<std::string> names;
};

namespace detail {

enum class SlotKind { kWord, kName, kAdjective, kIdentity };

struct TemplatePiece {
  SlotKind kind;
  std::string word;  // set when kind == kWord
};

inline std::vector<TemplatePiece> parse_template(const std::string& tpl) {
  std::vector<TemplatePiece> pieces;
  std::size_t i = 0;
  while (i < tpl.size()) {
    while (i < tpl.size() && std::isspace(static_cast<unsigned char>(tpl[i]))) ++i;
    std::size_t j = i;
    while (j < tpl.size() && !std::isspace(static_cast<unsigned char>(tpl[j]))) ++j;
    if (j > i) {
      std::string piece = tpl.substr(i, j - i);
      if (piece == "NAME") {
        pieces.push_back({SlotKind::kName, {}});
      } else if (piece == "ADJECTIVE") {
        pieces.push_back({SlotKind::kAdjective, {}});
      } else if (piece == "IDENTITY_ADJ") {
        pieces.push_back({SlotKind::kIdentity, {}});
      } else {
        pieces.push_back({SlotKind::kWord, std::move(piece)});
      }
    }
    i = j;
  }
  return pieces;
}

}  // namespace detail

/// Full cross product of templates and slot fillers, deterministically
/// ordered. Label 1 iff a toxic adjective fills an ADJECTIVE slot. Every
/// identity term appears in each IDENTITY_ADJ context exactly once per
/// combination of the other slots, so counterfactuals are symmetric by
/// construction.
inline Corpus generate_synthetic(const TemplateSpec& spec,
                                 const std::vector<IdentityTerm>& identity_terms) {
  if (spec.templates.empty()) throw std::invalid_argument("template spec has no templates");
  {
    std::set<std::string> toxic(spec.toxic_adjectives.begin(), spec.toxic_adjectives.end());
    for (const auto& adj : spec.nontoxic_adjectives) {
      if (toxic.count(adj)) {
        throw std::invalid_argument("adjective in both toxic and nontoxic lists: " + adj);
      }
    }
  }
  std::vector<std::string> identities = spec.identity_adjectives;
  if (identities.empty()) {
    for (const auto& t : canonical_terms(identity_terms)) identities.push_back(t.text());
  }
  // ADJECTIVE slot fillers: toxic first, then nontoxic.
  std::vector<std::pair<std::string, int>> adjectives;
  for (const auto& a : spec.toxic_adjectives) adjectives.emplace_back(a, 1);
  for (const auto& a : spec.nontoxic_adjectives) adjectives.emplace_back(a, 0);

  Corpus corpus;
  corpus.provenance = Corpus::Provenance::kSynthetic;
  std::size_t next_id = 0;
  for (const auto& tpl : spec.templates) {
    const auto pieces = detail::parse_template(tpl);
    std::vector<std::size_t> slot_piece;  // piece index per slot
    std::vector<std::size_t> slot_size;
    for (std::size_t p = 0; p < pieces.size(); ++p) {
      switch (pieces[p].kind) {
        case detail::SlotKind::kWord:
          break;
        case detail::SlotKind::kName:
          slot_piece.push_back(p);
          slot_size.push_back(spec.names.size());
          break;
        case detail::SlotKind::kAdjective:
          slot_piece.push_back(p);
          slot_size.push_back(adjectives.size());
          break;
        case detail::SlotKind::kIdentity:
          slot_piece.push_back(p);
          slot_size.push_back(identities.size());
          break;
      }
    }
    if (slot_piece.empty()) {
      throw std::invalid_argument("template has no slot: \"" + tpl + "\"");
    }
    for (std::size_t size : slot_size) {
      if (size == 0) throw std::invalid_argument("empty filler list for template: \"" + tpl + "\"");
    }
    // Odometer over slot choices, rightmost slot fastest.
    std::vector<std::size_t> choice(slot_piece.size(), 0);
    bool done = false;
    while (!done) {
      std::string text;
      int label = 0;
      std::size_t slot = 0;
      for (std::size_t p = 0; p < pieces.size(); ++p) {
        const std::string* fill = nullptr;
        switch (pieces[p].kind) {
          case detail::SlotKind::kWord:
            fill = &pieces[p].word;
            break;
          case detail::SlotKind::kName:
            fill = &spec.names[choice[slot++]];
            break;
          case detail::SlotKind::kAdjective: {
            const auto& adj = adjectives[choice[slot++]];
            fill = &adj.first;
            label |= adj.second;
            break;
          }
          case detail::SlotKind::kIdentity:
            fill = &identities[choice[slot++]];
            break;
        }
        if (!text.empty()) text.push_back(' ');
        text += *fill;
      }
      char id[32];
      std::snprintf(id, sizeof id, "synth-%06zu", next_id++);
      corpus.docs.push_back(make_document(id, text, label));
      // advance odometer
      done = true;
      for (std::size_t s = choice.size(); s-- > 0;) {
        if (++choice[s] < slot_size[s]) {
          done = false;
          break;
        }
        choice[s] = 0;
      }
    }
  }
  if (corpus.docs.empty()) throw std::invalid_argument("template spec produces zero sentences");
  return corpus;
}

inline TemplateSpec default_template_spec() {
  TemplateSpec spec;
  spec.templates = {
      "NAME is ADJECTIVE",
      "NAME is a ADJECTIVE person",
      "IDENTITY_ADJ people are ADJECTIVE",
      "being IDENTITY_ADJ is ADJECTIVE",
      "some IDENTITY_ADJ people are ADJECTIVE",
      "my ADJECTIVE friend is IDENTITY_ADJ",
  };
  spec.identity_adjectives = {};  // filled from the lexicon
  spec.toxic_adjectives = {"awful",   "disgusting", "dreadful", "horrible",
                           "idiotic", "pathetic",   "stupid",   "terrible"};
  spec.nontoxic_adjectives = {"brave", "friendly", "gentle",     "honest",
                              "kind",  "lovely",   "thoughtful", "wonderful"};
  spec.names = {"alex",   "bailey", "casey", "devon", "emery",
                "harper", "jordan", "morgan", "riley", "taylor"};
  return spec;
}

inline TemplateSpec template_spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> allowed = {"templates", "identity_adjectives",
                                                "toxic_adjectives", "nontoxic_adjectives",
                                                "names"};
  if (!j.is_object()) throw std::invalid_argument("template spec must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw std::invalid_argument("unknown template spec key: " + key);
  }
  TemplateSpec spec;
  auto read_list = [&](const char* key, std::vector<std::string>& out, bool required) {
    if (!j.contains(key)) {
      if (required) throw std::invalid_argument(std::string("template spec missing key: ") + key);
      return;
    }
    out = j.at(key).get<std::vector<std::string>>();
  };
  read_list("templates", spec.templates, true);
  read_list("identity_adjectives", spec.identity_adjectives, false);
  read_list("toxic_adjectives", spec.toxic_adjectives, true);
  read_list("nontoxic_adjectives", spec.nontoxic_adjectives, true);
  read_list("names", spec.names, false);
  return spec;
}

inline nlohmann::json template_spec_to_json(const TemplateSpec& spec) {
  return nlohmann::json{{"templates", spec.templates},
                        {"identity_adjectives", spec.identity_adjectives},
                        {"toxic_adjectives", spec.toxic_adjectives},
                        {"nontoxic_adjectives", spec.nontoxic_adjectives},
                        {"names", spec.names}};
}

inline TemplateSpec load_template_spec(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("invalid template spec JSON (" + path + "): " + e.what());
  }
  return template_spec_from_json(j);
}

// ---------------------------------------------------------------------------
// CSV corpora (RFC 4180: quoted fields, "" escapes, embedded newlines).
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<std::string>> parse_csv(const std::string& content) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  std::size_t i = 0;
  auto end_field = [&]() {
    record.push_back(std::move(field));
    field.clear();
    field_was_quoted = false;
  };
  auto end_record = [&]() {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };
  auto row = [&]() { return records.size() + 1; };
  while (i < content.size()) {
    const char c = content[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      if (!field.empty() || field_was_quoted) {
        throw std::invalid_argument("malformed CSV at row " + std::to_string(row()) +
                                    ": unexpected quote");
      }
      in_quotes = true;
      field_was_quoted = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < content.size() && content[i + 1] == '\n') ++i;
      end_record();
    } else {
      field.push_back(c);
    }
    ++i;
  }
  if (in_quotes) {
    throw std::invalid_argument("malformed CSV at row " + std::to_string(row()) +
                                ": unterminated quoted field");
  }
  if (!field.empty() || field_was_quoted || !record.empty()) end_record();
  return records;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline bool contains_reserved_token(const std::string& raw) {
  std::size_t i = 0;
  while (i < raw.size()) {
    while (i < raw.size() && std::isspace(static_cast<unsigned char>(raw[i]))) ++i;
    std::size_t j = i;
    while (j < raw.size() && !std::isspace(static_cast<unsigned char>(raw[j]))) ++j;
    std::size_t b = i, e = j;
    while (b < e && std::ispunct(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(raw[e - 1]))) --e;
    if (e > b && raw.compare(b, e - b, kIdentityToken) == 0) return true;
    i = j;
  }
  return false;
}

}  // namespace detail

struct CsvSchema {
  std::string text_column = "text";
  std::string label_column = "label";
};

struct IngestResult {
  Corpus corpus;
  std::size_t skipped = 0;  // rows with missing text or label
};

/// One document per data row. Rows with an empty text or label field are
/// skipped and counted; a label other than 0/1, a malformed record, or text
/// containing the reserved IDENTITY token is a hard error naming the row.
inline IngestResult ingest_csv_content(const std::string& content, const CsvSchema& schema) {
  const auto records = detail::parse_csv(content);
  if (records.empty()) throw std::invalid_argument("CSV has no header row");
  const auto& header = records[0];
  auto find_col = [&](const std::string& name) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == name) return c;
    }
    throw std::invalid_argument("column not found in CSV header: " + name);
  };
  const std::size_t text_col = find_col(schema.text_column);
  const std::size_t label_col = find_col(schema.label_column);

  IngestResult result;
  result.corpus.provenance = Corpus::Provenance::kIngested;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    const std::string row = std::to_string(r + 1);  // 1-based, counting the header
    if (rec.size() != header.size()) {
      throw std::invalid_argument("malformed CSV at row " + row + ": expected " +
                                  std::to_string(header.size()) + " fields, got " +
                                  std::to_string(rec.size()));
    }
    const std::string& text = rec[text_col];
    const std::string label_str = trim(rec[label_col]);
    if (text.empty() || label_str.empty()) {
      ++result.skipped;
      continue;
    }
    if (label_str != "0" && label_str != "1") {
      throw std::invalid_argument("row " + row + ": label must be 0 or 1, got \"" + label_str +
                                  "\"");
    }
    if (detail::contains_reserved_token(text)) {
      throw std::invalid_argument("row " + row + ": text contains the reserved token " +
                                  kIdentityToken);
    }
    result.corpus.docs.push_back(
        make_document("row" + std::to_string(r), text, label_str == "1" ? 1 : 0));
  }
  return result;
}

inline IngestResult ingest_csv(const std::string& path, const CsvSchema& schema = {}) {
  return ingest_csv_content(read_file(path), schema);
}

inline std::string corpus_csv_string(const Corpus& corpus) {
  std::string out = "id,text,label\n";
  for (const auto& doc : corpus.docs) {
    out += detail::csv_escape(doc.id);
    out.push_back(',');
    out += detail::csv_escape(doc.raw_text);
    out.push_back(',');
    if (doc.label) out += std::to_string(*doc.label);
    out.push_back('\n');
  }
  return out;
}

inline void write_corpus_csv(const Corpus& corpus, const std::string& path) {
  write_file_atomic(path, corpus_csv_string(corpus));
}

struct SplitFractions {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
};

/// Seeded shuffle then contiguous slicing. Sizes are floor(n * fraction) for
/// dev and test with the remainder going to train. Every doc is tagged
/// exactly once; any empty resulting split is an error.
inline Corpus split(const Corpus& corpus, const SplitFractions& fractions, std::int64_t seed) {
  if (fractions.train <= 0 || fractions.dev <= 0 || fractions.test <= 0) {
    throw std::invalid_argument("split fractions must be positive");
  }
  const double sum = fractions.train + fractions.dev + fractions.test;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must sum to 1, got " + fmt_double(sum));
  }
  const std::size_t n = corpus.docs.size();
  const auto n_dev = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions.dev));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions.test));
  if (n_dev + n_test >= n || n_dev == 0 || n_test == 0) {
    throw std::invalid_argument("split produces an empty part (corpus of " + std::to_string(n) +
                                " docs)");
  }
  const std::size_t n_train = n - n_dev - n_test;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(static_cast<std::uint64_t>(seed));
  rng.shuffle(order);
  Corpus tagged = corpus;
  tagged.split_tags.assign(n, Split::kTrain);
  for (std::size_t i = 0; i < n; ++i) {
    const Split s = i < n_train ? Split::kTrain : (i < n_train + n_dev ? Split::kDev : Split::kTest);
    tagged.split_tags[order[i]] = s;
  }
  return tagged;
}

}  // namespace ctf
