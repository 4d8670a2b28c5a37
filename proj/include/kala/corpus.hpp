#pragma once

// Data model and on-disk formats: line-delimited JSON entity/fact files,
// whitespace+punctuation tokenization, entity vocabulary with a reserved
// null row, the relation-selection rule, and the Seen/Unseen test split.

#include <algorithm>
#include <array>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kala/annotations.hpp"
#include "kala/error.hpp"

namespace kala {

// One entity mention as stored on disk: character-level half-open span
// [start, end) into the document text, plus a stable entity id.
struct EntityRecord {
  std::string doc;
  std::string text;
  std::size_t start = 0;
  std::size_t end = 0;
  std::string id;

  friend bool operator==(const EntityRecord&, const EntityRecord&) = default;
};

struct FactRecord {
  std::string doc;
  std::string h;
  std::string r;
  std::string t;

  friend bool operator==(const FactRecord&, const FactRecord&) = default;
};

// ---------------------------------------------------------------------------
// JSON-lines parsing and serialization. Round-trips are byte-exact: fields
// are emitted in a fixed order and integers stay integers.

inline std::vector<EntityRecord> parse_entity_file(std::istream& in,
                                                   const std::string& origin = "<stream>") {
  std::vector<EntityRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    EntityRecord rec;
    try {
      rec.doc = j.at("doc").get<std::string>();
      rec.text = j.at("text").get<std::string>();
      rec.start = j.at("start").get<std::size_t>();
      rec.end = j.at("end").get<std::size_t>();
      rec.id = j.at("id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (rec.start >= rec.end)
      throw ParseError(origin + ":" + std::to_string(line_no) +
                       ": mention boundary must satisfy start < end");
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<EntityRecord> parse_entity_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open entity file: " + path);
  return parse_entity_file(in, path);
}

// Duplicate triplets (same doc/h/r/t) are kept once; `dropped` counts them.
inline std::vector<FactRecord> parse_fact_file(std::istream& in,
                                               const std::string& origin = "<stream>",
                                               std::size_t* dropped = nullptr) {
  std::vector<FactRecord> out;
  std::set<std::array<std::string, 4>> seen;
  std::string line;
  std::size_t line_no = 0, dup = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    FactRecord rec;
    try {
      rec.doc = j.at("doc").get<std::string>();
      rec.h = j.at("h").get<std::string>();
      rec.r = j.at("r").get<std::string>();
      rec.t = j.at("t").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!seen.insert({rec.doc, rec.h, rec.r, rec.t}).second) {
      ++dup;
      continue;
    }
    out.push_back(std::move(rec));
  }
  if (dropped != nullptr) *dropped = dup;
  return out;
}

inline std::vector<FactRecord> parse_fact_file(const std::string& path,
                                               std::size_t* dropped = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fact file: " + path);
  return parse_fact_file(in, path, dropped);
}

inline void write_entity_file(std::ostream& out,
                              const std::vector<EntityRecord>& records) {
  for (const EntityRecord& r : records) {
    nlohmann::ordered_json j;
    j["doc"] = r.doc;
    j["text"] = r.text;
    j["start"] = r.start;
    j["end"] = r.end;
    j["id"] = r.id;
    out << j.dump() << '\n';
  }
}

inline void write_fact_file(std::ostream& out,
                            const std::vector<FactRecord>& records) {
  for (const FactRecord& r : records) {
    nlohmann::ordered_json j;
    j["doc"] = r.doc;
    j["h"] = r.h;
    j["r"] = r.r;
    j["t"] = r.t;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Tokenization: split on whitespace, with punctuation characters forming
// their own single-character tokens. Spans are character-level half-open.

struct TokenSpan {
  std::string text;
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
};

inline bool is_token_punct(char c) {
  static const std::string punct = ".,;:!?\"'()[]{}";
  return punct.find(c) != std::string::npos;
}

inline std::vector<TokenSpan> tokenize(const std::string& text) {
  std::vector<TokenSpan> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      ++i;
      continue;
    }
    if (is_token_punct(c)) {
      out.push_back({std::string(1, c), i, i + 1});
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' &&
           text[j] != '\n' && text[j] != '\r' && !is_token_punct(text[j]))
      ++j;
    out.push_back({text.substr(i, j - i), i, j});
    i = j;
  }
  return out;
}

// Closed token vocabulary fixed from the training split. Row 0 is [UNK];
// every token unseen in training maps there.
struct TokenVocabulary {
  static constexpr std::size_t kUnk = 0;
  std::vector<std::string> tokens{"[UNK]"};
  std::unordered_map<std::string, std::size_t> index{{"[UNK]", 0}};

  std::size_t add(const std::string& tok) {
    auto it = index.find(tok);
    if (it != index.end()) return it->second;
    const std::size_t id = tokens.size();
    tokens.push_back(tok);
    index.emplace(tok, id);
    return id;
  }

  std::size_t lookup(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? kUnk : it->second;
  }

  std::size_t size() const { return tokens.size(); }
};

// ---------------------------------------------------------------------------
// Entity vocabulary: the ordered set of training entities plus the reserved
// null entity at row 0. Unknown ids resolve to the null row, never a crash.

struct EntityVocabulary {
  std::vector<std::string> ids;  // row i+1 holds ids[i]
  std::unordered_map<std::string, std::size_t> row_of;  // id -> memory row >= 1
  std::unordered_map<std::string, std::size_t> frequency;

  std::size_t add(const std::string& id) {
    auto it = row_of.find(id);
    if (it == row_of.end()) {
      ids.push_back(id);
      it = row_of.emplace(id, ids.size()).first;
    }
    ++frequency[id];
    return it->second;
  }

  // Memory row for an id; 0 (the null entity) when unseen in training.
  std::size_t row(const std::string& id) const {
    auto it = row_of.find(id);
    return it == row_of.end() ? 0 : it->second;
  }

  bool contains(const std::string& id) const { return row_of.contains(id); }

  // Memory table height: |E_train| + 1 for the null row.
  std::size_t memory_size() const { return ids.size() + 1; }
};

// Relation name registry. Unknown relation ids encountered while assembling
// examples register fresh rows; the model's relation table sizes off this.
struct RelationVocabulary {
  std::vector<std::string> names;
  std::unordered_map<std::string, std::size_t> index;

  std::size_t add(const std::string& name) {
    auto it = index.find(name);
    if (it != index.end()) return it->second;
    const std::size_t id = names.size();
    names.push_back(name);
    index.emplace(name, id);
    return id;
  }

  std::size_t size() const { return names.size(); }
};

// ---------------------------------------------------------------------------
// Task examples. Contexts keep raw token strings; id encoding happens against
// a vocabulary at model time so the same example can serve any vocab.

enum class TaskKind { kSpan, kTagging };

struct TaskExample {
  std::string doc;
  std::vector<std::string> context_tokens;
  std::vector<std::string> entity_ids;  // local entity list, global ids
  std::vector<Mention> mentions;        // Mention::entity indexes entity_ids
  std::vector<std::array<std::size_t, 3>> facts;  // local h, relation id, local t

  TaskKind kind = TaskKind::kSpan;
  std::vector<std::string> question_tokens;  // span task
  std::size_t answer_start = 0;              // token coords, inclusive
  std::size_t answer_end = 0;
  std::vector<std::size_t> tags;  // tagging task, one label per context token

  void validate() const {
    validate_mentions(mentions, context_tokens.size());
    for (const Mention& m : mentions)
      if (m.entity >= entity_ids.size())
        throw AnnotationError("mention references unknown local entity");
    for (const auto& [h, r, t] : facts)
      if (h >= entity_ids.size() || t >= entity_ids.size())
        throw AnnotationError("fact endpoint outside local entity list");
    if (kind == TaskKind::kSpan) {
      if (answer_start > answer_end || answer_end >= context_tokens.size())
        throw AnnotationError("gold answer span outside context");
    } else if (tags.size() != context_tokens.size()) {
      throw AnnotationError("tag sequence length mismatch");
    }
  }
};

inline EntityVocabulary build_entity_vocab(const std::vector<TaskExample>& train) {
  EntityVocabulary vocab;
  for (const TaskExample& ex : train) {
    // An entity mentioned several times in one context still counts each
    // mention toward its frequency, matching corpus-level counts.
    for (const Mention& m : ex.mentions) vocab.add(ex.entity_ids[m.entity]);
  }
  return vocab;
}

// Frequency pruning for memory-size ablations: keep only entities mentioned
// strictly more than `min_frequency` times; everything else falls back to
// the null row. Zero keeps the vocabulary intact.
inline EntityVocabulary prune_entity_vocab(const EntityVocabulary& vocab,
                                           std::size_t min_frequency) {
  if (min_frequency == 0) return vocab;
  EntityVocabulary pruned;
  for (const std::string& id : vocab.ids) {
    const std::size_t freq = vocab.frequency.at(id);
    if (freq > min_frequency) {
      pruned.add(id);
      pruned.frequency[id] = freq;
    }
  }
  return pruned;
}

inline TokenVocabulary build_token_vocab(const std::vector<TaskExample>& train) {
  TokenVocabulary vocab;
  for (const TaskExample& ex : train) {
    for (const std::string& t : ex.context_tokens) vocab.add(t);
    for (const std::string& t : ex.question_tokens) vocab.add(t);
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// Character-to-token mention alignment. A mention survives only when its
// character span lands exactly on token boundaries; misaligned mentions are
// dropped and counted.

inline std::vector<Mention> align_mentions(
    const std::vector<TokenSpan>& tokens,
    const std::vector<EntityRecord>& records,
    const std::vector<std::string>& local_ids, std::size_t* dropped = nullptr) {
  std::size_t misses = 0;
  std::unordered_map<std::string, std::size_t> local;
  for (std::size_t i = 0; i < local_ids.size(); ++i) local.emplace(local_ids[i], i);

  std::vector<Mention> out;
  for (const EntityRecord& rec : records) {
    std::optional<std::size_t> first, last;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].begin == rec.start) first = i;
      if (tokens[i].end == rec.end) last = i;
    }
    if (!first.has_value() || !last.has_value() || *first > *last) {
      ++misses;
      continue;
    }
    auto it = local.find(rec.id);
    if (it == local.end()) {
      ++misses;
      continue;
    }
    out.push_back({it->second, *first, *last});
  }
  if (dropped != nullptr) *dropped = misses;
  return out;
}

// ---------------------------------------------------------------------------
// Relation selection over an extractor's probability distribution. Returns
// the top-1 relation; when top-1 is no_relation and the runner-up clears the
// threshold (strictly), the runner-up wins; otherwise no_relation.

inline std::string select_relation(
    const std::vector<std::pair<std::string, double>>& distribution,
    double threshold = 0.1, const std::string& no_relation = "no_relation") {
  if (distribution.empty())
    throw ContractError("select_relation: empty distribution");
  for (const auto& [name, p] : distribution)
    if (p < 0.0) throw ContractError("select_relation: negative probability");

  // Stable top-2: ties keep the earlier entry.
  std::size_t top1 = 0;
  for (std::size_t i = 1; i < distribution.size(); ++i)
    if (distribution[i].second > distribution[top1].second) top1 = i;
  if (distribution[top1].first != no_relation) return distribution[top1].first;
  if (distribution.size() == 1) return no_relation;

  std::optional<std::size_t> top2;
  for (std::size_t i = 0; i < distribution.size(); ++i) {
    if (i == top1) continue;
    if (!top2.has_value() || distribution[i].second > distribution[*top2].second)
      top2 = i;
  }
  if (distribution[*top2].second > threshold) return distribution[*top2].first;
  return no_relation;
}

// ---------------------------------------------------------------------------
// Seen/Unseen test split: a context with fewer than 3 entities outside the
// training vocabulary goes to Seen, the rest to Unseen. Total and disjoint.

struct SeenUnseenSplit {
  std::vector<std::size_t> seen;    // indices into the test set
  std::vector<std::size_t> unseen;
};

inline SeenUnseenSplit split_seen_unseen(const std::vector<TaskExample>& test,
                                         const EntityVocabulary& vocab) {
  SeenUnseenSplit split;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t unknown = 0;
    for (const std::string& id : test[i].entity_ids)
      if (!vocab.contains(id)) ++unknown;
    (unknown < 3 ? split.seen : split.unseen).push_back(i);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Frequency histogram: counts per entity, descending, ties broken by id so
// the CSV is deterministic.

inline std::vector<std::pair<std::string, std::size_t>> entity_frequency_histogram(
    const EntityVocabulary& vocab) {
  std::vector<std::pair<std::string, std::size_t>> rows(vocab.frequency.begin(),
                                                        vocab.frequency.end());
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return rows;
}

inline void write_histogram_csv(
    std::ostream& out, const std::vector<std::pair<std::string, std::size_t>>& rows) {
  out << "entity,count\n";
  for (const auto& [id, count] : rows) out << id << ',' << count << '\n';
}

}  // namespace kala
