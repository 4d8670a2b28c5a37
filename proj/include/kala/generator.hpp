#pragma once

// Synthetic corpus generator. Entities carry a latent type; each type has a
// designated anchor entity and every entity is linked to its anchor by an
// instance_of fact. Questions name a type and the answer is the mention of
// the context entity with that type. Surface names collide on purpose, so
// the token stream underdetermines the answer while the entity annotations
// and the graph determine it. Unseen test entities use fresh surface tokens
// (out-of-vocabulary at encode time) but stay resolvable through the graph.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "kala/corpus.hpp"
#include "kala/error.hpp"
#include "kala/rng.hpp"

namespace kala {

struct GeneratorConfig {
  std::size_t num_types = 4;
  std::size_t num_entities = 40;        // seen pool, ids E*/A*; first num_types are anchors
  std::size_t num_unseen = 24;          // test-only pool, ids U*
  std::size_t num_relations = 2;        // instance_of plus decorative extras
  std::size_t entities_per_context = 4; // distinct types per context
  std::size_t train_contexts = 240;
  std::size_t val_contexts = 40;
  std::size_t test_contexts = 80;
  double unseen_fraction = 0.5;         // fraction of test contexts built from unseen entities
  double power_law_alpha = 1.1;         // rank-frequency exponent for seen entity sampling
  std::size_t surface_pool = 8;         // colliding one-token surface names
  double extra_fact_prob = 0.2;         // chance of one decorative fact per context
  TaskKind kind = TaskKind::kSpan;

  void validate() const {
    if (num_types == 0 || num_entities == 0 || surface_pool == 0)
      throw ConfigError("generator: counts must be positive");
    if (num_entities < num_types)
      throw ConfigError("generator: need at least one entity per type");
    if (entities_per_context == 0 || entities_per_context > num_types)
      throw ConfigError("generator: entities per context must be in [1, num_types]");
    if (unseen_fraction < 0.0 || unseen_fraction > 1.0)
      throw ConfigError("generator: unseen fraction outside [0, 1]");
    if (unseen_fraction > 0.0 && num_relations == 0)
      throw ConfigError("generator: unseen contexts need facts but zero relations configured");
    if (unseen_fraction > 0.0 && num_unseen < std::max<std::size_t>(entities_per_context, 3))
      throw ConfigError("generator: unseen pool too small to build an unseen-heavy context");
  }
};

// One line of documents.jsonl: the rendered text plus the task payload in
// character coordinates, so examples re-assemble from disk exactly.
struct DocumentRecord {
  std::string doc;
  std::string split;  // "train" | "val" | "test"
  std::string kind;   // "span" | "tagging"
  std::string text;
  std::string question;
  std::size_t answer_start = 0;  // char offsets, half-open
  std::size_t answer_end = 0;
  std::vector<std::size_t> tags;

  friend bool operator==(const DocumentRecord&, const DocumentRecord&) = default;
};

struct GeneratedCorpus {
  std::vector<TaskExample> train, val, test;
  std::vector<DocumentRecord> documents;
  std::vector<EntityRecord> entities;
  std::vector<FactRecord> facts;
  RelationVocabulary relations;
};

// ---------------------------------------------------------------------------
// Rank-frequency sampling. Weight of rank i (0-based) is (i+1)^-alpha.

inline std::vector<double> power_law_weights(std::size_t n, double alpha) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = std::pow(static_cast<double>(i + 1), -alpha);
  return w;
}

inline std::vector<double> cumulative(const std::vector<double>& weights) {
  std::vector<double> cum(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    cum[i] = acc;
  }
  for (double& c : cum) c /= acc;
  return cum;
}

// u in [0, 1) picks the first index whose cumulative mass exceeds u.
inline std::size_t sample_index(const std::vector<double>& cum, double u) {
  auto it = std::upper_bound(cum.begin(), cum.end(), u);
  if (it == cum.end()) return cum.size() - 1;
  return static_cast<std::size_t>(it - cum.begin());
}

// ---------------------------------------------------------------------------
// Example assembly from on-disk records. Shared by the generator and the
// loader so files and in-memory examples can never drift apart.

inline TaskExample assemble_example(const DocumentRecord& doc,
                                    const std::vector<EntityRecord>& doc_entities,
                                    const std::vector<FactRecord>& doc_facts,
                                    RelationVocabulary& relations) {
  TaskExample ex;
  ex.doc = doc.doc;
  ex.kind = doc.kind == "tagging" ? TaskKind::kTagging : TaskKind::kSpan;

  std::vector<TokenSpan> tokens = tokenize(doc.text);
  for (const TokenSpan& t : tokens) ex.context_tokens.push_back(t.text);

  // Local entity order: mentioned entities first (record order), then fact
  // endpoints that never appear in the text (graph-only anchors).
  std::unordered_map<std::string, std::size_t> local;
  for (const EntityRecord& r : doc_entities)
    if (!local.contains(r.id)) {
      local.emplace(r.id, ex.entity_ids.size());
      ex.entity_ids.push_back(r.id);
    }
  for (const FactRecord& f : doc_facts)
    for (const std::string& id : {f.h, f.t})
      if (!local.contains(id)) {
        local.emplace(id, ex.entity_ids.size());
        ex.entity_ids.push_back(id);
      }

  std::size_t dropped = 0;
  ex.mentions = align_mentions(tokens, doc_entities, ex.entity_ids, &dropped);
  for (const FactRecord& f : doc_facts)
    ex.facts.push_back({local.at(f.h), relations.add(f.r), local.at(f.t)});

  if (ex.kind == TaskKind::kSpan) {
    for (const TokenSpan& t : tokenize(doc.question))
      ex.question_tokens.push_back(t.text);
    bool found_start = false, found_end = false;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].begin == doc.answer_start) {
        ex.answer_start = i;
        found_start = true;
      }
      if (tokens[i].end == doc.answer_end) {
        ex.answer_end = i;
        found_end = true;
      }
    }
    if (!found_start || !found_end)
      throw AnnotationError(doc.doc + ": answer span misaligned with tokens");
  } else {
    ex.tags = doc.tags;
  }
  ex.validate();
  return ex;
}

// ---------------------------------------------------------------------------

namespace detail_gen {

struct EntityDef {
  std::string id;
  std::size_t type = 0;
  std::string surface;
  bool seen = true;
};

struct Pools {
  std::vector<EntityDef> seen;    // index i, type i % T, anchors are [0, T)
  std::vector<EntityDef> unseen;
  std::vector<std::vector<std::size_t>> seen_by_type;
  std::vector<std::vector<std::size_t>> unseen_by_type;
};

inline Pools make_pools(const GeneratorConfig& cfg) {
  Pools p;
  p.seen_by_type.resize(cfg.num_types);
  p.unseen_by_type.resize(cfg.num_types);
  for (std::size_t i = 0; i < cfg.num_entities; ++i) {
    EntityDef e;
    e.type = i % cfg.num_types;
    e.id = (i < cfg.num_types ? "A" : "E") + std::to_string(i);
    // Consecutive entity indices cycle through the types, so dividing by the
    // type count before the pool modulus hands every surface to entities of
    // all types: the surface token alone never identifies the type.
    e.surface = "w" + std::to_string((i / cfg.num_types) % cfg.surface_pool);
    p.seen_by_type[e.type].push_back(p.seen.size());
    p.seen.push_back(e);
  }
  for (std::size_t j = 0; j < cfg.num_unseen; ++j) {
    EntityDef e;
    e.type = j % cfg.num_types;
    e.id = "U" + std::to_string(j);
    e.surface = "u" + std::to_string(j) + "q";  // fresh token, OOV at test time
    e.seen = false;
    p.unseen_by_type[e.type].push_back(p.unseen.size());
    p.unseen.push_back(e);
  }
  return p;
}

inline const EntityDef& anchor_of(const Pools& pools, std::size_t type) {
  return pools.seen[type];  // entity i < T is the anchor of type i
}

}  // namespace detail_gen

inline GeneratedCorpus generate_synthetic_corpus(const GeneratorConfig& cfg,
                                                 std::uint64_t seed) {
  cfg.validate();
  GeneratedCorpus corpus;
  Rng rng(seed);
  const auto pools = detail_gen::make_pools(cfg);

  // Per-type cumulative rank-frequency distributions over seen entities.
  const std::vector<double> weights = power_law_weights(cfg.num_entities, cfg.power_law_alpha);
  std::vector<std::vector<double>> type_cum(cfg.num_types);
  for (std::size_t t = 0; t < cfg.num_types; ++t) {
    std::vector<double> w;
    for (std::size_t idx : pools.seen_by_type[t]) w.push_back(weights[idx]);
    type_cum[t] = cumulative(w);
  }

  const std::size_t num_seen_test =
      cfg.test_contexts -
      static_cast<std::size_t>(std::floor(cfg.unseen_fraction * cfg.test_contexts));

  // Filled after the training split: val/test seen contexts may only use
  // entities actually observed in training, so "unseen fraction 0" really
  // means every test entity is in the training vocabulary.
  std::vector<std::vector<std::size_t>> observed_by_type(cfg.num_types);
  std::vector<std::vector<double>> observed_cum(cfg.num_types);
  bool restrict_to_observed = false;

  auto make_context = [&](const std::string& split, std::size_t ordinal,
                          bool use_unseen) {
    const std::size_t k = cfg.entities_per_context;
    const auto& seen_buckets =
        restrict_to_observed ? observed_by_type : pools.seen_by_type;
    const auto& seen_cum = restrict_to_observed ? observed_cum : type_cum;

    // k distinct eligible types, shuffled so answer position carries no signal.
    std::vector<std::size_t> types;
    for (std::size_t t = 0; t < cfg.num_types; ++t)
      if (use_unseen ? !pools.unseen_by_type[t].empty() : !seen_buckets[t].empty())
        types.push_back(t);
    if (types.size() < k)
      throw ConfigError("generator: not enough populated types for a context");
    for (std::size_t i = types.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(i)));
      std::swap(types[i], types[j]);
    }
    types.resize(k);

    std::vector<const detail_gen::EntityDef*> picked;
    for (std::size_t t : types) {
      if (use_unseen) {
        const auto& bucket = pools.unseen_by_type[t];
        picked.push_back(&pools.unseen[bucket[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<long long>(bucket.size() - 1)))]]);
      } else {
        const auto& bucket = seen_buckets[t];
        picked.push_back(
            &pools.seen[bucket[sample_index(seen_cum[t], rng.uniform(0.0, 1.0))]]);
      }
    }

    DocumentRecord doc;
    doc.doc = split + "-" + std::to_string(ordinal);
    doc.split = split;
    doc.kind = cfg.kind == TaskKind::kSpan ? "span" : "tagging";

    // Render "w3 and w0 and u7q ." with one mention per name token.
    std::vector<EntityRecord> ents;
    std::string text;
    std::vector<std::size_t> tags;
    for (std::size_t i = 0; i < picked.size(); ++i) {
      if (i > 0) {
        text += " and ";
        tags.push_back(0);
      }
      EntityRecord rec;
      rec.doc = doc.doc;
      rec.text = picked[i]->surface;
      rec.start = text.size();
      text += picked[i]->surface;
      rec.end = text.size();
      rec.id = picked[i]->id;
      ents.push_back(rec);
      tags.push_back(1 + picked[i]->type);
    }
    text += " .";
    tags.push_back(0);
    doc.text = text;

    if (cfg.kind == TaskKind::kSpan) {
      const std::size_t target =
          static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(k - 1)));
      doc.question = "which type" + std::to_string(picked[target]->type) + " ?";
      doc.answer_start = ents[target].start;
      doc.answer_end = ents[target].end;
    } else {
      doc.tags = tags;
    }

    // Facts: every context entity links to its type anchor; anchors link to
    // nothing (they define their type themselves).
    std::vector<FactRecord> facts;
    for (const auto* e : picked) {
      const auto& anchor = detail_gen::anchor_of(pools, e->type);
      if (e->id == anchor.id) continue;
      facts.push_back({doc.doc, e->id, "instance_of", anchor.id});
    }
    if (cfg.num_relations > 1 && picked.size() >= 2 &&
        rng.uniform(0.0, 1.0) < cfg.extra_fact_prob) {
      facts.push_back({doc.doc, picked[0]->id, "related_to", picked[1]->id});
    }

    corpus.documents.push_back(doc);
    corpus.entities.insert(corpus.entities.end(), ents.begin(), ents.end());
    corpus.facts.insert(corpus.facts.end(), facts.begin(), facts.end());
    return assemble_example(doc, ents, facts, corpus.relations);
  };

  for (std::size_t i = 0; i < cfg.train_contexts; ++i)
    corpus.train.push_back(make_context("train", i, false));

  std::set<std::string> in_train;
  for (const TaskExample& ex : corpus.train)
    for (const Mention& m : ex.mentions) in_train.insert(ex.entity_ids[m.entity]);
  for (std::size_t t = 0; t < cfg.num_types; ++t) {
    std::vector<double> w;
    for (std::size_t idx : pools.seen_by_type[t])
      if (in_train.contains(pools.seen[idx].id)) {
        observed_by_type[t].push_back(idx);
        w.push_back(weights[idx]);
      }
    if (!w.empty()) observed_cum[t] = cumulative(w);
  }
  restrict_to_observed = true;

  for (std::size_t i = 0; i < cfg.val_contexts; ++i)
    corpus.val.push_back(make_context("val", i, false));
  for (std::size_t i = 0; i < cfg.test_contexts; ++i)
    corpus.test.push_back(make_context("test", i, i >= num_seen_test));
  return corpus;
}

// ---------------------------------------------------------------------------
// On-disk layout: entities.jsonl, facts.jsonl, documents.jsonl, manifest.json.

inline void write_documents_file(std::ostream& out,
                                 const std::vector<DocumentRecord>& docs) {
  for (const DocumentRecord& d : docs) {
    nlohmann::ordered_json j;
    j["doc"] = d.doc;
    j["split"] = d.split;
    j["kind"] = d.kind;
    j["text"] = d.text;
    j["question"] = d.question;
    j["answer_start"] = d.answer_start;
    j["answer_end"] = d.answer_end;
    j["tags"] = d.tags;
    out << j.dump() << '\n';
  }
}

inline std::vector<DocumentRecord> parse_documents_file(
    std::istream& in, const std::string& origin = "<stream>") {
  std::vector<DocumentRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      DocumentRecord d;
      d.doc = j.at("doc").get<std::string>();
      d.split = j.at("split").get<std::string>();
      d.kind = j.at("kind").get<std::string>();
      d.text = j.at("text").get<std::string>();
      d.question = j.at("question").get<std::string>();
      d.answer_start = j.at("answer_start").get<std::size_t>();
      d.answer_end = j.at("answer_end").get<std::size_t>();
      d.tags = j.at("tags").get<std::vector<std::size_t>>();
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_corpus_files(const std::string& dir, const GeneratedCorpus& corpus,
                               std::uint64_t seed) {
  auto open = [&](const std::string& name) {
    std::ofstream f(dir + "/" + name, std::ios::binary);
    if (!f) throw IoError("cannot write " + dir + "/" + name);
    return f;
  };
  {
    auto f = open("entities.jsonl");
    write_entity_file(f, corpus.entities);
  }
  {
    auto f = open("facts.jsonl");
    write_fact_file(f, corpus.facts);
  }
  {
    auto f = open("documents.jsonl");
    write_documents_file(f, corpus.documents);
  }
  nlohmann::ordered_json manifest;
  manifest["seed"] = seed;
  manifest["files"] = {{"entities", "entities.jsonl"},
                       {"facts", "facts.jsonl"},
                       {"documents", "documents.jsonl"}};
  nlohmann::ordered_json splits;
  for (const char* name : {"train", "val", "test"}) {
    std::vector<std::string> ids;
    for (const DocumentRecord& d : corpus.documents)
      if (d.split == name) ids.push_back(d.doc);
    splits[name] = ids;
  }
  manifest["splits"] = splits;
  manifest["relations"] = corpus.relations.names;
  auto f = open("manifest.json");
  f << manifest.dump(2) << '\n';
}

inline GeneratedCorpus load_corpus_files(const std::string& dir) {
  GeneratedCorpus corpus;
  corpus.entities = parse_entity_file(dir + "/entities.jsonl");
  std::size_t dup = 0;
  corpus.facts = parse_fact_file(dir + "/facts.jsonl", &dup);
  {
    std::ifstream f(dir + "/documents.jsonl");
    if (!f) throw IoError("cannot open " + dir + "/documents.jsonl");
    corpus.documents = parse_documents_file(f, dir + "/documents.jsonl");
  }
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw IoError("cannot open " + dir + "/manifest.json");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  // Relation rows keep manifest order so checkpoints stay valid across loads.
  for (const auto& name : manifest.at("relations"))
    corpus.relations.add(name.get<std::string>());

  std::map<std::string, std::vector<EntityRecord>> ents_by_doc;
  for (const EntityRecord& r : corpus.entities) ents_by_doc[r.doc].push_back(r);
  std::map<std::string, std::vector<FactRecord>> facts_by_doc;
  for (const FactRecord& f : corpus.facts) facts_by_doc[f.doc].push_back(f);

  for (const DocumentRecord& d : corpus.documents) {
    TaskExample ex = assemble_example(d, ents_by_doc[d.doc], facts_by_doc[d.doc],
                                      corpus.relations);
    if (d.split == "train")
      corpus.train.push_back(std::move(ex));
    else if (d.split == "val")
      corpus.val.push_back(std::move(ex));
    else if (d.split == "test")
      corpus.test.push_back(std::move(ex));
    else
      throw ParseError(d.doc + ": unknown split '" + d.split + "'");
  }
  return corpus;
}

}  // namespace kala
