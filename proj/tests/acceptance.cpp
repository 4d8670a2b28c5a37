// Acceptance gate: ten end-to-end checks, one pass/fail line each.
// Exits nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <iomanip>
#include <string>
#include <vector>

#include "kala/analysis.hpp"
#include "kala/generator.hpp"
#include "kala/model.hpp"
#include "kala/trainer.hpp"
#include "retrieval_oracle.hpp"

using namespace kala;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// 1. Identity-modulation equivalence: knowledge variants at zero h-MLP
//    initialization match the plain encoder bit for bit.

Outcome criterion_identity_equivalence() {
  for (int trial = 0; trial < 50; ++trial) {
    Rng meta(1000 + trial);
    ModelConfig cfg;
    cfg.transformer.num_heads = 1 + static_cast<std::size_t>(meta.uniform_int(0, 2));
    cfg.transformer.hidden =
        cfg.transformer.num_heads * (2 + static_cast<std::size_t>(meta.uniform_int(0, 3)));
    cfg.transformer.num_layers = 1 + static_cast<std::size_t>(meta.uniform_int(0, 2));
    cfg.transformer.intermediate = cfg.transformer.hidden * 2;
    cfg.transformer.vocab_size = 10 + static_cast<std::size_t>(meta.uniform_int(0, 20));
    cfg.transformer.max_seq_len = 16;
    cfg.transformer.dropout = 0.0;
    for (std::size_t l = 1; l <= cfg.transformer.num_layers; ++l)
      if (meta.bernoulli(0.6)) cfg.transformer.kfm_locations.insert(l);
    if (cfg.transformer.kfm_locations.empty())
      cfg.transformer.kfm_locations.insert(cfg.transformer.num_layers);
    cfg.variant = trial % 2 == 0 ? Variant::kRelational : Variant::kPointwise;
    cfg.num_entities = 3 + static_cast<std::size_t>(meta.uniform_int(0, 5));
    cfg.num_relations = 1 + static_cast<std::size_t>(meta.uniform_int(0, 2));
    cfg.relation_dim = 4;

    ModelConfig plain = cfg;
    plain.variant = Variant::kFineTune;
    Rng a(2000 + trial), b(2000 + trial);
    KalaModel knowledge(cfg, a);
    KalaModel vanilla(plain, b);

    ModelInput in;
    const std::size_t n = 2 + static_cast<std::size_t>(meta.uniform_int(0, 10));
    for (std::size_t i = 0; i < n; ++i)
      in.token_ids.push_back(static_cast<std::size_t>(
          meta.uniform_int(0, static_cast<std::int64_t>(cfg.transformer.vocab_size - 1))));
    const std::size_t k = 1 + static_cast<std::size_t>(meta.uniform_int(0, 2));
    for (std::size_t e = 0; e < k; ++e)
      in.entities.push_back(
          {"E" + std::to_string(e),
           static_cast<std::size_t>(meta.uniform_int(0, static_cast<std::int64_t>(cfg.num_entities)))});
    std::size_t pos = 0;
    for (std::size_t e = 0; e < k && pos < n; ++e) {
      const std::size_t end =
          std::min(n - 1, pos + static_cast<std::size_t>(meta.uniform_int(0, 1)));
      in.mentions.push_back({e, pos, end});
      pos = end + 2;
    }
    if (k >= 2) in.facts.push_back({0, 0, 1});

    ModelOutput h_know = knowledge.forward(in);
    ModelOutput h_van = vanilla.forward(in);
    for (std::size_t l = 0; l < h_know.states.layers.size(); ++l) {
      const auto& x = h_know.states.layers[l].data();
      const auto& y = h_van.states.layers[l].data();
      if (x != y)
        return {false, "trial " + std::to_string(trial) + " layer " +
                           std::to_string(l) + " differs"};
    }
  }
  return {true, "50 random configs bit-identical to the plain encoder"};
}

// ---------------------------------------------------------------------------
// 2. Gradient suite across every parameter group of the full relational model.

Outcome criterion_gradient_suite() {
  GeneratorConfig gc;
  gc.num_types = 2;
  gc.num_entities = 8;
  gc.num_unseen = 4;
  gc.entities_per_context = 2;
  gc.train_contexts = 16;
  gc.val_contexts = 4;
  gc.test_contexts = 4;
  GeneratedCorpus corpus = generate_synthetic_corpus(gc, 7);
  TokenVocabulary tokens = build_token_vocab(corpus.train);
  EntityVocabulary entities = build_entity_vocab(corpus.train);
  std::vector<EncodedExample> encoded;
  std::size_t maxlen = 0;
  for (const TaskExample& ex : corpus.train) {
    encoded.push_back(encode_example(ex, tokens, entities));
    maxlen = std::max(maxlen, encoded.back().input.token_ids.size());
  }

  ModelConfig mc;
  mc.transformer.num_layers = 2;
  mc.transformer.hidden = 16;
  mc.transformer.intermediate = 32;
  mc.transformer.num_heads = 2;
  mc.transformer.dropout = 0.0;
  mc.transformer.kfm_locations = {1, 2};
  mc.transformer.vocab_size = tokens.size();
  mc.transformer.max_seq_len = maxlen;
  mc.variant = Variant::kRelational;
  mc.num_entities = entities.ids.size();
  mc.num_relations = std::max<std::size_t>(corpus.relations.size(), 1);
  mc.relation_dim = 8;

  Rng init(23);
  TrainedModel tm;
  tm.kind = TaskKind::kSpan;
  tm.model = KalaModel(mc, init);
  tm.span_head.init(mc.transformer.hidden, init);
  auto params = tm.parameters();
  Rng scale(101);  // unit-scale point so finite differences are conditioned
  for (auto& [name, p] : params)
    p.data() = Tensor::randn(p.rows(), p.cols(), scale, 0.4).data();
  tm.model.memory().pin_null_row();

  std::vector<EncodedExample> batch(encoded.begin(), encoded.begin() + 2);
  Rng pick(7);
  GradCheckReport report = grad_check(tm, batch, 4, pick);
  if (!report.null_row_grad_zero) return {false, "null memory row gradient not pinned"};
  std::ostringstream detail;
  bool pass = true;
  for (const GradCheckEntry& e : report.entries) {
    detail << e.group << "=" << e.max_rel_error << " ";
    pass = pass && e.max_rel_error < 1e-4;
  }
  return {pass, "max relative errors: " + detail.str()};
}

// ---------------------------------------------------------------------------
// 3. Retrieval oracle on 200 random graphs, attention-row invariants.

Outcome criterion_retrieval_oracle() {
  const std::size_t d = 6;
  for (int trial = 0; trial < 200; ++trial) {
    Rng rng(3000 + trial);
    EntityMemory memory(8, d, rng);
    RelationTable relations(3, 4, d, rng);
    std::array<GnnLayer, 2> layers;
    layers[0].init(d, rng);
    layers[1].init(d, rng);
    for (GnnLayer* l : {&layers[0], &layers[1]}) {
      auto& w = l->update_w.data();
      for (double& v : w) v *= 20.0;  // move updates away from tiny-init noise
    }

    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    std::vector<LocalEntity> ents;
    for (std::size_t i = 0; i < n; ++i)
      ents.push_back({"N" + std::to_string(i),
                      static_cast<std::size_t>(rng.uniform_int(0, 8))});
    std::vector<std::array<std::size_t, 3>> facts;
    const std::size_t num_facts = static_cast<std::size_t>(rng.uniform_int(0, 6));
    for (std::size_t f = 0; f < num_facts && n > 1; ++f)
      facts.push_back({static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - 1))),
                       static_cast<std::size_t>(rng.uniform_int(0, 2)),
                       static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - 1)))});
    std::vector<Tensor> reps;
    std::vector<kala_test::Vec> reps_raw;
    for (std::size_t i = 0; i < n; ++i) {
      reps.push_back(Tensor::randn(1, d, rng));
      reps_raw.push_back(kala_test::tensor_row(reps.back(), 0));
    }

    auto graph = KnowledgeGraphView::build(ents, facts, relations);
    auto got = relational_retrieve_all(graph, memory, relations, layers, reps);
    auto want =
        kala_test::oracle_retrieve_all(graph, memory, relations, layers, reps_raw);
    for (std::size_t i = 0; i < n; ++i) {
      if (got[i].has_value() != want[i].has_value())
        return {false, "trial " + std::to_string(trial) + " degeneracy mismatch"};
      if (!got[i].has_value()) continue;
      for (std::size_t c = 0; c < d; ++c)
        if (std::fabs(got[i]->at(0, c) - (*want[i])[c]) > 1e-10)
          return {false, "trial " + std::to_string(trial) + " node " +
                             std::to_string(i) + " off oracle"};
    }

    // Attention-row invariants on the first layer.
    std::vector<Tensor> states(n);
    for (std::size_t i = 0; i < n; ++i)
      states[i] = memory.embed(graph.entities[i].memory_row);
    for (std::size_t i = 0; i < n; ++i) {
      auto edges = neighborhood_with_self_loop(graph, i, relations);
      bool any = false;
      for (const Edge& e : edges) any = any || !graph.entities[e.neighbor].is_null();
      if (!any) continue;
      Tensor alpha = neighbor_attention(graph, i, states, relations, layers[0], reps[i]);
      double sum = 0.0;
      for (std::size_t k = 0; k < edges.size(); ++k) {
        if (graph.entities[edges[k].neighbor].is_null()) {
          if (alpha.at(0, k) != 0.0)
            return {false, "null neighbor received nonzero attention"};
        } else {
          sum += alpha.at(0, k);
        }
      }
      if (std::fabs(sum - 1.0) > 1e-12)
        return {false, "attention row sums to " + std::to_string(sum)};
    }
  }
  return {true, "200 graphs within 1e-10 of the oracle; rows normalized"};
}

// ---------------------------------------------------------------------------
// 4. Mention-sharing and non-entity identity.

Outcome criterion_mention_sharing() {
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(4000 + trial);
    const std::size_t d = 4 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    const std::size_t n = 4 + static_cast<std::size_t>(rng.uniform_int(0, 10));
    KfmConfig kfm;
    KfmSite site;
    site.init(d, d, rng);
    // Activate the modulation MLPs; zero init would hide sharing violations.
    for (KfmMlp* m : {&site.h1, &site.h2, &site.h3, &site.h4})
      m->w2.data() = Tensor::randn(d, d, rng, 0.5).data();

    const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    std::vector<std::optional<Tensor>> vectors;
    for (std::size_t e = 0; e < k; ++e) {
      if (rng.bernoulli(0.25))
        vectors.push_back(std::nullopt);  // null entity: identity rows
      else
        vectors.push_back(Tensor::randn(1, d, rng));
    }
    std::vector<Mention> mentions;
    std::size_t pos = 0;
    std::vector<bool> covered(n, false);
    for (std::size_t e = 0; e < k && pos + 1 < n; ++e) {
      const std::size_t end =
          std::min(n - 1, pos + static_cast<std::size_t>(rng.uniform_int(0, 2)));
      mentions.push_back({e, pos, end});
      for (std::size_t i = pos; i <= end; ++i) covered[i] = true;
      pos = end + 2;
    }

    ModulationParams mod = compute_modulation(vectors, mentions, n, site, kfm, d);
    for (const Mention& m : mentions) {
      const bool is_null = !vectors[m.entity].has_value();
      for (std::size_t i = m.start; i <= m.end; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
          if (mod.gamma1.at(i, c) != mod.gamma1.at(m.start, c) ||
              mod.beta2.at(i, c) != mod.beta2.at(m.start, c))
            return {false, "rows differ within a mention"};
          if (is_null && (mod.gamma1.at(i, c) != 1.0 || mod.beta1.at(i, c) != 0.0))
            return {false, "null-entity mention not identity"};
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (covered[i]) continue;
      for (std::size_t c = 0; c < d; ++c)
        if (mod.gamma1.at(i, c) != 1.0 || mod.beta1.at(i, c) != 0.0 ||
            mod.gamma2.at(i, c) != 1.0 || mod.beta2.at(i, c) != 0.0)
          return {false, "non-mention row is not exact identity"};
    }
  }
  return {true, "100 random annotated sequences share rows and keep identity"};
}

// ---------------------------------------------------------------------------
// 5. Null-row pinning across 100+ optimizer steps.

Outcome criterion_null_row_pinning() {
  GeneratorConfig gc;
  gc.num_types = 2;
  gc.num_entities = 8;
  gc.num_unseen = 4;
  gc.entities_per_context = 2;
  gc.train_contexts = 32;
  gc.val_contexts = 4;
  gc.test_contexts = 4;
  GeneratedCorpus corpus = generate_synthetic_corpus(gc, 5);
  TokenVocabulary tokens = build_token_vocab(corpus.train);
  EntityVocabulary entities = build_entity_vocab(corpus.train);
  std::vector<EncodedExample> encoded, val;
  std::size_t maxlen = 0;
  for (const TaskExample& ex : corpus.train) {
    encoded.push_back(encode_example(ex, tokens, entities));
    maxlen = std::max(maxlen, encoded.back().input.token_ids.size());
  }
  for (const TaskExample& ex : corpus.val)
    val.push_back(encode_example(ex, tokens, entities));

  ModelConfig mc;
  mc.transformer.num_layers = 1;
  mc.transformer.hidden = 8;
  mc.transformer.intermediate = 16;
  mc.transformer.num_heads = 2;
  mc.transformer.dropout = 0.0;
  mc.transformer.kfm_locations = {1};
  mc.transformer.vocab_size = tokens.size();
  mc.transformer.max_seq_len = maxlen;
  mc.variant = Variant::kRelational;
  mc.num_entities = entities.ids.size();
  mc.num_relations = std::max<std::size_t>(corpus.relations.size(), 1);
  mc.relation_dim = 4;

  TrainConfig tc;
  tc.epochs = 7;  // 16 batches/epoch x 7 = 112 optimizer steps
  tc.batch_size = 2;
  tc.seed = 3;
  const std::size_t steps = (encoded.size() / tc.batch_size) * tc.epochs;
  if (steps < 100) return {false, "setup only produced " + std::to_string(steps) + " steps"};
  TrainOutput run = train(mc, tc, encoded, val, TaskKind::kSpan);
  for (std::size_t c = 0; c < mc.transformer.hidden; ++c)
    if (run.trained.model.memory().table.at(0, c) != 0.0)
      return {false, "row 0 drifted at column " + std::to_string(c)};
  return {true, std::to_string(steps) + " optimizer steps, row 0 exactly zero"};
}

// ---------------------------------------------------------------------------
// 6. Relation-selection rule with a strict ">" at the threshold.

Outcome criterion_relation_rule() {
  using Dist = std::vector<std::pair<std::string, double>>;
  auto check = [](const Dist& dist, const std::string& want) {
    return select_relation(dist) == want;
  };
  bool ok = true;
  // Top-1 is a real relation: keep it regardless of the runner-up.
  ok = ok && check({{"r1", 0.6}, {"no_relation", 0.3}, {"r2", 0.1}}, "r1");
  // Top-1 no_relation, runner-up strictly above 0.1: promote the runner-up.
  ok = ok && check({{"no_relation", 0.7}, {"r1", 0.100000001}, {"r2", 0.05}}, "r1");
  ok = ok && check({{"no_relation", 0.5}, {"r1", 0.3}}, "r1");
  // Exactly at the threshold: strict comparison keeps no_relation.
  ok = ok && check({{"no_relation", 0.8}, {"r1", 0.1}, {"r2", 0.05}}, "no_relation");
  // Below the threshold.
  ok = ok && check({{"no_relation", 0.9}, {"r1", 0.0999}}, "no_relation");
  // Only no_relation present.
  ok = ok && check({{"no_relation", 1.0}}, "no_relation");
  // Custom threshold respected on both sides of the boundary.
  ok = ok && select_relation({{"no_relation", 0.6}, {"r1", 0.3}}, 0.3) == "no_relation";
  ok = ok && select_relation({{"no_relation", 0.6}, {"r1", 0.31}}, 0.3) == "r1";
  bool threw = false;
  try {
    select_relation({});
  } catch (const ContractError&) {
    threw = true;
  }
  ok = ok && threw;
  threw = false;
  try {
    select_relation({{"r1", -0.2}, {"no_relation", 1.2}});
  } catch (const ContractError&) {
    threw = true;
  }
  ok = ok && threw;
  return {ok, "boundary probabilities follow the strict-> rule"};
}

// ---------------------------------------------------------------------------
// 7. FLOPs ratio on the BERT-base-like configuration.

Outcome criterion_flops_ratio() {
  ModelConfig cfg;
  cfg.transformer.num_layers = 12;
  cfg.transformer.hidden = 768;
  cfg.transformer.intermediate = 3072;
  cfg.transformer.num_heads = 12;
  cfg.transformer.vocab_size = 30522;
  cfg.transformer.max_seq_len = 384;
  cfg.transformer.kfm_locations = {12};
  cfg.num_entities = 62823;
  cfg.num_relations = 20;
  cfg.relation_dim = 16;

  CorpusStats stats;
  stats.avg_nodes_per_context = 57.0;
  stats.avg_edges_per_node = 0.64;
  stats.max_seq_len = 384;
  stats.memory_size = 62824;

  cfg.variant = Variant::kFineTune;
  const double base = estimate_flops(cfg, stats).training_total();
  cfg.variant = Variant::kRelational;
  const double kala = estimate_flops(cfg, stats).training_total();
  const double ratio = kala / base;
  const double target = 10.5 / 9.5;
  std::ostringstream detail;
  detail << "ratio " << ratio << " vs target " << target << " +-5%";
  return {ratio > target * 0.95 && ratio < target * 1.05, detail.str()};
}

// ---------------------------------------------------------------------------
// 8 + 9. Directional learning result and unseen-proximity direction,
// sharing the trained models across both criteria.

struct ExperimentMeans {
  double ft_f1 = 0, pw_f1 = 0, rel_f1 = 0;
  double ft_unseen = 0, rel_unseen = 0;
  double ft_prox = 0, rel_prox = 0;
};

ExperimentMeans run_experiment() {
  ExperimentMeans m;
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  for (std::uint64_t seed : seeds) {
    GeneratorConfig gc;  // defaults: 4 types, 40 seen, 24 unseen, 240/40/80
    GeneratedCorpus corpus = generate_synthetic_corpus(gc, 100 + seed);
    TokenVocabulary tokens = build_token_vocab(corpus.train);
    EntityVocabulary entities = build_entity_vocab(corpus.train);
    std::vector<EncodedExample> tr, va, te;
    std::size_t maxlen = 0;
    auto enc = [&](const std::vector<TaskExample>& xs, std::vector<EncodedExample>& out) {
      for (const TaskExample& ex : xs) {
        out.push_back(encode_example(ex, tokens, entities));
        maxlen = std::max(maxlen, out.back().input.token_ids.size());
      }
    };
    enc(corpus.train, tr);
    enc(corpus.val, va);
    enc(corpus.test, te);
    SeenUnseenSplit split = split_seen_unseen(corpus.test, entities);

    for (Variant v : {Variant::kFineTune, Variant::kPointwise, Variant::kRelational}) {
      ModelConfig mc;
      mc.transformer.num_layers = 2;
      mc.transformer.hidden = 32;
      mc.transformer.intermediate = 64;
      mc.transformer.num_heads = 2;
      mc.transformer.dropout = 0.1;
      mc.transformer.kfm_locations = {1, 2};
      mc.transformer.vocab_size = tokens.size();
      mc.transformer.max_seq_len = maxlen;
      mc.variant = v;
      mc.num_entities = entities.ids.size();
      mc.num_relations = std::max<std::size_t>(corpus.relations.size(), 1);
      mc.relation_dim = 16;

      TrainConfig tc;
      tc.epochs = 200;
      tc.batch_size = 8;
      tc.learning_rate = 1e-3;
      tc.seed = seed;
      TrainOutput run = train(mc, tc, tr, va, TaskKind::kSpan);
      EvalResult res = evaluate_examples(run.trained, te, &split);
      const double unseen = res.unseen_f1.value_or(0.0);
      double prox = 0.0;
      ProximityReport pr = unseen_proximity(run.trained, te, entities);
      if (!pr.empty) prox = pr.mean_distance;

      const double w = 1.0 / static_cast<double>(seeds.size());
      if (v == Variant::kFineTune) {
        m.ft_f1 += w * res.f1;
        m.ft_unseen += w * unseen;
        m.ft_prox += w * prox;
      } else if (v == Variant::kPointwise) {
        m.pw_f1 += w * res.f1;
      } else {
        m.rel_f1 += w * res.f1;
        m.rel_unseen += w * unseen;
        m.rel_prox += w * prox;
      }
    }
  }
  return m;
}

Outcome criterion_directional_learning(const ExperimentMeans& m) {
  std::ostringstream detail;
  detail << "mean F1 rel=" << m.rel_f1 << " pw=" << m.pw_f1 << " ft=" << m.ft_f1
         << "; unseen rel=" << m.rel_unseen << " ft=" << m.ft_unseen;
  const bool ordering = m.rel_f1 > m.pw_f1 && m.pw_f1 >= m.ft_f1;
  const bool margin = m.rel_unseen - m.ft_unseen >= 0.02;
  return {ordering && margin, detail.str()};
}

Outcome criterion_proximity_direction(const ExperimentMeans& m) {
  std::ostringstream detail;
  detail << "mean proximity rel=" << m.rel_prox << " ft=" << m.ft_prox;
  return {m.rel_prox < m.ft_prox, detail.str()};
}

// ---------------------------------------------------------------------------
// 10. Golden format round-trips and specified parse errors.

Outcome criterion_format_round_trips() {
  const std::string dir = KALA_TEST_FIXTURES;
  auto slurp = [](const std::string& path) {
    std::ifstream in(path);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
  };

  const std::string ent_text = slurp(dir + "/entities.golden.jsonl");
  std::istringstream ent_in(ent_text);
  std::ostringstream ent_out;
  write_entity_file(ent_out, parse_entity_file(ent_in, "golden"));
  if (ent_out.str() != ent_text) return {false, "entity file round-trip differs"};

  const std::string fact_text = slurp(dir + "/facts.golden.jsonl");
  std::istringstream fact_in(fact_text);
  std::ostringstream fact_out;
  write_fact_file(fact_out, parse_fact_file(fact_in, "golden"));
  if (fact_out.str() != fact_text) return {false, "fact file round-trip differs"};

  auto expect_parse_error = [](const std::string& line, const std::string& needle) {
    std::istringstream in(line);
    try {
      parse_entity_file(in, "bad.jsonl");
    } catch (const ParseError& e) {
      return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
  };
  bool ok = true;
  ok = ok && expect_parse_error("{not json", "bad.jsonl:1");
  ok = ok && expect_parse_error(
                 R"({"doc":"d","text":"t","start":5,"end":2,"id":"Q1"})", "start < end");
  ok = ok && expect_parse_error(R"({"doc":"d","text":"t","start":0})", "bad.jsonl:1");
  std::istringstream dup(
      R"({"doc":"d","h":"a","r":"r","t":"b"})" "\n"
      R"({"doc":"d","h":"a","r":"r","t":"b"})" "\n");
  std::size_t dropped = 0;
  const auto facts = parse_fact_file(dup, "dup", &dropped);
  ok = ok && facts.size() == 1 && dropped == 1;
  return {ok, "golden files byte-exact; malformed inputs report origin:line"};
}

}  // namespace

int main() {
  bool all_pass = true;
  int id = 0;
  auto report = [&](const std::string& name, const Outcome& o, double seconds) {
    ++id;
    all_pass = all_pass && o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  "
              << name << " — " << o.detail << " [" << std::fixed
              << std::setprecision(1) << seconds << "s]\n";
  };
  auto timed = [&](const std::string& name, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double dt =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report(name, o, dt);
  };

  timed("identity-modulation equivalence", criterion_identity_equivalence);
  timed("gradient suite", criterion_gradient_suite);
  timed("retrieval oracle", criterion_retrieval_oracle);
  timed("mention sharing / non-entity identity", criterion_mention_sharing);
  timed("null-row pinning", criterion_null_row_pinning);
  timed("relation-selection rule", criterion_relation_rule);
  timed("FLOPs ratio", criterion_flops_ratio);

  ExperimentMeans means;
  bool experiment_ok = true;
  {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      means = run_experiment();
    } catch (const std::exception& e) {
      experiment_ok = false;
      report("directional learning result",
             {false, std::string("exception: ") + e.what()}, 0.0);
      report("unseen-proximity direction",
             {false, "experiment failed upstream"}, 0.0);
    }
    if (experiment_ok) {
      const double dt =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      report("directional learning result", criterion_directional_learning(means), dt);
      report("unseen-proximity direction", criterion_proximity_direction(means), 0.0);
    }
  }

  timed("format round-trips", criterion_format_round_trips);

  std::cout << (all_pass ? "acceptance: all criteria passed"
                         : "acceptance: FAILURES present")
            << "\n";
  return all_pass ? 0 : 1;
}
