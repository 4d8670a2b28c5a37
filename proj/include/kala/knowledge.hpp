#pragma once

// Entity memory and retrieval over the per-context knowledge graph:
// point-wise lookup, triplet scoring, masked neighbor attention, and the
// two-layer attentive message-passing retrieval.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kala/annotations.hpp"
#include "kala/error.hpp"
#include "kala/rng.hpp"
#include "kala/tensor.hpp"

namespace kala {

// Learnable table of (|E_train|+1) x d embeddings. Row 0 is the null entity
// and stays exactly zero; the optimizer discards its gradient.
struct EntityMemory {
  Tensor table;

  EntityMemory() = default;
  EntityMemory(std::size_t num_train_entities, std::size_t d, Rng& rng) {
    table = Tensor::randn(num_train_entities + 1, d, rng, 0.02).set_requires_grad();
    for (std::size_t c = 0; c < d; ++c) table.at(0, c) = 0.0;
  }

  std::size_t size() const { return table.rows(); }
  std::size_t dim() const { return table.cols(); }

  Tensor embed(std::size_t row) const {
    if (row >= table.rows()) throw LookupError("entity memory: row out of range");
    return gather_rows(table, {row});
  }

  // Re-zeroes row 0 value and gradient; called after every optimizer step.
  void pin_null_row() {
    for (std::size_t c = 0; c < table.cols(); ++c) table.at(0, c) = 0.0;
    if (!table.node()->grad.empty())
      for (std::size_t c = 0; c < table.cols(); ++c) table.node()->grad[c] = 0.0;
  }
};

// Relation embeddings at width d_r, linearly projected to d before the
// 4d concatenation in the triplet score. Rows are laid out as
// [forward relations | reverse relations | self relation].
struct RelationTable {
  Tensor embeddings;  // [(2R+1) x d_r]
  Tensor projection;  // [d_r x d]
  std::size_t num_relations = 0;

  RelationTable() = default;
  RelationTable(std::size_t relations, std::size_t d_r, std::size_t d, Rng& rng)
      : num_relations(relations) {
    embeddings = Tensor::randn(2 * relations + 1, d_r, rng, 0.02).set_requires_grad();
    projection = Tensor::randn(d_r, d, rng, 0.02).set_requires_grad();
  }

  std::size_t forward_row(std::size_t rel) const {
    if (rel >= num_relations) throw LookupError("relation id out of range");
    return rel;
  }
  std::size_t reverse_row(std::size_t rel) const {
    if (rel >= num_relations) throw LookupError("relation id out of range");
    return num_relations + rel;
  }
  std::size_t self_row() const { return 2 * num_relations; }

  Tensor projected(std::size_t row) const {
    return matmul(gather_rows(embeddings, {row}), projection);
  }
};

struct Edge {
  std::size_t neighbor = 0;      // local entity index
  std::size_t relation_row = 0;  // row in RelationTable (direction encoded)
};

// Per-context adjacency over local entities, built from the context's facts.
// Facts (h, r, t) induce a forward edge at h and a reverse edge at t.
// Self-loops are not stored; retrieval inserts them.
struct KnowledgeGraphView {
  std::vector<LocalEntity> entities;
  std::vector<std::vector<Edge>> adjacency;

  static KnowledgeGraphView build(
      std::vector<LocalEntity> local_entities,
      const std::vector<std::array<std::size_t, 3>>& facts,  // {head, rel, tail}
      const RelationTable& relations) {
    KnowledgeGraphView view;
    view.entities = std::move(local_entities);
    view.adjacency.resize(view.entities.size());
    for (const auto& [h, r, t] : facts) {
      if (h >= view.entities.size() || t >= view.entities.size())
        throw AnnotationError("fact endpoint outside local entity list");
      view.adjacency[h].push_back({t, relations.forward_row(r)});
      view.adjacency[t].push_back({h, relations.reverse_row(r)});
    }
    return view;
  }

  std::size_t num_nodes() const { return entities.size(); }
};

// One attentive message-passing layer: GATv2-style triplet score, masked
// softmax over neighbors, weighted sum, affine update.
struct GnnLayer {
  Tensor score_w;   // [4d x d]
  Tensor score_a;   // [d x 1]
  Tensor update_w;  // [d x d]
  Tensor update_b;  // [1 x d]

  void init(std::size_t d, Rng& rng) {
    score_w = Tensor::randn(4 * d, d, rng, 0.02).set_requires_grad();
    score_a = Tensor::randn(d, 1, rng, 0.02).set_requires_grad();
    update_w = Tensor::randn(d, d, rng, 0.02).set_requires_grad();
    update_b = Tensor::zeros(1, d).set_requires_grad();
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".score_w", score_w);
    out.emplace_back(prefix + ".score_a", score_a);
    out.emplace_back(prefix + ".update_w", update_w);
    out.emplace_back(prefix + ".update_b", update_b);
  }
};

// psi = a^T sigma(W . [e_i || r_ij || e_j || h_ei]); sigma is LeakyReLU(0.2)
// applied before the read-out projection (GATv2 ordering). All inputs [1 x d].
inline Tensor score_triplet(const GnnLayer& layer, const Tensor& e_i,
                            const Tensor& r_ij, const Tensor& e_j,
                            const Tensor& h_ei) {
  Tensor estar = concat_cols({e_i, r_ij, e_j, h_ei});
  return matmul(leaky_relu(matmul(estar, layer.score_w), 0.2), layer.score_a);
}

// Neighborhood of `node` with the self-loop inserted, in deterministic order:
// stored edges first, self-loop last.
inline std::vector<Edge> neighborhood_with_self_loop(
    const KnowledgeGraphView& graph, std::size_t node,
    const RelationTable& relations) {
  std::vector<Edge> edges = graph.adjacency[node];
  edges.push_back({node, relations.self_row()});
  return edges;
}

// Attention coefficients over the neighborhood of `node` given per-node
// states. Null-entity neighbors get exactly 0 and are excluded from the
// softmax denominator. Throws DegenerateError when every neighbor is masked.
inline Tensor neighbor_attention(const KnowledgeGraphView& graph,
                                 std::size_t node,
                                 const std::vector<Tensor>& node_states,
                                 const RelationTable& relations,
                                 const GnnLayer& layer,
                                 const Tensor& context_rep) {
  const std::vector<Edge> edges = neighborhood_with_self_loop(graph, node, relations);
  std::vector<Tensor> scores;
  std::vector<std::uint8_t> mask;
  scores.reserve(edges.size());
  for (const Edge& e : edges) {
    // Null nodes never receive attention mass; score still computed so the
    // tensor layout is uniform, the mask removes it from the softmax.
    mask.push_back(graph.entities[e.neighbor].is_null() ? 0 : 1);
    scores.push_back(score_triplet(layer, node_states[node],
                                   relations.projected(e.relation_row),
                                   node_states[e.neighbor], context_rep));
  }
  bool any = false;
  for (std::uint8_t m : mask) any = any || (m != 0);
  if (!any)
    throw DegenerateError("neighbor_attention: all neighbors masked for node " +
                          std::to_string(node));
  Tensor score_row = concat_cols(scores);  // [1 x |N|]
  return softmax_rows(score_row, &mask);
}

struct RetrievalOptions {
  bool training = false;
  double dropout = 0.1;
  Rng* rng = nullptr;
};

// Two-layer relational retrieval for every node of the context graph.
// Entries are nullopt where retrieval degenerates (a null node with no seen
// neighbor), which callers treat as the null entity.
inline std::vector<std::optional<Tensor>> relational_retrieve_all(
    const KnowledgeGraphView& graph, const EntityMemory& memory,
    const RelationTable& relations, const std::array<GnnLayer, 2>& layers,
    const std::vector<Tensor>& context_reps, const RetrievalOptions& opts = {}) {
  const std::size_t n = graph.num_nodes();
  if (context_reps.size() != n)
    throw ContractError("relational_retrieve_all: context rep count mismatch");
  if (opts.training && opts.rng == nullptr)
    throw ContractError("relational_retrieve_all: training needs rng");

  // Layer-0 node states come straight from the memory (row 0 for null nodes).
  std::vector<Tensor> states(n);
  for (std::size_t i = 0; i < n; ++i)
    states[i] = memory.embed(graph.entities[i].memory_row);

  std::vector<std::optional<Tensor>> current(n);
  for (std::size_t layer_idx = 0; layer_idx < 2; ++layer_idx) {
    const GnnLayer& layer = layers[layer_idx];
    std::vector<std::optional<Tensor>> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<Edge> edges =
          neighborhood_with_self_loop(graph, i, relations);
      bool any_unmasked = false;
      for (const Edge& e : edges)
        any_unmasked = any_unmasked || !graph.entities[e.neighbor].is_null();
      if (!any_unmasked) {
        next[i] = std::nullopt;  // degenerate: caller maps to null entity
        continue;
      }
      Tensor alpha = neighbor_attention(graph, i, states, relations, layer,
                                        context_reps[i]);
      // Weighted sum of neighbor states.
      Tensor agg = Tensor::zeros(1, memory.dim());
      for (std::size_t k = 0; k < edges.size(); ++k) {
        if (graph.entities[edges[k].neighbor].is_null()) continue;
        Tensor coeff = slice_cols(alpha, k, k + 1);  // [1 x 1]
        agg = add(agg, matmul(coeff, states[edges[k].neighbor]));
      }
      if (opts.training)
        agg = dropout(agg, opts.dropout, *opts.rng, true);
      Tensor updated = add_rowvec(matmul(agg, layer.update_w), layer.update_b);
      if (layer_idx == 0) updated = relu(updated);
      next[i] = updated;
    }
    // Next layer scores/aggregates over updated states; degenerate nodes keep
    // their zero memory row as state so they stay masked but well-defined.
    std::vector<Tensor> next_states(n);
    for (std::size_t i = 0; i < n; ++i)
      next_states[i] = next[i].has_value() ? *next[i] : states[i];
    states = std::move(next_states);
    current = std::move(next);
  }
  return current;
}

// KALA(point-wise): plain memory lookup.
inline Tensor pointwise_retrieve(std::size_t memory_row, const EntityMemory& memory) {
  return memory.embed(memory_row);
}

}  // namespace kala
