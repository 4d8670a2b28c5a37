#pragma once

// Analytic FLOPs accounting, modulation-value statistics, and the
// unseen-entity proximity measurement.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "kala/model.hpp"
#include "kala/trainer.hpp"

namespace kala {

// ---------------------------------------------------------------------------
// FLOPs estimation.
//
// Conventions (documented here and in the report text):
//   - one multiply-add = 2 FLOPs, so an affine map d_in -> d_out over n rows
//     costs 2 * n * d_in * d_out (bias adds are absorbed into the constant);
//   - softmax, layer norm, and activations cost kElementwiseFlops per element;
//   - attention is counted through its four projections; the pairwise
//     score/context terms are omitted so the transformer estimate stays
//     linear in sequence length (at desk scale d >> n they are negligible);
//   - training = forward * 3 (backward counted as twice the forward pass).

constexpr double kMultiplyAddFlops = 2.0;
constexpr double kElementwiseFlops = 8.0;
constexpr double kTrainingMultiplier = 3.0;

struct CorpusStats {
  double avg_nodes_per_context = 0.0;
  double avg_edges_per_node = 0.0;
  std::size_t max_seq_len = 0;
  std::size_t memory_size = 0;

  void validate() const {
    if (avg_nodes_per_context < 0.0 || avg_edges_per_node < 0.0)
      throw ConfigError("corpus stats must be non-negative");
  }
};

struct FlopsReport {
  // Forward-pass FLOPs per context, by component.
  double embedding = 0.0;
  double attention = 0.0;
  double feed_forward = 0.0;
  double kfm_mlps = 0.0;
  double gnn = 0.0;
  double memory = 0.0;
  double training_multiplier = kTrainingMultiplier;

  double forward_total() const {
    return embedding + attention + feed_forward + kfm_mlps + gnn + memory;
  }
  double training_total() const { return forward_total() * training_multiplier; }

  std::string to_text() const {
    std::ostringstream out;
    out << "forward FLOPs per context (multiply-add = " << kMultiplyAddFlops
        << ", elementwise = " << kElementwiseFlops << " per element)\n"
        << "  embedding     " << embedding << "\n"
        << "  attention     " << attention << "\n"
        << "  feed_forward  " << feed_forward << "\n"
        << "  kfm_mlps      " << kfm_mlps << "\n"
        << "  gnn           " << gnn << "\n"
        << "  memory        " << memory << "\n"
        << "forward total   " << forward_total() << "\n"
        << "training total  " << training_total() << " (x"
        << training_multiplier << ")\n";
    return out.str();
  }
};

inline double affine_flops(double rows, double d_in, double d_out) {
  return kMultiplyAddFlops * rows * d_in * d_out;
}

inline FlopsReport estimate_flops(const ModelConfig& cfg, const CorpusStats& stats) {
  stats.validate();
  const double n = static_cast<double>(stats.max_seq_len);
  const double d = static_cast<double>(cfg.transformer.hidden);
  const double d_ff = static_cast<double>(cfg.transformer.intermediate);
  const double layers = static_cast<double>(cfg.transformer.num_layers);

  FlopsReport report;
  // Token + position lookup and their sum; lookups are free, the add is one
  // elementwise pass.
  report.embedding = n * d;

  // Q, K, V, output projections plus two layer-norm passes per layer.
  report.attention = layers * (4.0 * affine_flops(n, d, d) +
                               2.0 * kElementwiseFlops * n * d);
  report.feed_forward =
      layers * (affine_flops(n, d, d_ff) + affine_flops(n, d_ff, d) +
                kElementwiseFlops * n * d_ff);

  if (cfg.uses_knowledge()) {
    // Four two-layer MLPs per KFM site; the mention count is bounded by the
    // sequence length, which this estimate uses as the upper bound.
    const double hidden = cfg.kfm.mlp_hidden == 0
                              ? d
                              : static_cast<double>(cfg.kfm.mlp_hidden);
    const double sites = static_cast<double>(cfg.transformer.kfm_locations.size());
    report.kfm_mlps = sites * 4.0 * (affine_flops(n, d, hidden) +
                                     affine_flops(n, hidden, d));
    // Memory lookups for the context nodes plus the mention-mean context
    // representations (one elementwise pass over the sequence).
    report.memory = stats.avg_nodes_per_context * d + n * d;
  }
  if (cfg.uses_graph()) {
    const double d_r = static_cast<double>(cfg.relation_dim);
    const double nodes = stats.avg_nodes_per_context;
    // Per-edge message propagation: relation projection d_r -> d, the scoring
    // map over the concatenated 4d input, the attention dot product, the node
    // update affine, and the weighted neighbor sum. The estimate is exactly
    // (per-edge cost) x (avg edges per node) x nodes per layer, so it is
    // linear in the edge count and vanishes on edge-free graphs.
    const double per_edge = affine_flops(1.0, d_r, d) +
                            affine_flops(1.0, 4.0 * d, d) +
                            affine_flops(1.0, d, d) + kMultiplyAddFlops * d + d;
    report.gnn = 2.0 * nodes * stats.avg_edges_per_node * per_edge;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Modulation-value statistics.

struct HistogramBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
};

struct MatrixHistogram {
  std::string name;  // gamma1 / beta1 / gamma2 / beta2
  std::vector<HistogramBin> bins;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t total = 0;
};

struct ModulationReport {
  std::vector<MatrixHistogram> matrices;
  bool empty = true;  // dataset contained zero mention positions
};

inline MatrixHistogram build_histogram(const std::string& name,
                                       const std::vector<double>& values,
                                       std::size_t num_bins = 20) {
  MatrixHistogram h;
  h.name = name;
  h.total = values.size();
  if (values.empty()) return h;
  double lo = values[0], hi = values[0], sum = 0.0;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  h.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - h.mean) * (v - h.mean);
  h.stddev = std::sqrt(sq / static_cast<double>(values.size()));

  if (lo == hi) {  // point mass: one bin holding everything
    h.bins.push_back({lo, hi, values.size()});
    return h;
  }
  const double width = (hi - lo) / static_cast<double>(num_bins);
  h.bins.resize(num_bins);
  for (std::size_t b = 0; b < num_bins; ++b) {
    h.bins[b].lo = lo + width * static_cast<double>(b);
    h.bins[b].hi = lo + width * static_cast<double>(b + 1);
  }
  for (double v : values) {
    std::size_t b = static_cast<std::size_t>((v - lo) / width);
    if (b >= num_bins) b = num_bins - 1;  // hi lands in the last bin
    ++h.bins[b].count;
  }
  return h;
}

// Collects the gamma/beta values the model produces at mention positions of
// every example, one histogram per modulation matrix.
inline ModulationReport modulation_histogram(
    TrainedModel& tm, const std::vector<EncodedExample>& dataset,
    std::size_t num_bins = 20) {
  if (!tm.model.config().uses_knowledge())
    throw ContractError("modulation_histogram: model has no modulation");

  std::map<std::string, std::vector<double>> values;
  for (const EncodedExample& enc : dataset) {
    ModelOutput out = tm.model.forward(enc.input, false, nullptr);
    const auto& cfg = tm.model.config();
    const std::size_t n = enc.input.token_ids.size();
    const std::size_t d = cfg.transformer.hidden;
    for (const auto& [loc, site] : tm.model.sites()) {
      ModulationParams mod = compute_modulation(out.entity_vectors,
                                                enc.input.mentions, n, site,
                                                cfg.kfm, d);
      for (const Mention& m : enc.input.mentions) {
        for (std::size_t pos = m.start; pos <= m.end; ++pos) {
          for (std::size_t c = 0; c < d; ++c) {
            values["gamma1"].push_back(mod.gamma1.at(pos, c));
            values["beta1"].push_back(mod.beta1.at(pos, c));
            values["gamma2"].push_back(mod.gamma2.at(pos, c));
            values["beta2"].push_back(mod.beta2.at(pos, c));
          }
        }
      }
    }
  }

  ModulationReport report;
  report.empty = values.empty() || values.begin()->second.empty();
  for (const char* name : {"gamma1", "beta1", "gamma2", "beta2"})
    report.matrices.push_back(build_histogram(name, values[name], num_bins));
  return report;
}

inline void write_modulation_csv(std::ostream& out, const ModulationReport& report) {
  out << "matrix,bin_lo,bin_hi,count,mean,stddev\n";
  if (report.empty) {
    out << "empty,,,,,\n";
    return;
  }
  for (const MatrixHistogram& h : report.matrices)
    for (const HistogramBin& b : h.bins)
      out << h.name << ',' << b.lo << ',' << b.hi << ',' << b.count << ','
          << h.mean << ',' << h.stddev << '\n';
}

// ---------------------------------------------------------------------------
// Unseen-entity proximity: mean cosine distance between each unseen entity's
// contextual representation (mean of its mention hidden states at the final
// layer, across the dataset) and its nearest seen entity's.

struct ProximityEntry {
  std::string entity;
  std::string nearest_seen;
  double distance = 0.0;  // cosine distance in [0, 2]
};

struct ProximityReport {
  std::vector<ProximityEntry> entries;
  double mean_distance = 0.0;
  bool empty = true;  // no unseen entities in the dataset
};

inline double cosine_distance(const std::vector<double>& a,
                              const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 1.0;  // degenerate: treat as orthogonal
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

inline ProximityReport unseen_proximity(TrainedModel& tm,
                                        const std::vector<EncodedExample>& dataset,
                                        const EntityVocabulary& vocab) {
  // Accumulate final-layer mention states per global entity id.
  std::map<std::string, std::vector<double>> sums;
  std::map<std::string, std::size_t> counts;
  const std::size_t d = tm.model.config().transformer.hidden;
  for (const EncodedExample& enc : dataset) {
    ModelOutput out = tm.model.forward(enc.input, false, nullptr);
    const Tensor& h = out.states.final();
    for (const Mention& m : enc.input.mentions) {
      const std::string& id = enc.input.entities[m.entity].id;
      auto& acc = sums[id];
      if (acc.empty()) acc.assign(d, 0.0);
      for (std::size_t pos = m.start; pos <= m.end; ++pos)
        for (std::size_t c = 0; c < d; ++c) acc[c] += h.at(pos, c);
      counts[id] += m.end - m.start + 1;
    }
  }
  std::map<std::string, std::vector<double>> reps;
  for (auto& [id, acc] : sums) {
    for (double& v : acc) v /= static_cast<double>(counts[id]);
    reps[id] = std::move(acc);
  }

  std::vector<std::string> seen, unseen;
  for (const auto& [id, rep] : reps)
    (vocab.contains(id) ? seen : unseen).push_back(id);

  ProximityReport report;
  if (unseen.empty()) return report;
  if (seen.empty())
    throw ContractError("unseen_proximity: dataset has no seen entities");
  report.empty = false;

  // Exact brute-force nearest-seen search; entity counts are desk-scale.
  for (const std::string& u : unseen) {
    ProximityEntry entry;
    entry.entity = u;
    entry.distance = std::numeric_limits<double>::infinity();
    for (const std::string& s : seen) {
      const double dist = cosine_distance(reps[u], reps[s]);
      if (dist < entry.distance) {
        entry.distance = dist;
        entry.nearest_seen = s;
      }
    }
    report.mean_distance += entry.distance;
    report.entries.push_back(entry);
  }
  report.mean_distance /= static_cast<double>(report.entries.size());
  return report;
}

inline void write_proximity_csv(std::ostream& out, const ProximityReport& report) {
  out << "entity,nearest_seen,distance\n";
  if (report.empty) {
    out << "empty,,\n";
    return;
  }
  for (const ProximityEntry& e : report.entries)
    out << e.entity << ',' << e.nearest_seen << ',' << e.distance << '\n';
  out << "mean,," << report.mean_distance << '\n';
}

}  // namespace kala
