#pragma once

// End-to-end model: transformer encoder plus (per variant) entity memory,
// relation table, two GNN layers, and one KFM site per configured location.
// The relational variant computes context representations from the hidden
// states feeding the first KFM layer; all KFM sites share that retrieval
// unless per-layer recomputation is switched on.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kala/error.hpp"
#include "kala/kfm.hpp"
#include "kala/knowledge.hpp"
#include "kala/rng.hpp"
#include "kala/transformer.hpp"

namespace kala {

enum class Variant { kFineTune, kPointwise, kRelational };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFineTune: return "fine-tune";
    case Variant::kPointwise: return "kala-pointwise";
    case Variant::kRelational: return "kala-relational";
  }
  throw ConfigError("unknown variant");
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "fine-tune") return Variant::kFineTune;
  if (name == "kala-pointwise") return Variant::kPointwise;
  if (name == "kala-relational") return Variant::kRelational;
  throw ConfigError("unknown variant '" + name + "'");
}

struct ModelConfig {
  TransformerConfig transformer;
  KfmConfig kfm;
  Variant variant = Variant::kRelational;
  std::size_t num_entities = 0;   // |E_train|, memory adds the null row
  std::size_t num_relations = 1;
  std::size_t relation_dim = 16;  // d_r, projected to d
  bool recompute_retrieval_per_layer = false;

  bool uses_knowledge() const { return variant != Variant::kFineTune; }
  bool uses_graph() const { return variant == Variant::kRelational; }

  void validate() const {
    transformer.validate();
    if (uses_knowledge()) {
      if (transformer.kfm_locations.empty())
        throw ConfigError("knowledge variants need at least one KFM location");
      if (!kfm.any_enabled())
        throw ConfigError("knowledge variants need at least one KFM flag");
    }
    if (uses_graph() && num_relations == 0)
      throw ConfigError("relational variant needs at least one relation");
  }
};

// One example as the model consumes it: encoded token ids (question tokens
// first for span tasks), mentions in full-sequence coordinates, the local
// entity list, and the context facts over local indices.
struct ModelInput {
  std::vector<std::size_t> token_ids;
  std::vector<LocalEntity> entities;
  std::vector<Mention> mentions;
  std::vector<std::array<std::size_t, 3>> facts;
};

struct ModelOutput {
  HiddenStates states;
  std::vector<std::optional<Tensor>> entity_vectors;  // empty for fine-tune
};

class KalaModel {
 public:
  KalaModel() = default;

  KalaModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    encoder_ = TransformerEncoder(cfg.transformer, rng);
    if (cfg_.uses_knowledge()) {
      memory_ = EntityMemory(cfg.num_entities, cfg.transformer.hidden, rng);
      const std::size_t hidden =
          cfg.kfm.mlp_hidden == 0 ? cfg.transformer.hidden : cfg.kfm.mlp_hidden;
      for (std::size_t loc : cfg.transformer.kfm_locations)
        sites_[loc].init(cfg.transformer.hidden, hidden, rng);
    }
    if (cfg_.uses_graph()) {
      relations_ = RelationTable(cfg.num_relations, cfg.relation_dim,
                                 cfg.transformer.hidden, rng);
      gnn_[0].init(cfg.transformer.hidden, rng);
      gnn_[1].init(cfg.transformer.hidden, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  TransformerEncoder& encoder() { return encoder_; }
  EntityMemory& memory() { return memory_; }
  RelationTable& relations() { return relations_; }
  std::array<GnnLayer, 2>& gnn() { return gnn_; }
  std::map<std::size_t, KfmSite>& sites() { return sites_; }

  ModelOutput forward(const ModelInput& input, bool training = false,
                      Rng* drop_rng = nullptr) const {
    const std::size_t n = input.token_ids.size();
    const std::size_t d = cfg_.transformer.hidden;
    if (n == 0) throw ContractError("forward: empty token sequence");
    if (n > cfg_.transformer.max_seq_len)
      throw ContractError("forward: sequence too long");
    for (std::size_t t : input.token_ids)
      if (t >= cfg_.transformer.vocab_size)
        throw ContractError("forward: token id out of vocab");
    if (training && drop_rng == nullptr)
      throw ContractError("forward: training mode needs a dropout rng");
    validate_mentions(input.mentions, n);
    for (const Mention& m : input.mentions)
      if (m.entity >= input.entities.size())
        throw AnnotationError("forward: mention references unknown local entity");

    const double p = cfg_.transformer.dropout;
    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;

    ModelOutput out;
    Tensor h = add(gather_rows(encoder_.token_embedding(), input.token_ids),
                   gather_rows(encoder_.position_embedding(), positions));
    if (training) h = dropout(h, p, *drop_rng, true);
    out.states.layers.push_back(h);

    const std::size_t first_site = cfg_.transformer.kfm_locations.empty()
                                       ? 0
                                       : *cfg_.transformer.kfm_locations.begin();
    std::map<std::size_t, ModulationParams> modulation;

    for (std::size_t l = 1; l <= cfg_.transformer.num_layers; ++l) {
      const EncoderLayer& L = encoder_.layers()[l - 1];
      const bool is_site =
          cfg_.uses_knowledge() && cfg_.transformer.kfm_locations.contains(l);

      if (is_site && (l == first_site || cfg_.recompute_retrieval_per_layer)) {
        // h here is H^{l-1}, the states feeding this block.
        out.entity_vectors = retrieve(input, h, training, drop_rng);
        if (l == first_site && !cfg_.recompute_retrieval_per_layer) {
          for (std::size_t loc : cfg_.transformer.kfm_locations)
            modulation[loc] = compute_modulation(out.entity_vectors, input.mentions,
                                                 n, sites_.at(loc), cfg_.kfm, d);
        }
      }
      if (is_site && cfg_.recompute_retrieval_per_layer)
        modulation[l] = compute_modulation(out.entity_vectors, input.mentions, n,
                                           sites_.at(l), cfg_.kfm, d);

      const ModulationParams* mod = nullptr;
      if (is_site) mod = &modulation.at(l);

      Tensor attn = encoder_.attention_block(h, l - 1);
      if (training) attn = dropout(attn, p, *drop_rng, true);
      Tensor h_hat = layer_norm(add(h, attn), L.ln1_gain, L.ln1_bias);
      if (mod != nullptr) h_hat = apply_modulation(h_hat, mod->gamma1, mod->beta1);

      Tensor ff = encoder_.feed_forward_block(h_hat, l - 1);
      if (training) ff = dropout(ff, p, *drop_rng, true);
      Tensor h_out = layer_norm(add(h_hat, ff), L.ln2_gain, L.ln2_bias);
      if (mod != nullptr) h_out = apply_modulation(h_out, mod->gamma2, mod->beta2);

      out.states.layers.push_back(h_out);
      h = h_out;
    }
    return out;
  }

  // Mean mention hidden state per local entity from the given layer input;
  // zero for graph-only entities that never surface in the text. The first
  // mention defines the context representation of a multi-mention entity.
  std::vector<Tensor> context_representations(const ModelInput& input,
                                              const Tensor& h) const {
    std::vector<Tensor> reps(input.entities.size());
    for (const Mention& m : input.mentions) {
      if (reps[m.entity].defined()) continue;  // first mention wins
      reps[m.entity] = mean_rows(h, m.start, m.end + 1);
    }
    for (auto& r : reps)
      if (!r.defined()) r = Tensor::zeros(1, cfg_.transformer.hidden);
    return reps;
  }

  void collect(std::vector<std::pair<std::string, Tensor>>& out) const {
    encoder_.collect(out);
    if (cfg_.uses_knowledge()) {
      out.emplace_back("memory.table", memory_.table);
      for (const auto& [loc, site] : sites_)
        site.collect("kfm.site" + std::to_string(loc), out);
    }
    if (cfg_.uses_graph()) {
      out.emplace_back("relations.embeddings", relations_.embeddings);
      out.emplace_back("relations.projection", relations_.projection);
      gnn_[0].collect("gnn.layer0", out);
      gnn_[1].collect("gnn.layer1", out);
    }
  }

 private:
  std::vector<std::optional<Tensor>> retrieve(const ModelInput& input,
                                              const Tensor& h, bool training,
                                              Rng* drop_rng) const {
    std::vector<std::optional<Tensor>> vecs(input.entities.size());
    if (cfg_.variant == Variant::kPointwise) {
      for (std::size_t i = 0; i < input.entities.size(); ++i)
        if (!input.entities[i].is_null())
          vecs[i] = pointwise_retrieve(input.entities[i].memory_row, memory_);
      return vecs;
    }
    auto graph = KnowledgeGraphView::build(input.entities, input.facts, relations_);
    RetrievalOptions opts;
    opts.training = training;
    opts.dropout = cfg_.transformer.dropout;
    opts.rng = drop_rng;
    return relational_retrieve_all(graph, memory_, relations_, gnn_,
                                   context_representations(input, h), opts);
  }

  ModelConfig cfg_;
  TransformerEncoder encoder_;
  EntityMemory memory_;
  RelationTable relations_;
  std::array<GnnLayer, 2> gnn_;
  std::map<std::size_t, KfmSite> sites_;
};

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary, bit-exact round-trip. Layout: magic,
// version, length-prefixed config JSON, then named tensors as raw doubles.

namespace detail_ckpt {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IoError("checkpoint truncated");
  return s;
}

}  // namespace detail_ckpt

constexpr char kCheckpointMagic[8] = {'K', 'A', 'L', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& out, const std::string& config_json,
                            const std::vector<std::pair<std::string, Tensor>>& params) {
  out.write(kCheckpointMagic, 8);
  detail_ckpt::put_u64(out, kCheckpointVersion);
  detail_ckpt::put_string(out, config_json);
  detail_ckpt::put_u64(out, params.size());
  for (const auto& [name, t] : params) {
    detail_ckpt::put_string(out, name);
    detail_ckpt::put_u64(out, t.rows());
    detail_ckpt::put_u64(out, t.cols());
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw IoError("checkpoint write failed");
}

struct CheckpointData {
  std::string config_json;
  std::vector<std::pair<std::string, std::vector<double>>> tensors;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
};

inline CheckpointData read_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw IoError("not a checkpoint file");
  const std::uint64_t version = detail_ckpt::get_u64(in);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  data.config_json = detail_ckpt::get_string(in);
  const std::uint64_t count = detail_ckpt::get_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail_ckpt::get_string(in);
    const std::uint64_t rows = detail_ckpt::get_u64(in);
    const std::uint64_t cols = detail_ckpt::get_u64(in);
    std::vector<double> values(rows * cols);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw IoError("checkpoint truncated");
    data.tensors.emplace_back(std::move(name), std::move(values));
    data.shapes.emplace_back(rows, cols);
  }
  return data;
}

// Loads values into an existing parameter registry; names and shapes must
// match exactly.
inline void load_checkpoint_into(const CheckpointData& data,
                                 std::vector<std::pair<std::string, Tensor>>& params) {
  if (data.tensors.size() != params.size())
    throw IoError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (data.tensors[i].first != name)
      throw IoError("checkpoint parameter name mismatch: expected " + name +
                    ", found " + data.tensors[i].first);
    if (data.shapes[i] != std::pair<std::size_t, std::size_t>{t.rows(), t.cols()})
      throw IoError("checkpoint shape mismatch for " + name);
    t.data() = data.tensors[i].second;
  }
}

// Model config <-> JSON for checkpoint headers and the run config file.
inline nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["variant"] = variant_name(cfg.variant);
  j["num_layers"] = cfg.transformer.num_layers;
  j["hidden"] = cfg.transformer.hidden;
  j["intermediate"] = cfg.transformer.intermediate;
  j["num_heads"] = cfg.transformer.num_heads;
  j["vocab_size"] = cfg.transformer.vocab_size;
  j["max_seq_len"] = cfg.transformer.max_seq_len;
  j["dropout"] = cfg.transformer.dropout;
  j["kfm_locations"] = std::vector<std::size_t>(cfg.transformer.kfm_locations.begin(),
                                                cfg.transformer.kfm_locations.end());
  j["use_gamma1"] = cfg.kfm.use_gamma1;
  j["use_beta1"] = cfg.kfm.use_beta1;
  j["use_gamma2"] = cfg.kfm.use_gamma2;
  j["use_beta2"] = cfg.kfm.use_beta2;
  j["mlp_hidden"] = cfg.kfm.mlp_hidden;
  j["num_entities"] = cfg.num_entities;
  j["num_relations"] = cfg.num_relations;
  j["relation_dim"] = cfg.relation_dim;
  j["recompute_retrieval_per_layer"] = cfg.recompute_retrieval_per_layer;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.variant = variant_from_name(j.at("variant").get<std::string>());
  cfg.transformer.num_layers = j.at("num_layers").get<std::size_t>();
  cfg.transformer.hidden = j.at("hidden").get<std::size_t>();
  cfg.transformer.intermediate = j.at("intermediate").get<std::size_t>();
  cfg.transformer.num_heads = j.at("num_heads").get<std::size_t>();
  cfg.transformer.vocab_size = j.at("vocab_size").get<std::size_t>();
  cfg.transformer.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  cfg.transformer.dropout = j.at("dropout").get<double>();
  for (const auto& l : j.at("kfm_locations"))
    cfg.transformer.kfm_locations.insert(l.get<std::size_t>());
  cfg.kfm.use_gamma1 = j.at("use_gamma1").get<bool>();
  cfg.kfm.use_beta1 = j.at("use_beta1").get<bool>();
  cfg.kfm.use_gamma2 = j.at("use_gamma2").get<bool>();
  cfg.kfm.use_beta2 = j.at("use_beta2").get<bool>();
  cfg.kfm.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  cfg.num_entities = j.at("num_entities").get<std::size_t>();
  cfg.num_relations = j.at("num_relations").get<std::size_t>();
  cfg.relation_dim = j.at("relation_dim").get<std::size_t>();
  cfg.recompute_retrieval_per_layer = j.at("recompute_retrieval_per_layer").get<bool>();
  return cfg;
}

}  // namespace kala
