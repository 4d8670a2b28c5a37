#include <sstream>

#include "doctest.h"
#include "kala/model.hpp"

using namespace kala;

namespace {

ModelConfig small_config(Variant variant) {
  ModelConfig cfg;
  cfg.transformer.num_layers = 2;
  cfg.transformer.hidden = 8;
  cfg.transformer.intermediate = 16;
  cfg.transformer.num_heads = 2;
  cfg.transformer.vocab_size = 12;
  cfg.transformer.max_seq_len = 16;
  cfg.transformer.dropout = 0.1;
  cfg.transformer.kfm_locations = {2};
  cfg.variant = variant;
  cfg.num_entities = 5;
  cfg.num_relations = 2;
  cfg.relation_dim = 4;
  return cfg;
}

ModelInput small_input() {
  ModelInput in;
  in.token_ids = {1, 2, 3, 4, 5, 6};
  in.entities = {{"E1", 1}, {"E2", 2}, {"", 0}};
  in.mentions = {{0, 1, 2}, {1, 4, 4}};
  in.facts = {{0, 0, 1}, {1, 1, 2}};
  return in;
}

}  // namespace

TEST_CASE("variants construct with only the modules they need") {
  Rng rng(7);
  KalaModel ft(small_config(Variant::kFineTune), rng);
  CHECK_FALSE(ft.memory().table.defined());

  Rng rng2(7);
  KalaModel pw(small_config(Variant::kPointwise), rng2);
  CHECK(pw.memory().table.rows() == 6);  // null row + 5 entities
  CHECK_FALSE(pw.relations().embeddings.defined());

  Rng rng3(7);
  KalaModel rel(small_config(Variant::kRelational), rng3);
  CHECK(rel.relations().embeddings.rows() == 2 * 2 + 1);  // fwd, rev, self
}

TEST_CASE("config validation rejects inconsistent knowledge settings") {
  Rng rng(1);
  ModelConfig cfg = small_config(Variant::kRelational);
  cfg.transformer.kfm_locations.clear();
  CHECK_THROWS_AS(KalaModel(cfg, rng), ConfigError);

  cfg = small_config(Variant::kRelational);
  cfg.kfm.use_gamma1 = cfg.kfm.use_beta1 = false;
  cfg.kfm.use_gamma2 = cfg.kfm.use_beta2 = false;
  CHECK_THROWS_AS(KalaModel(cfg, rng), ConfigError);

  cfg = small_config(Variant::kRelational);
  cfg.num_relations = 0;
  CHECK_THROWS_AS(KalaModel(cfg, rng), ConfigError);
}

TEST_CASE("forward produces one hidden state per layer plus embeddings") {
  Rng rng(11);
  KalaModel model(small_config(Variant::kRelational), rng);
  ModelOutput out = model.forward(small_input());
  REQUIRE(out.states.layers.size() == 3);
  for (const Tensor& h : out.states.layers) {
    CHECK(h.rows() == 6);
    CHECK(h.cols() == 8);
  }
  REQUIRE(out.entity_vectors.size() == 3);
  CHECK(out.entity_vectors[0].has_value());
  CHECK(out.entity_vectors[1].has_value());
}

TEST_CASE("forward validates its input") {
  Rng rng(11);
  KalaModel model(small_config(Variant::kFineTune), rng);
  ModelInput in = small_input();
  in.token_ids.clear();
  CHECK_THROWS_AS(model.forward(in), ContractError);

  in = small_input();
  in.token_ids[0] = 99;
  CHECK_THROWS_AS(model.forward(in), ContractError);

  in = small_input();
  in.mentions[0].entity = 9;
  CHECK_THROWS_AS(model.forward(in), AnnotationError);

  in = small_input();
  CHECK_THROWS_AS(model.forward(in, true, nullptr), ContractError);
}

TEST_CASE("zeroed modulation MLP outputs reproduce the plain encoder exactly") {
  // The h-MLP final layers are zero-initialized, so an untrained knowledge
  // model must match the plain variant bit for bit when the shared encoder
  // weights agree.
  ModelConfig rel_cfg = small_config(Variant::kRelational);
  ModelConfig ft_cfg = small_config(Variant::kFineTune);
  Rng rng_a(123);
  KalaModel rel(rel_cfg, rng_a);
  Rng rng_b(123);
  KalaModel ft(ft_cfg, rng_b);

  // Both models draw encoder weights first from identical streams.
  ModelInput in = small_input();
  ModelOutput out_rel = rel.forward(in);
  ModelOutput out_ft = ft.forward(in);
  const auto& a = out_rel.states.final().data();
  const auto& b = out_ft.states.final().data();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("pointwise null entities get no vector") {
  Rng rng(5);
  KalaModel model(small_config(Variant::kPointwise), rng);
  ModelOutput out = model.forward(small_input());
  REQUIRE(out.entity_vectors.size() == 3);
  CHECK(out.entity_vectors[0].has_value());
  CHECK_FALSE(out.entity_vectors[2].has_value());
}

TEST_CASE("retrieval recomputation flag changes entity vectors across sites") {
  ModelConfig cfg = small_config(Variant::kRelational);
  cfg.transformer.kfm_locations = {1, 2};
  Rng rng(31);
  KalaModel shared(cfg, rng);
  ModelOutput a = shared.forward(small_input());

  cfg.recompute_retrieval_per_layer = true;
  Rng rng2(31);
  KalaModel recompute(cfg, rng2);
  ModelOutput b = recompute.forward(small_input());

  // Same weights, but the recomputed run conditions layer-2 retrieval on
  // layer-1 output instead of the first site's input, so the final entity
  // vectors differ even though identity modulation keeps the states equal.
  REQUIRE(a.entity_vectors[0].has_value());
  REQUIRE(b.entity_vectors[0].has_value());
  CHECK(a.states.final().data() == b.states.final().data());
  CHECK(a.entity_vectors[0]->data() != b.entity_vectors[0]->data());

  // With a nonzero modulation MLP the recomputation reaches the output too.
  Rng bump(4);
  shared.sites().at(2).h2.w2.data() = Tensor::randn(8, 8, bump, 0.3).data();
  recompute.sites().at(2).h2.w2.data() =
      shared.sites().at(2).h2.w2.data();
  ModelOutput a2 = shared.forward(small_input());
  ModelOutput b2 = recompute.forward(small_input());
  CHECK(a2.states.final().data() != b2.states.final().data());
}

TEST_CASE("forward in training mode is deterministic given the dropout rng seed") {
  ModelConfig cfg = small_config(Variant::kRelational);
  Rng rng(41);
  KalaModel model(cfg, rng);
  Rng d1(9), d2(9), d3(10);
  ComputationTape tape;
  Tensor h1, h2, h3;
  {
    TapeScope scope(tape);
    h1 = model.forward(small_input(), true, &d1).states.final();
    h2 = model.forward(small_input(), true, &d2).states.final();
    h3 = model.forward(small_input(), true, &d3).states.final();
  }
  CHECK(h1.data() == h2.data());
  CHECK(h1.data() != h3.data());
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  ModelConfig cfg = small_config(Variant::kRelational);
  Rng rng(55);
  KalaModel model(cfg, rng);
  std::vector<std::pair<std::string, Tensor>> params;
  model.collect(params);

  std::ostringstream out;
  save_checkpoint(out, model_config_to_json(cfg).dump(), params);

  Rng rng2(777);  // different init, then restored from the checkpoint
  KalaModel other(cfg, rng2);
  std::vector<std::pair<std::string, Tensor>> other_params;
  other.collect(other_params);

  std::istringstream in(out.str());
  CheckpointData data = read_checkpoint(in);
  ModelConfig restored_cfg = model_config_from_json(nlohmann::json::parse(data.config_json));
  CHECK(restored_cfg.num_entities == cfg.num_entities);
  load_checkpoint_into(data, other_params);

  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].first == other_params[i].first);
    CHECK(params[i].second.data() == other_params[i].second.data());
  }

  ModelOutput a = model.forward(small_input());
  ModelOutput b = other.forward(small_input());
  CHECK(a.states.final().data() == b.states.final().data());
}

TEST_CASE("checkpoint loading rejects name and shape mismatches") {
  ModelConfig cfg = small_config(Variant::kPointwise);
  Rng rng(3);
  KalaModel model(cfg, rng);
  std::vector<std::pair<std::string, Tensor>> params;
  model.collect(params);

  std::ostringstream out;
  save_checkpoint(out, "{}", params);
  const std::string blob = out.str();

  {
    std::istringstream in(blob);
    CheckpointData data = read_checkpoint(in);
    auto renamed = params;
    renamed[0].first = "something.else";
    CHECK_THROWS_AS(load_checkpoint_into(data, renamed), IoError);
  }
  {
    std::istringstream in(blob);
    CheckpointData data = read_checkpoint(in);
    auto reshaped = params;
    reshaped[1].second = Tensor::zeros(1, 1);
    CHECK_THROWS_AS(load_checkpoint_into(data, reshaped), IoError);
  }
  {
    std::istringstream in(std::string("NOTACKPT") + blob.substr(8));
    CHECK_THROWS_AS(read_checkpoint(in), IoError);
  }
  {
    std::istringstream in(blob.substr(0, blob.size() / 2));
    CHECK_THROWS_AS(read_checkpoint(in), IoError);
  }
}

TEST_CASE("model config JSON round-trips every field") {
  ModelConfig cfg = small_config(Variant::kRelational);
  cfg.recompute_retrieval_per_layer = true;
  cfg.kfm.use_beta2 = false;
  cfg.kfm.mlp_hidden = 3;
  ModelConfig back = model_config_from_json(model_config_to_json(cfg));
  CHECK(back.variant == cfg.variant);
  CHECK(back.transformer.num_layers == cfg.transformer.num_layers);
  CHECK(back.transformer.hidden == cfg.transformer.hidden);
  CHECK(back.transformer.kfm_locations == cfg.transformer.kfm_locations);
  CHECK(back.kfm.use_beta2 == cfg.kfm.use_beta2);
  CHECK(back.kfm.mlp_hidden == cfg.kfm.mlp_hidden);
  CHECK(back.num_entities == cfg.num_entities);
  CHECK(back.num_relations == cfg.num_relations);
  CHECK(back.relation_dim == cfg.relation_dim);
  CHECK(back.recompute_retrieval_per_layer == cfg.recompute_retrieval_per_layer);
}
