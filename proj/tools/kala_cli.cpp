// Command-line entry point binding corpus generation, training, evaluation,
// FLOPs estimation, analyses, and gradient checks. One JSON config file
// drives every command; dotted-key --set overrides make sweeps scriptable.
//
// Exit codes: 0 success, 1 usage/config error, 2 failed check, 3 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kala/analysis.hpp"
#include "kala/generator.hpp"
#include "kala/model.hpp"
#include "kala/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kala;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitCheckFailed = 2;
constexpr int kExitRuntime = 3;

// ---------------------------------------------------------------------------
// Config loading with dotted-key overrides ("train.epochs=3").

void apply_override(json& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value: " + spec);
  const std::string path = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);

  json* node = &cfg;
  std::size_t pos = 0;
  while (true) {
    const auto dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot - pos);
    if (key.empty()) throw ConfigError("empty key segment in override: " + spec);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

json load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  for (const std::string& o : overrides) apply_override(cfg, o);
  if (!cfg.contains("seed")) throw ConfigError("config requires a seed");
  return cfg;
}

std::string output_dir(const json& cfg) {
  if (const char* env = std::getenv("KALA_OUTPUT_DIR"); env != nullptr && *env)
    return env;
  if (!cfg.contains("output_dir"))
    throw ConfigError("config requires output_dir (or KALA_OUTPUT_DIR)");
  return cfg.at("output_dir").get<std::string>();
}

std::string corpus_dir(const json& cfg) {
  if (!cfg.contains("corpus_dir")) throw ConfigError("config requires corpus_dir");
  return cfg.at("corpus_dir").get<std::string>();
}

// One writer per output directory.
class LockFile {
 public:
  explicit LockFile(const fs::path& dir) : path_(dir / ".kala.lock") {
    fs::create_directories(dir);
    if (fs::exists(path_))
      throw IoError("output directory is locked by another run: " +
                    path_.string());
    std::ofstream out(path_);
    out << "pid unknown\n";
  }
  ~LockFile() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Config sections -> module configs.

GeneratorConfig generator_config(const json& cfg) {
  GeneratorConfig gc;
  if (!cfg.contains("generator")) return gc;
  const json& g = cfg.at("generator");
  auto get = [&](const char* key, auto& field) {
    if (g.contains(key)) field = g.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_types", gc.num_types);
  get("num_entities", gc.num_entities);
  get("num_unseen", gc.num_unseen);
  get("num_relations", gc.num_relations);
  get("entities_per_context", gc.entities_per_context);
  get("train_contexts", gc.train_contexts);
  get("val_contexts", gc.val_contexts);
  get("test_contexts", gc.test_contexts);
  get("unseen_fraction", gc.unseen_fraction);
  get("power_law_alpha", gc.power_law_alpha);
  get("surface_pool", gc.surface_pool);
  get("extra_fact_prob", gc.extra_fact_prob);
  if (g.contains("task") && g.at("task").get<std::string>() == "tagging")
    gc.kind = TaskKind::kTagging;
  return gc;
}

ModelConfig model_config(const json& cfg, std::size_t vocab_size,
                         std::size_t num_entities, std::size_t num_relations,
                         std::size_t max_seq_len, const std::string& variant) {
  ModelConfig mc;
  mc.variant = variant_from_name(variant);
  mc.transformer.vocab_size = vocab_size;
  mc.transformer.max_seq_len = max_seq_len;
  mc.num_entities = num_entities;
  mc.num_relations = std::max<std::size_t>(num_relations, 1);
  if (cfg.contains("model")) {
    const json& m = cfg.at("model");
    auto get = [&](const char* key, auto& field) {
      if (m.contains(key)) field = m.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("num_layers", mc.transformer.num_layers);
    get("hidden", mc.transformer.hidden);
    get("intermediate", mc.transformer.intermediate);
    get("num_heads", mc.transformer.num_heads);
    get("dropout", mc.transformer.dropout);
    get("mlp_hidden", mc.kfm.mlp_hidden);
    get("use_gamma1", mc.kfm.use_gamma1);
    get("use_beta1", mc.kfm.use_beta1);
    get("use_gamma2", mc.kfm.use_gamma2);
    get("use_beta2", mc.kfm.use_beta2);
    get("relation_dim", mc.relation_dim);
    get("recompute_retrieval_per_layer", mc.recompute_retrieval_per_layer);
    if (m.contains("kfm_locations")) {
      mc.transformer.kfm_locations.clear();
      for (const auto& l : m.at("kfm_locations"))
        mc.transformer.kfm_locations.insert(l.get<std::size_t>());
    }
  }
  if (mc.transformer.kfm_locations.empty())
    mc.transformer.kfm_locations.insert(mc.transformer.num_layers);
  return mc;
}

TrainConfig train_config(const json& cfg) {
  TrainConfig tc;
  tc.seed = cfg.at("seed").get<std::uint64_t>();
  if (!cfg.contains("train")) return tc;
  const json& t = cfg.at("train");
  auto get = [&](const char* key, auto& field) {
    if (t.contains(key)) field = t.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("epochs", tc.epochs);
  get("batch_size", tc.batch_size);
  get("learning_rate", tc.learning_rate);
  get("weight_decay", tc.weight_decay);
  get("warmup_fraction", tc.warmup_fraction);
  get("num_tags", tc.num_tags);
  get("separate_knowledge_optimizer", tc.separate_knowledge_optimizer);
  return tc;
}

// ---------------------------------------------------------------------------
// Shared data plumbing.

struct LoadedCorpus {
  GeneratedCorpus corpus;
  TokenVocabulary tokens;
  EntityVocabulary entities;
  std::vector<EncodedExample> train, val, test;
  SeenUnseenSplit test_split;
  TaskKind kind = TaskKind::kSpan;
  std::size_t max_seq_len = 0;
};

LoadedCorpus load_and_encode(const json& cfg) {
  LoadedCorpus lc;
  lc.corpus = load_corpus_files(corpus_dir(cfg));
  lc.tokens = build_token_vocab(lc.corpus.train);
  std::size_t min_freq = 0;
  if (cfg.contains("memory_min_frequency"))
    min_freq = cfg.at("memory_min_frequency").get<std::size_t>();
  lc.entities = prune_entity_vocab(build_entity_vocab(lc.corpus.train), min_freq);
  lc.kind = lc.corpus.train.empty() ? TaskKind::kSpan : lc.corpus.train[0].kind;

  auto encode_split = [&](const std::vector<TaskExample>& split,
                          std::vector<EncodedExample>& out) {
    for (const TaskExample& ex : split) {
      out.push_back(encode_example(ex, lc.tokens, lc.entities));
      lc.max_seq_len = std::max(lc.max_seq_len, out.back().input.token_ids.size());
    }
  };
  encode_split(lc.corpus.train, lc.train);
  encode_split(lc.corpus.val, lc.val);
  encode_split(lc.corpus.test, lc.test);
  lc.test_split = split_seen_unseen(lc.corpus.test, lc.entities);
  return lc;
}

std::size_t num_tags_for(const LoadedCorpus& lc, const TrainConfig& tc) {
  if (tc.num_tags > 0) return tc.num_tags;
  std::size_t max_tag = 0;
  for (const TaskExample& ex : lc.corpus.train)
    for (std::size_t t : ex.tags) max_tag = std::max(max_tag, t);
  return max_tag + 1;
}

CorpusStats corpus_stats(const LoadedCorpus& lc) {
  CorpusStats stats;
  stats.memory_size = lc.entities.memory_size();
  std::size_t nodes = 0, facts = 0, examples = 0;
  auto tally = [&](const std::vector<TaskExample>& split) {
    for (const TaskExample& ex : split) {
      nodes += ex.entity_ids.size();
      facts += ex.facts.size();
      ++examples;
    }
  };
  tally(lc.corpus.train);
  tally(lc.corpus.val);
  tally(lc.corpus.test);
  if (examples > 0)
    stats.avg_nodes_per_context = static_cast<double>(nodes) / examples;
  if (nodes > 0) stats.avg_edges_per_node = static_cast<double>(facts) / nodes;
  stats.max_seq_len = lc.max_seq_len;
  return stats;
}

std::string checkpoint_path(const fs::path& dir, const std::string& variant) {
  return (dir / (variant + ".ckpt")).string();
}

void save_vocab_files(const fs::path& dir, const LoadedCorpus& lc) {
  std::ofstream ents(dir / "entities.txt");
  for (const std::string& id : lc.entities.ids) ents << id << '\n';
  std::ofstream toks(dir / "tokens.txt");
  for (const std::string& t : lc.tokens.tokens) toks << t << '\n';
}

TrainedModel load_trained(const std::string& ckpt_path, TaskKind kind,
                          std::size_t num_tags) {
  std::ifstream in(ckpt_path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + ckpt_path);
  CheckpointData data = read_checkpoint(in);
  ModelConfig mc = model_config_from_json(json::parse(data.config_json));
  Rng rng(0);
  TrainedModel tm;
  tm.kind = kind;
  tm.model = KalaModel(mc, rng);
  if (kind == TaskKind::kSpan)
    tm.span_head.init(mc.transformer.hidden, rng);
  else
    tm.tag_head.init(mc.transformer.hidden, num_tags, rng);
  auto params = tm.parameters();
  load_checkpoint_into(data, params);
  return tm;
}

void print_eval(const std::string& label, const EvalResult& res) {
  std::ostringstream out;
  out << label << ": EM=" << std::fixed << std::setprecision(3) << res.em
      << " F1=" << res.f1 << " (n=" << res.count << ")";
  out << " seen_F1=";
  if (res.seen_f1)
    out << std::setprecision(3) << *res.seen_f1;
  else
    out << "empty";
  out << " unseen_F1=";
  if (res.unseen_f1)
    out << std::setprecision(3) << *res.unseen_f1;
  else
    out << "empty";
  std::cout << out.str() << '\n';
}

json eval_to_json(const EvalResult& res) {
  json j;
  j["em"] = res.em;
  j["f1"] = res.f1;
  j["count"] = res.count;
  j["seen_f1"] = res.seen_f1 ? json(*res.seen_f1) : json(nullptr);
  j["unseen_f1"] = res.unseen_f1 ? json(*res.unseen_f1) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_generate(const json& cfg) {
  GeneratorConfig gc = generator_config(cfg);
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  GeneratedCorpus corpus = generate_synthetic_corpus(gc, seed);
  const std::string dir = corpus_dir(cfg);
  fs::create_directories(dir);
  write_corpus_files(dir, corpus, seed);

  EntityVocabulary vocab = build_entity_vocab(corpus.train);
  SeenUnseenSplit split = split_seen_unseen(corpus.test, vocab);
  std::cout << "generated corpus in " << dir << '\n'
            << "  train/val/test contexts: " << corpus.train.size() << '/'
            << corpus.val.size() << '/' << corpus.test.size() << '\n'
            << "  entity records: " << corpus.entities.size()
            << ", fact records: " << corpus.facts.size() << '\n'
            << "  training entity vocabulary: " << vocab.ids.size() << '\n'
            << "  unseen test contexts: " << split.unseen.size() << " (expected ~"
            << static_cast<std::size_t>(gc.unseen_fraction *
                                        static_cast<double>(gc.test_contexts))
            << ")\n";
  return kExitOk;
}

int cmd_train(const json& cfg) {
  LoadedCorpus lc = load_and_encode(cfg);
  TrainConfig tc = train_config(cfg);
  const std::size_t tags = num_tags_for(lc, tc);
  const fs::path out_dir = output_dir(cfg);
  LockFile lock(out_dir);
  save_vocab_files(out_dir, lc);

  std::vector<std::string> variants;
  if (cfg.contains("variants"))
    for (const auto& v : cfg.at("variants")) variants.push_back(v.get<std::string>());
  else if (cfg.contains("model") && cfg.at("model").contains("variant"))
    variants.push_back(cfg.at("model").at("variant").get<std::string>());
  else
    variants.push_back("kala-relational");

  std::ostringstream table;
  table << "variant\tbest_val_f1\ttest_em\ttest_f1\tseen_f1\tunseen_f1\n";
  for (const std::string& variant : variants) {
    ModelConfig mc = model_config(cfg, lc.tokens.size(), lc.entities.ids.size(),
                                  lc.corpus.relations.size(), lc.max_seq_len,
                                  variant);
    TrainOutput run = train(mc, tc, lc.train, lc.val, lc.kind, tags);
    EvalResult test = evaluate_examples(run.trained, lc.test, &lc.test_split);

    auto params = run.trained.parameters();
    std::ofstream ckpt(checkpoint_path(out_dir, variant), std::ios::binary);
    save_checkpoint(ckpt, model_config_to_json(mc).dump(), params);

    std::ofstream log(out_dir / (variant + ".metrics.jsonl"));
    for (const EpochMetrics& m : run.log) {
      json j;
      j["epoch"] = m.epoch;
      j["train_loss"] = m.train_loss;
      j["val_em"] = m.val_em;
      j["val_f1"] = m.val_f1;
      log << j.dump() << '\n';
    }

    auto opt_str = [](const std::optional<double>& v) {
      return v ? std::to_string(*v) : std::string("empty");
    };
    table << variant << '\t' << run.best_val_f1 << '\t' << test.em << '\t'
          << test.f1 << '\t' << opt_str(test.seen_f1) << '\t'
          << opt_str(test.unseen_f1) << '\n';
    print_eval("trained " + variant + " test", test);
  }

  std::ofstream cmp(out_dir / "comparison.tsv");
  cmp << table.str();
  std::cout << "wrote " << (out_dir / "comparison.tsv").string() << '\n';
  return kExitOk;
}

int cmd_eval(const json& cfg, const std::string& variant) {
  LoadedCorpus lc = load_and_encode(cfg);
  TrainConfig tc = train_config(cfg);
  const fs::path out_dir = output_dir(cfg);
  TrainedModel tm = load_trained(checkpoint_path(out_dir, variant), lc.kind,
                                 num_tags_for(lc, tc));
  EvalResult test = evaluate_examples(tm, lc.test, &lc.test_split);
  print_eval(variant + " test", test);
  std::ofstream out(out_dir / (variant + ".eval.json"));
  out << eval_to_json(test).dump(2) << '\n';
  return kExitOk;
}

int cmd_flops(const json& cfg) {
  LoadedCorpus lc = load_and_encode(cfg);
  CorpusStats stats = corpus_stats(lc);
  std::ostringstream text;
  double base = 0.0;
  for (const char* variant : {"fine-tune", "kala-pointwise", "kala-relational"}) {
    ModelConfig mc = model_config(cfg, lc.tokens.size(), lc.entities.ids.size(),
                                  lc.corpus.relations.size(), lc.max_seq_len,
                                  variant);
    FlopsReport report = estimate_flops(mc, stats);
    if (std::string(variant) == "fine-tune") base = report.training_total();
    text << "== " << variant << " ==\n"
         << report.to_text() << "ratio_to_fine_tune "
         << report.training_total() / base << "\n\n";
  }
  std::cout << text.str();
  const fs::path out_dir = output_dir(cfg);
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "flops.txt");
  out << text.str();
  return kExitOk;
}

int cmd_analyze(const json& cfg, const std::string& variant) {
  LoadedCorpus lc = load_and_encode(cfg);
  TrainConfig tc = train_config(cfg);
  const fs::path out_dir = output_dir(cfg);
  TrainedModel tm = load_trained(checkpoint_path(out_dir, variant), lc.kind,
                                 num_tags_for(lc, tc));

  if (tm.model.config().uses_knowledge()) {
    ModulationReport mod = modulation_histogram(tm, lc.test);
    std::ofstream mod_csv(out_dir / (variant + ".modulation.csv"));
    write_modulation_csv(mod_csv, mod);
    for (const MatrixHistogram& h : mod.matrices)
      std::cout << h.name << ": mean=" << h.mean << " std=" << h.stddev
                << " n=" << h.total << '\n';
  } else {
    std::cout << "modulation: not applicable to fine-tune\n";
  }

  ProximityReport prox = unseen_proximity(tm, lc.test, lc.entities);
  std::ofstream prox_csv(out_dir / (variant + ".proximity.csv"));
  write_proximity_csv(prox_csv, prox);
  if (prox.empty)
    std::cout << "proximity: no unseen entities in the evaluation set\n";
  else
    std::cout << "proximity: mean cosine distance " << prox.mean_distance
              << " over " << prox.entries.size() << " unseen entities\n";
  return kExitOk;
}

int cmd_gradcheck(const json& cfg, double tolerance, std::size_t batch,
                  std::size_t samples) {
  LoadedCorpus lc = load_and_encode(cfg);
  TrainConfig tc = train_config(cfg);
  std::string variant = "kala-relational";
  if (cfg.contains("model") && cfg.at("model").contains("variant"))
    variant = cfg.at("model").at("variant").get<std::string>();
  ModelConfig mc = model_config(cfg, lc.tokens.size(), lc.entities.ids.size(),
                                lc.corpus.relations.size(), lc.max_seq_len,
                                variant);
  mc.transformer.dropout = 0.0;

  Rng rng(tc.seed);
  Rng init = rng.fork(1);
  TrainedModel tm;
  tm.kind = lc.kind;
  tm.model = KalaModel(mc, init);
  if (lc.kind == TaskKind::kSpan)
    tm.span_head.init(mc.transformer.hidden, init);
  else
    tm.tag_head.init(mc.transformer.hidden, num_tags_for(lc, tc), init);

  // Verify backward at a well-conditioned point: the tiny production init
  // leaves many gradients at the finite-difference noise floor, so the check
  // re-randomizes every parameter to a unit-scale draw (null row stays zero).
  Rng scale = rng.fork(3);
  auto params = tm.parameters();
  for (auto& [name, p] : params)
    p.data() = Tensor::randn(p.rows(), p.cols(), scale, 0.4).data();
  if (mc.uses_knowledge()) tm.model.memory().pin_null_row();

  if (lc.train.empty()) throw ContractError("gradcheck needs training examples");
  std::vector<EncodedExample> examples(
      lc.train.begin(),
      lc.train.begin() + std::min(batch, lc.train.size()));
  Rng pick = rng.fork(2);
  GradCheckReport report = grad_check(tm, examples, samples, pick);

  bool ok = report.null_row_grad_zero;
  for (const GradCheckEntry& entry : report.entries) {
    const bool pass = entry.max_rel_error < tolerance;
    ok = ok && pass;
    std::cout << entry.group << ": max rel err " << entry.max_rel_error
              << " over " << entry.checked << " coordinates "
              << (pass ? "[ok]" : "[FAIL]") << '\n';
  }
  std::cout << "null row gradient " << (report.null_row_grad_zero ? "pinned" : "NOT pinned")
            << '\n';
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kala: knowledge-conditioned feature modulation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON config file")->required();
  app.add_option("--set", overrides,
                 "dotted-key config override, e.g. train.epochs=3");

  auto* generate = app.add_subcommand("generate", "emit a synthetic corpus");
  auto* train_cmd = app.add_subcommand("train", "train the configured variants");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved checkpoint");
  auto* flops = app.add_subcommand("flops", "analytic FLOPs report per variant");
  auto* analyze = app.add_subcommand("analyze", "modulation and proximity analyses");
  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "verify gradients against finite differences");
  for (CLI::App* sub : {generate, train_cmd, eval_cmd, flops, analyze, gradcheck_cmd})
    sub->fallthrough();

  std::string variant = "kala-relational";
  eval_cmd->add_option("--variant", variant, "checkpoint variant name");
  analyze->add_option("--variant", variant, "checkpoint variant name");

  double tolerance = 1e-4;
  std::size_t gc_batch = 2, gc_samples = 3;
  gradcheck_cmd->add_option("--tolerance", tolerance, "max relative error");
  gradcheck_cmd->add_option("--batch", gc_batch, "examples in the check batch");
  gradcheck_cmd->add_option("--samples", gc_samples, "coordinates per tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the error message
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const json cfg = load_config(config_path, overrides);
    if (generate->parsed()) return cmd_generate(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval_cmd->parsed()) return cmd_eval(cfg, variant);
    if (flops->parsed()) return cmd_flops(cfg);
    if (analyze->parsed()) return cmd_analyze(cfg, variant);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(cfg, tolerance, gc_batch, gc_samples);
    std::cerr << "no command selected\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
