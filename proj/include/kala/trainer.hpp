#pragma once

// Task heads, losses, optimizer, training loop, and evaluation metrics for
// the span-extraction and token-tagging tasks, plus the gradient-check
// harness that compares backward against central finite differences.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "kala/corpus.hpp"
#include "kala/gradcheck.hpp"
#include "kala/model.hpp"

namespace kala {

// ---------------------------------------------------------------------------
// Task heads.

struct SpanHead {
  Tensor w_start, w_end;  // [d x 1] read-outs
  Tensor b_start, b_end;  // [1 x 1]

  void init(std::size_t d, Rng& rng) {
    w_start = Tensor::randn(d, 1, rng, 0.02).set_requires_grad();
    w_end = Tensor::randn(d, 1, rng, 0.02).set_requires_grad();
    b_start = Tensor::zeros(1, 1).set_requires_grad();
    b_end = Tensor::zeros(1, 1).set_requires_grad();
  }

  // Start/end logits over positions, each [1 x n].
  std::pair<Tensor, Tensor> logits(const Tensor& h) const {
    Tensor s = transpose(add_rowvec(matmul(h, w_start), b_start));
    Tensor e = transpose(add_rowvec(matmul(h, w_end), b_end));
    return {s, e};
  }

  void collect(std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back("head.w_start", w_start);
    out.emplace_back("head.b_start", b_start);
    out.emplace_back("head.w_end", w_end);
    out.emplace_back("head.b_end", b_end);
  }
};

struct TagHead {
  Tensor w, b;
  std::size_t num_tags = 0;

  void init(std::size_t d, std::size_t tags, Rng& rng) {
    num_tags = tags;
    w = Tensor::randn(d, tags, rng, 0.02).set_requires_grad();
    b = Tensor::zeros(1, tags).set_requires_grad();
  }

  Tensor logits(const Tensor& h) const { return add_rowvec(matmul(h, w), b); }

  void collect(std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back("head.tag_w", w);
    out.emplace_back("head.tag_b", b);
  }
};

// ---------------------------------------------------------------------------
// Losses.

inline Tensor span_loss(const Tensor& start_logits, const Tensor& end_logits,
                        std::size_t gold_start, std::size_t gold_end) {
  if (start_logits.rows() != 1 || end_logits.rows() != 1)
    throw ShapeError("span_loss: logits must be [1 x n]");
  const std::size_t n = start_logits.cols();
  if (gold_start >= n || gold_end >= n || gold_start > gold_end)
    throw ContractError("span_loss: gold span out of range");
  Tensor ls = log_softmax_rows(start_logits);
  Tensor le = log_softmax_rows(end_logits);
  Tensor picked =
      add(pick_sum(ls, {{0, gold_start}}), pick_sum(le, {{0, gold_end}}));
  return scale(picked, -1.0);
}

inline Tensor tag_loss(const Tensor& tag_logits, const std::vector<std::size_t>& gold) {
  if (tag_logits.rows() != gold.size())
    throw ContractError("tag_loss: tag count mismatch");
  for (std::size_t g : gold)
    if (g >= tag_logits.cols()) throw ContractError("tag_loss: gold tag out of range");
  Tensor lp = log_softmax_rows(tag_logits);
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  idx.reserve(gold.size());
  for (std::size_t r = 0; r < gold.size(); ++r) idx.emplace_back(r, gold[r]);
  Tensor picked = pick_sum(lp, idx);
  return scale(picked, -1.0 / static_cast<double>(gold.size()));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and a linear warmup/decay schedule.

struct AdamW {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t step_count = 0;

  std::unordered_map<TensorNode*, std::vector<double>> m_, v_;

  void step(std::vector<std::pair<std::string, Tensor>>& params, double lr_scale) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    const double step_lr = lr * lr_scale;
    for (auto& [name, p] : params) {
      auto* node = p.node().get();
      if (node->grad.empty()) continue;  // parameter untouched this step
      auto& m = m_[node];
      auto& v = v_[node];
      if (m.empty()) m.assign(p.numel(), 0.0);
      if (v.empty()) v.assign(p.numel(), 0.0);
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double g = node->grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        node->data[i] -= step_lr * (update + weight_decay * node->data[i]);
      }
    }
  }
};

// Linear warmup to peak, then linear decay to zero over the remaining steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps,
                          double warmup_fraction) {
  if (total_steps == 0) return 0.0;
  const double warmup = std::max(1.0, warmup_fraction * static_cast<double>(total_steps));
  const double s = static_cast<double>(step + 1);
  if (s <= warmup) return s / warmup;
  const double rest = static_cast<double>(total_steps) - warmup;
  if (rest <= 0.0) return 1.0;
  return std::max(0.0, (static_cast<double>(total_steps) - s) / rest);
}

// ---------------------------------------------------------------------------
// Example encoding: question tokens first (span task), mentions and gold
// spans shifted into full-sequence coordinates.

struct EncodedExample {
  ModelInput input;
  std::size_t context_offset = 0;  // first context token position
  std::size_t gold_start = 0, gold_end = 0;  // full-sequence coords (span)
  std::vector<std::size_t> tags;             // context-only (tagging)
  TaskKind kind = TaskKind::kSpan;
};

inline EncodedExample encode_example(const TaskExample& ex,
                                     const TokenVocabulary& tokens,
                                     const EntityVocabulary& entities) {
  EncodedExample enc;
  enc.kind = ex.kind;
  if (ex.kind == TaskKind::kSpan) {
    for (const std::string& t : ex.question_tokens)
      enc.input.token_ids.push_back(tokens.lookup(t));
    enc.context_offset = enc.input.token_ids.size();
    enc.gold_start = ex.answer_start + enc.context_offset;
    enc.gold_end = ex.answer_end + enc.context_offset;
  } else {
    enc.tags = ex.tags;
  }
  for (const std::string& t : ex.context_tokens)
    enc.input.token_ids.push_back(tokens.lookup(t));
  for (const std::string& id : ex.entity_ids)
    enc.input.entities.push_back({id, entities.row(id)});
  for (const Mention& m : ex.mentions)
    enc.input.mentions.push_back(
        {m.entity, m.start + enc.context_offset, m.end + enc.context_offset});
  enc.input.facts = ex.facts;
  return enc;
}

// ---------------------------------------------------------------------------
// Span decoding and metrics.

// Best (start, end) pair over context positions by summed logits, start <= end,
// length capped. Deterministic tie-break: lowest start, then shortest span.
inline std::pair<std::size_t, std::size_t> decode_span(
    const Tensor& start_logits, const Tensor& end_logits,
    std::size_t context_offset, std::size_t max_answer_len = 30) {
  const std::size_t n = start_logits.cols();
  if (context_offset >= n) throw ContractError("decode_span: empty context region");
  double best = -std::numeric_limits<double>::infinity();
  std::size_t bs = context_offset, be = context_offset;
  for (std::size_t s = context_offset; s < n; ++s) {
    for (std::size_t e = s; e < std::min(n, s + max_answer_len); ++e) {
      const double score = start_logits.at(0, s) + end_logits.at(0, e);
      if (score > best) {
        best = score;
        bs = s;
        be = e;
      }
    }
  }
  return {bs, be};
}

// Token-overlap F1 between two inclusive position spans of one context.
inline double span_f1(std::size_t ps, std::size_t pe, std::size_t gs, std::size_t ge) {
  const std::size_t lo = std::max(ps, gs);
  const std::size_t hi = std::min(pe, ge);
  if (lo > hi) return 0.0;
  const double overlap = static_cast<double>(hi - lo + 1);
  const double precision = overlap / static_cast<double>(pe - ps + 1);
  const double recall = overlap / static_cast<double>(ge - gs + 1);
  return 2.0 * precision * recall / (precision + recall);
}

// Entity-level F1 for tagging: contiguous nonzero-tag runs as typed spans.
inline std::vector<std::array<std::size_t, 3>> tag_spans(
    const std::vector<std::size_t>& tags) {
  std::vector<std::array<std::size_t, 3>> spans;
  std::size_t i = 0;
  while (i < tags.size()) {
    if (tags[i] == 0) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < tags.size() && tags[j + 1] == tags[i]) ++j;
    spans.push_back({i, j, tags[i]});
    i = j + 1;
  }
  return spans;
}

struct F1Counts {
  std::size_t matched = 0, predicted = 0, gold = 0;

  double precision() const {
    return predicted == 0 ? 0.0 : static_cast<double>(matched) / predicted;
  }
  double recall() const {
    return gold == 0 ? 0.0 : static_cast<double>(matched) / gold;
  }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
};

// ---------------------------------------------------------------------------
// Train config, metrics, and the loop.

// Registry-name prefix -> optimizer / grad-check group.
inline std::string parameter_group(const std::string& name) {
  if (name.rfind("encoder.", 0) == 0) return "transformer";
  if (name.rfind("memory.", 0) == 0) return "memory";
  if (name.rfind("kfm.", 0) == 0) return "kfm";
  if (name.rfind("gnn.", 0) == 0 || name.rfind("relations.", 0) == 0) return "gnn";
  if (name.rfind("head.", 0) == 0) return "heads";
  return "other";
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double warmup_fraction = 0.06;
  std::uint64_t seed = 0;
  std::size_t num_tags = 0;  // tagging only; 0 derives from data
  // When set, knowledge-side parameters (memory, modulation MLPs, GNN,
  // relations) get their own optimizer state instead of sharing moments
  // with the encoder and heads.
  bool separate_knowledge_optimizer = false;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_em = 0.0;
  double val_f1 = 0.0;
};

struct EvalResult {
  double em = 0.0;
  double f1 = 0.0;
  std::size_t count = 0;
  std::optional<double> seen_f1, unseen_f1;
  std::optional<double> seen_em, unseen_em;
};

struct TrainedModel {
  KalaModel model;
  SpanHead span_head;
  TagHead tag_head;
  TaskKind kind = TaskKind::kSpan;

  std::vector<std::pair<std::string, Tensor>> parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    model.collect(out);
    if (kind == TaskKind::kSpan)
      span_head.collect(out);
    else
      tag_head.collect(out);
    return out;
  }
};

// Forward one example through model and head and return the loss tensor.
inline Tensor example_loss(TrainedModel& tm, const EncodedExample& enc,
                           bool training, Rng* drop_rng) {
  if (enc.kind != tm.kind)
    throw ContractError("example task kind does not match the model head");
  ModelOutput out = tm.model.forward(enc.input, training, drop_rng);
  const Tensor& h = out.states.final();
  if (enc.kind == TaskKind::kSpan) {
    auto [s, e] = tm.span_head.logits(h);
    return span_loss(s, e, enc.gold_start, enc.gold_end);
  }
  return tag_loss(tm.tag_head.logits(h), enc.tags);
}

inline EvalResult evaluate_examples(TrainedModel& tm,
                                    const std::vector<EncodedExample>& examples,
                                    const SeenUnseenSplit* split = nullptr) {
  EvalResult result;
  result.count = examples.size();
  std::vector<double> em(examples.size(), 0.0), f1(examples.size(), 0.0);
  F1Counts tag_counts;
  std::vector<F1Counts> per_example_tags(examples.size());

  for (std::size_t i = 0; i < examples.size(); ++i) {
    const EncodedExample& enc = examples[i];
    if (enc.kind != tm.kind)
      throw ContractError("evaluate: example task kind does not match the model head");
    ModelOutput out = tm.model.forward(enc.input, false, nullptr);
    const Tensor& h = out.states.final();
    if (enc.kind == TaskKind::kSpan) {
      auto [s, e] = tm.span_head.logits(h);
      auto [ps, pe] = decode_span(s, e, enc.context_offset);
      em[i] = (ps == enc.gold_start && pe == enc.gold_end) ? 1.0 : 0.0;
      f1[i] = span_f1(ps, pe, enc.gold_start, enc.gold_end);
    } else {
      Tensor logits = tm.tag_head.logits(h);
      std::vector<std::size_t> pred(enc.tags.size(), 0);
      for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
          if (logits.at(r, c) > logits.at(r, arg)) arg = c;
        pred[r] = arg;
      }
      auto ps = tag_spans(pred), gs = tag_spans(enc.tags);
      F1Counts& counts = per_example_tags[i];
      counts.predicted = ps.size();
      counts.gold = gs.size();
      for (const auto& span : ps)
        if (std::find(gs.begin(), gs.end(), span) != gs.end()) ++counts.matched;
      tag_counts.matched += counts.matched;
      tag_counts.predicted += counts.predicted;
      tag_counts.gold += counts.gold;
      em[i] = pred == enc.tags ? 1.0 : 0.0;
      f1[i] = counts.f1();
    }
  }

  auto mean_over = [&](const std::vector<double>& xs,
                       const std::vector<std::size_t>& idx) {
    double acc = 0.0;
    for (std::size_t i : idx) acc += xs[i];
    return idx.empty() ? 0.0 : acc / static_cast<double>(idx.size());
  };

  if (!examples.empty()) {
    double e = 0.0, f = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      e += em[i];
      f += f1[i];
    }
    result.em = e / static_cast<double>(examples.size());
    result.f1 = f / static_cast<double>(examples.size());
  }
  if (split != nullptr) {
    if (!split->seen.empty()) {
      result.seen_em = mean_over(em, split->seen);
      result.seen_f1 = mean_over(f1, split->seen);
    }
    if (!split->unseen.empty()) {
      result.unseen_em = mean_over(em, split->unseen);
      result.unseen_f1 = mean_over(f1, split->unseen);
    }
  }
  return result;
}

struct TrainOutput {
  TrainedModel trained;
  std::vector<EpochMetrics> log;
  double best_val_f1 = 0.0;
};

// Deterministic given (config seed, model config). Keeps the checkpoint with
// the best validation F1. Throws NumericError on divergence.
inline TrainOutput train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const std::vector<EncodedExample>& train_set,
                         const std::vector<EncodedExample>& val_set,
                         TaskKind kind, std::size_t num_tags = 0) {
  Rng root(cfg.seed);
  Rng init_rng = root.fork(1);
  Rng drop_rng = root.fork(2);
  Rng shuffle_rng = root.fork(3);

  TrainOutput out;
  out.trained.kind = kind;
  out.trained.model = KalaModel(model_cfg, init_rng);
  if (kind == TaskKind::kSpan)
    out.trained.span_head.init(model_cfg.transformer.hidden, init_rng);
  else
    out.trained.tag_head.init(model_cfg.transformer.hidden, num_tags, init_rng);

  auto params = out.trained.parameters();
  AdamW opt;
  opt.lr = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  AdamW knowledge_opt = opt;  // used only when routed separately

  std::vector<std::pair<std::string, Tensor>> main_params, knowledge_params;
  for (auto& entry : params) {
    const std::string group = parameter_group(entry.first);
    const bool knowledge_side =
        group == "memory" || group == "kfm" || group == "gnn";
    (cfg.separate_knowledge_optimizer && knowledge_side ? knowledge_params
                                                        : main_params)
        .push_back(entry);
  }

  const std::size_t batches_per_epoch =
      train_set.empty() ? 0 : (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches_per_epoch * cfg.epochs;
  std::size_t step = 0;

  std::vector<std::vector<double>> best_values;
  auto snapshot = [&]() {
    best_values.clear();
    for (auto& [name, p] : params) best_values.push_back(p.data());
  };
  snapshot();  // zero epochs keeps the initialization
  out.best_val_f1 = -1.0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(order[i - 1], order[j]);
    }

    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(train_set.size(), lo + cfg.batch_size);
      for (auto& [name, p] : params) p.zero_grad();

      ComputationTape tape;
      double batch_loss;
      {
        TapeScope scope(tape);
        Tensor total = Tensor::zeros(1, 1);
        for (std::size_t k = lo; k < hi; ++k)
          total = add(total, example_loss(out.trained, train_set[order[k]], true,
                                          &drop_rng));
        Tensor mean = scale(total, 1.0 / static_cast<double>(hi - lo));
        batch_loss = mean.item();
        if (!std::isfinite(batch_loss))
          throw NumericError("training diverged: non-finite loss at epoch " +
                             std::to_string(epoch) + " batch " + std::to_string(b));
        backward(mean, tape);
      }
      // Null-entity row: discard its gradient, then re-pin after the step.
      if (model_cfg.uses_knowledge()) out.trained.model.memory().pin_null_row();
      const double lr_scale = lr_schedule(step, total_steps, cfg.warmup_fraction);
      opt.step(main_params, lr_scale);
      if (!knowledge_params.empty()) knowledge_opt.step(knowledge_params, lr_scale);
      if (model_cfg.uses_knowledge()) out.trained.model.memory().pin_null_row();
      ++step;
      epoch_loss += batch_loss * static_cast<double>(hi - lo);
    }

    EvalResult val = evaluate_examples(out.trained, val_set);
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = train_set.empty() ? 0.0 : epoch_loss / static_cast<double>(train_set.size());
    m.val_em = val.em;
    m.val_f1 = val.f1;
    out.log.push_back(m);
    if (val.f1 > out.best_val_f1) {
      out.best_val_f1 = val.f1;
      snapshot();
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i].second.data() = best_values[i];
  if (model_cfg.uses_knowledge()) out.trained.model.memory().pin_null_row();
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-check harness: central differences on a random subsample of
// coordinates per parameter group, dropout off.

struct GradCheckEntry {
  std::string group;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool null_row_grad_zero = true;
  double worst = 0.0;
  bool passed(double tolerance) const { return worst < tolerance; }
};

inline GradCheckReport grad_check(TrainedModel& tm,
                                  const std::vector<EncodedExample>& batch,
                                  std::size_t samples_per_tensor, Rng& rng,
                                  double h = 1e-5) {
  auto params = tm.parameters();
  auto forward = [&]() {
    double total = 0.0;
    for (const EncodedExample& enc : batch)
      total += example_loss(tm, enc, false, nullptr).item();
    return total;
  };

  for (auto& [name, p] : params) p.zero_grad();
  ComputationTape tape;
  {
    TapeScope scope(tape);
    Tensor total = Tensor::zeros(1, 1);
    for (const EncodedExample& enc : batch)
      total = add(total, example_loss(tm, enc, false, nullptr));
    backward(total, tape);
  }

  // Relative-error floor scaled to the finite-difference noise level, which
  // grows with the magnitude of the objective (cancellation of ~1e-16 * |f|
  // across the 2h stencil). Structurally-zero gradients (e.g. the key bias,
  // which cancels inside softmax) then read as noise over noise, not as error.
  const double f0 = forward();
  const double floor = 1e-6 * std::max(1.0, std::fabs(f0));

  std::map<std::string, GradCheckEntry> groups;
  GradCheckReport report;
  for (auto& [name, p] : params) {
    GradCheckEntry& entry = groups[parameter_group(name)];
    entry.group = parameter_group(name);
    if (p.node()->grad.empty()) continue;
    for (std::size_t s = 0; s < std::min(samples_per_tensor, p.numel()); ++s) {
      const std::size_t i = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(p.numel() - 1)));
      const double analytic = p.node()->grad[i];
      const double saved = p.data()[i];
      auto central = [&](double step) {
        p.data()[i] = saved + step;
        const double fp = forward();
        p.data()[i] = saved - step;
        const double fm = forward();
        p.data()[i] = saved;
        return (fp - fm) / (2.0 * step);
      };
      auto rel_err = [&](double fd) {
        const double denom = std::max({std::fabs(analytic), std::fabs(fd), floor});
        return std::fabs(analytic - fd) / denom;
      };
      // A piecewise-linear kink (leaky ReLU) within +-h of the evaluation
      // point corrupts the central difference; shrinking the step moves the
      // crossing outside the stencil, so take the best of three step sizes.
      double err = rel_err(central(h));
      for (double step : {h / 10.0, h / 100.0})
        if (err > 1e-6) err = std::min(err, rel_err(central(step)));
      entry.max_rel_error = std::max(entry.max_rel_error, err);
      ++entry.checked;
    }
  }

  // The pinned null row must report zero gradient after discard.
  if (tm.model.config().uses_knowledge()) {
    tm.model.memory().pin_null_row();
    const auto& g = tm.model.memory().table.grad();
    if (!g.empty())
      for (std::size_t c = 0; c < tm.model.memory().dim(); ++c)
        if (g[c] != 0.0) report.null_row_grad_zero = false;
  }

  for (auto& [key, entry] : groups) {
    report.worst = std::max(report.worst, entry.max_rel_error);
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace kala
