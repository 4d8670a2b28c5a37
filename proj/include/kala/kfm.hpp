#pragma once

// Knowledge-conditioned feature modulation: turns retrieved entity vectors
// into per-token scale/shift matrices applied after the two LayerNorms of a
// transformer block.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "kala/annotations.hpp"
#include "kala/error.hpp"
#include "kala/rng.hpp"
#include "kala/tensor.hpp"

namespace kala {

// Per-token modulation matrices, all [seq_len x d]. Rows outside every
// mention are exactly 1 (gammas) / 0 (betas).
struct ModulationParams {
  Tensor gamma1;
  Tensor beta1;
  Tensor gamma2;
  Tensor beta2;
};

// Ablation flags per the four modulation matrices, plus the MLP width.
struct KfmConfig {
  bool use_gamma1 = true;
  bool use_beta1 = true;
  bool use_gamma2 = true;
  bool use_beta2 = true;
  std::size_t mlp_hidden = 0;  // 0 means "same as d"

  bool any_enabled() const {
    return use_gamma1 || use_beta1 || use_gamma2 || use_beta2;
  }
};

// Two affine layers with ReLU between. The final layer starts at zero so an
// untrained model modulates with exact identity.
struct KfmMlp {
  Tensor w1, b1, w2, b2;

  void init(std::size_t d, std::size_t hidden, Rng& rng) {
    w1 = Tensor::randn(d, hidden, rng, 0.02).set_requires_grad();
    b1 = Tensor::zeros(1, hidden).set_requires_grad();
    w2 = Tensor::zeros(hidden, d).set_requires_grad();
    b2 = Tensor::zeros(1, d).set_requires_grad();
  }

  Tensor apply(const Tensor& v) const {
    return add_rowvec(matmul(relu(add_rowvec(matmul(v, w1), b1)), w2), b2);
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
  }
};

// The four mutually independent MLPs h1..h4 of one KFM location.
struct KfmSite {
  KfmMlp h1, h2, h3, h4;

  void init(std::size_t d, std::size_t hidden, Rng& rng) {
    h1.init(d, hidden, rng);
    h2.init(d, hidden, rng);
    h3.init(d, hidden, rng);
    h4.init(d, hidden, rng);
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor>>& out) const {
    h1.collect(prefix + ".h1", out);
    h2.collect(prefix + ".h2", out);
    h3.collect(prefix + ".h3", out);
    h4.collect(prefix + ".h4", out);
  }
};

// entity_vectors[i] is the retrieved vector for local entity i; nullopt means
// the null entity (identity modulation, no MLP pass at all).
inline ModulationParams compute_modulation(
    const std::vector<std::optional<Tensor>>& entity_vectors,
    const std::vector<Mention>& mentions, std::size_t seq_len,
    const KfmSite& site, const KfmConfig& cfg, std::size_t d) {
  validate_mentions(mentions, seq_len);
  if (!cfg.any_enabled())
    throw ConfigError("compute_modulation: all KFM flags disabled");

  std::vector<std::pair<std::size_t, Tensor>> g1, b1, g2, b2;
  for (const Mention& m : mentions) {
    if (m.entity >= entity_vectors.size())
      throw AnnotationError("mention references unknown entity");
    const auto& v = entity_vectors[m.entity];
    if (!v.has_value()) continue;  // null entity: rows stay identity
    // One row tensor per mention, shared by every position in the span.
    Tensor rg1 = cfg.use_gamma1 ? add_scalar(site.h1.apply(*v), 1.0) : Tensor();
    Tensor rb1 = cfg.use_beta1 ? site.h2.apply(*v) : Tensor();
    Tensor rg2 = cfg.use_gamma2 ? add_scalar(site.h3.apply(*v), 1.0) : Tensor();
    Tensor rb2 = cfg.use_beta2 ? site.h4.apply(*v) : Tensor();
    for (std::size_t j = m.start; j <= m.end; ++j) {
      if (rg1.defined()) g1.emplace_back(j, rg1);
      if (rb1.defined()) b1.emplace_back(j, rb1);
      if (rg2.defined()) g2.emplace_back(j, rg2);
      if (rb2.defined()) b2.emplace_back(j, rb2);
    }
  }

  ModulationParams params;
  params.gamma1 = compose_rows(seq_len, d, 1.0, g1);
  params.beta1 = compose_rows(seq_len, d, 0.0, b1);
  params.gamma2 = compose_rows(seq_len, d, 1.0, g2);
  params.beta2 = compose_rows(seq_len, d, 0.0, b2);
  return params;
}

// gamma o normalized + beta, element-wise.
inline Tensor apply_modulation(const Tensor& normalized, const Tensor& gamma,
                               const Tensor& beta) {
  return add(mul(gamma, normalized), beta);
}

}  // namespace kala
