#pragma once

// Minimal L-layer transformer encoder. Each block is
//   H_hat = LN(H + Attn(H)),  H' = LN(H_hat + FF(H_hat))
// and blocks listed in kfm_locations accept the scale/shift modulation
// applied right after each of the two LayerNorms.

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kala/error.hpp"
#include "kala/kfm.hpp"
#include "kala/rng.hpp"
#include "kala/tensor.hpp"

namespace kala {

struct TransformerConfig {
  std::size_t num_layers = 4;
  std::size_t hidden = 64;
  std::size_t intermediate = 256;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 128;
  double dropout = 0.1;
  std::set<std::size_t> kfm_locations;  // 1-based layer indices

  void validate() const {
    if (hidden % num_heads != 0)
      throw ConfigError("hidden size must be divisible by num heads");
    for (std::size_t l : kfm_locations)
      if (l < 1 || l > num_layers)
        throw ConfigError("kfm location outside {1..L}");
    if (vocab_size == 0) throw ConfigError("vocab size must be positive");
  }
};

// Per-layer token representations H^0..H^L.
struct HiddenStates {
  std::vector<Tensor> layers;

  const Tensor& embedding() const { return layers.front(); }
  const Tensor& final() const { return layers.back(); }
};

struct EncoderLayer {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;

  void init(std::size_t d, std::size_t d_ff, Rng& rng) {
    auto weight = [&](std::size_t r, std::size_t c) {
      return Tensor::randn(r, c, rng, 0.02).set_requires_grad();
    };
    auto bias = [&](std::size_t c) { return Tensor::zeros(1, c).set_requires_grad(); };
    wq = weight(d, d); bq = bias(d);
    wk = weight(d, d); bk = bias(d);
    wv = weight(d, d); bv = bias(d);
    wo = weight(d, d); bo = bias(d);
    ln1_gain = Tensor::ones(1, d).set_requires_grad();
    ln1_bias = bias(d);
    w1 = weight(d, d_ff); b1 = bias(d_ff);
    w2 = weight(d_ff, d); b2 = bias(d);
    ln2_gain = Tensor::ones(1, d).set_requires_grad();
    ln2_bias = bias(d);
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".wq", wq); out.emplace_back(prefix + ".bq", bq);
    out.emplace_back(prefix + ".wk", wk); out.emplace_back(prefix + ".bk", bk);
    out.emplace_back(prefix + ".wv", wv); out.emplace_back(prefix + ".bv", bv);
    out.emplace_back(prefix + ".wo", wo); out.emplace_back(prefix + ".bo", bo);
    out.emplace_back(prefix + ".ln1_gain", ln1_gain);
    out.emplace_back(prefix + ".ln1_bias", ln1_bias);
    out.emplace_back(prefix + ".w1", w1); out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2); out.emplace_back(prefix + ".b2", b2);
    out.emplace_back(prefix + ".ln2_gain", ln2_gain);
    out.emplace_back(prefix + ".ln2_bias", ln2_bias);
  }
};

class TransformerEncoder {
 public:
  TransformerEncoder() = default;

  TransformerEncoder(const TransformerConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    token_embed_ = Tensor::randn(cfg.vocab_size, cfg.hidden, rng, 0.02)
                       .set_requires_grad();
    pos_embed_ = Tensor::randn(cfg.max_seq_len, cfg.hidden, rng, 0.02)
                     .set_requires_grad();
    layers_.resize(cfg.num_layers);
    for (auto& layer : layers_) layer.init(cfg.hidden, cfg.intermediate, rng);
  }

  const TransformerConfig& config() const { return cfg_; }
  std::vector<EncoderLayer>& layers() { return layers_; }
  const std::vector<EncoderLayer>& layers() const { return layers_; }
  Tensor& token_embedding() { return token_embed_; }
  const Tensor& token_embedding() const { return token_embed_; }
  Tensor& position_embedding() { return pos_embed_; }
  const Tensor& position_embedding() const { return pos_embed_; }

  // Multi-head scaled dot-product self-attention, pre-residual and pre-LN.
  Tensor attention_block(const Tensor& h, std::size_t layer_idx) const {
    const EncoderLayer& L = layers_[layer_idx];
    const std::size_t d = cfg_.hidden;
    const std::size_t n_heads = cfg_.num_heads;
    const std::size_t dh = d / n_heads;
    if (h.cols() != d) throw ShapeError("attention_block: hidden size mismatch");

    Tensor q = add_rowvec(matmul(h, L.wq), L.bq);
    Tensor k = add_rowvec(matmul(h, L.wk), L.bk);
    Tensor v = add_rowvec(matmul(h, L.wv), L.bv);

    std::vector<Tensor> head_ctx;
    head_ctx.reserve(n_heads);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t head = 0; head < n_heads; ++head) {
      Tensor qh = slice_cols(q, head * dh, (head + 1) * dh);
      Tensor kh = slice_cols(k, head * dh, (head + 1) * dh);
      Tensor vh = slice_cols(v, head * dh, (head + 1) * dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      Tensor weights = softmax_rows(scores);
      head_ctx.push_back(matmul(weights, vh));
    }
    return add_rowvec(matmul(concat_cols(head_ctx), L.wo), L.bo);
  }

  // Attention weights of one layer/head on given input; eval-mode helper for
  // inspection and tests.
  Tensor attention_weights(const Tensor& h, std::size_t layer_idx,
                           std::size_t head) const {
    const EncoderLayer& L = layers_[layer_idx];
    const std::size_t dh = cfg_.hidden / cfg_.num_heads;
    Tensor q = add_rowvec(matmul(h, L.wq), L.bq);
    Tensor k = add_rowvec(matmul(h, L.wk), L.bk);
    Tensor qh = slice_cols(q, head * dh, (head + 1) * dh);
    Tensor kh = slice_cols(k, head * dh, (head + 1) * dh);
    return softmax_rows(scale(matmul(qh, transpose(kh)),
                              1.0 / std::sqrt(static_cast<double>(dh))));
  }

  // sigma(H_hat W1 + b1) W2 + b2 with GELU.
  Tensor feed_forward_block(const Tensor& h_hat, std::size_t layer_idx) const {
    const EncoderLayer& L = layers_[layer_idx];
    if (h_hat.cols() != cfg_.hidden)
      throw ShapeError("feed_forward_block: hidden size mismatch");
    return add_rowvec(matmul(gelu(add_rowvec(matmul(h_hat, L.w1), L.b1)), L.w2),
                      L.b2);
  }

  HiddenStates encode(const std::vector<std::size_t>& token_ids,
                      const std::map<std::size_t, ModulationParams>* modulation =
                          nullptr,
                      bool training = false, Rng* drop_rng = nullptr) const {
    const std::size_t n = token_ids.size();
    if (n == 0) throw ContractError("encode: empty token sequence");
    if (n > cfg_.max_seq_len) throw ContractError("encode: sequence too long");
    for (std::size_t t : token_ids)
      if (t >= cfg_.vocab_size) throw ContractError("encode: token id out of vocab");
    if (modulation != nullptr)
      for (const auto& [layer, params] : *modulation) {
        if (!cfg_.kfm_locations.contains(layer))
          throw ConfigError("modulation supplied for non-KFM layer " +
                            std::to_string(layer));
        if (params.gamma1.rows() != n || params.gamma1.cols() != cfg_.hidden)
          throw ShapeError("modulation shape mismatch");
      }
    if (training && drop_rng == nullptr)
      throw ContractError("encode: training mode needs a dropout rng");

    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;

    HiddenStates states;
    states.layers.reserve(cfg_.num_layers + 1);
    Tensor h = add(gather_rows(token_embed_, token_ids),
                   gather_rows(pos_embed_, positions));
    if (training) h = dropout(h, cfg_.dropout, *drop_rng, true);
    states.layers.push_back(h);

    for (std::size_t l = 1; l <= cfg_.num_layers; ++l) {
      const EncoderLayer& L = layers_[l - 1];
      const ModulationParams* mod = nullptr;
      if (modulation != nullptr) {
        auto it = modulation->find(l);
        if (it != modulation->end()) mod = &it->second;
      }

      Tensor attn = attention_block(h, l - 1);
      if (training) attn = dropout(attn, cfg_.dropout, *drop_rng, true);
      Tensor h_hat = layer_norm(add(h, attn), L.ln1_gain, L.ln1_bias);
      if (mod != nullptr) h_hat = apply_modulation(h_hat, mod->gamma1, mod->beta1);

      Tensor ff = feed_forward_block(h_hat, l - 1);
      if (training) ff = dropout(ff, cfg_.dropout, *drop_rng, true);
      Tensor h_out = layer_norm(add(h_hat, ff), L.ln2_gain, L.ln2_bias);
      if (mod != nullptr) h_out = apply_modulation(h_out, mod->gamma2, mod->beta2);

      states.layers.push_back(h_out);
      h = h_out;
    }
    return states;
  }

  void collect(std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back("encoder.token_embed", token_embed_);
    out.emplace_back("encoder.pos_embed", pos_embed_);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect("encoder.layer" + std::to_string(i), out);
  }

 private:
  TransformerConfig cfg_;
  Tensor token_embed_;
  Tensor pos_embed_;
  std::vector<EncoderLayer> layers_;
};

}  // namespace kala
