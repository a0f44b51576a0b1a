#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stagelm/rng.hpp"
#include "stagelm/tokenizer.hpp"

namespace stagelm::model {

using tok::TokenId;

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  std::size_t n_layers = 0;
  std::size_t max_seq_len = 1;
  std::size_t ffn_hidden = 0;  // 0 selects default_ffn_hidden(d_model)
  double rms_eps = 1e-5;
  double rope_base = 10000.0;
  // Attention and feed-forward both read the same normalized block input and
  // are summed, instead of the feed-forward consuming the attention output.
  // ffn_norm_gain is unused in this mode.
  bool parallel_residual = false;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t ffn() const { return ffn_hidden ? ffn_hidden : default_ffn_hidden(d_model); }
  void validate() const;

  // (8/3)·d rounded up to a multiple of 8.
  static std::size_t default_ffn_hidden(std::size_t d_model);
};

// Gains are stored as 1×d matrices so every tensor shares one type.
template <class T>
struct LayerParams {
  Matrix<T> attn_norm_gain;
  Matrix<T> wq, wk, wv, wo;
  Matrix<T> ffn_norm_gain;
  Matrix<T> w_gate, w_up, w_down;
};

template <class T>
struct ModelParams {
  Matrix<T> tok_embed;
  std::vector<LayerParams<T>> layers;
  Matrix<T> final_norm_gain;
  Matrix<T> lm_head;

  // Every tensor zero-filled with the shapes implied by cfg.
  static ModelParams zeros(const ModelConfig& cfg);

  // Visits (name, tensor) in a fixed order shared by the optimizer, the
  // checkpoint writer and the gradient checker.
  template <class F>
  void for_each(F&& f) {
    f(std::string("tok_embed"), tok_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "attn_norm_gain", L.attn_norm_gain);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "ffn_norm_gain", L.ffn_norm_gain);
      f(p + "w_gate", L.w_gate);
      f(p + "w_up", L.w_up);
      f(p + "w_down", L.w_down);
    }
    f(std::string("final_norm_gain"), final_norm_gain);
    f(std::string("lm_head"), lm_head);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Matrix<T>& m) { f(name, static_cast<const Matrix<T>&>(m)); });
  }

  std::size_t parameter_count() const;
  // Throws kShapeMismatch when a tensor does not match cfg.
  void check_shapes(const ModelConfig& cfg) const;
};

template <class T>
using Gradients = ModelParams<T>;

// Embeddings ~ N(0,1); projections ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
// norm gains 1.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng);

template <class T, class U>
ModelParams<U> cast_params(const ModelParams<T>& p);

// ---- building blocks (exposed for testing) --------------------------------

// y = gain ⊙ x / sqrt(mean(x²) + eps), row-wise, no mean subtraction.
template <class T>
Matrix<T> rmsnorm(const Matrix<T>& x, const Matrix<T>& gain, double eps);

// Rotates each (2i, 2i+1) pair of every head by pos · base^(-2i/head_dim).
// x is [T × n_heads·head_dim]. Positions must be < max_seq_len.
template <class T>
void rope_inplace(Matrix<T>& x, std::size_t n_heads, std::span<const std::size_t> positions,
                  double base, std::size_t max_seq_len);

template <class T>
struct RotatedQK {
  Matrix<T> q;
  Matrix<T> k;
};

template <class T>
RotatedQK<T> rope(Matrix<T> q, Matrix<T> k, std::span<const std::size_t> positions,
                  const ModelConfig& cfg);

// Causal multi-head self-attention on already-normalized input, including
// the output projection. When probs is non-null it receives one T×T
// attention matrix per head.
template <class T>
Matrix<T> causal_attention(const Matrix<T>& x, const LayerParams<T>& layer, const ModelConfig& cfg,
                           std::vector<Matrix<T>>* probs = nullptr);

// W_down · (swish(x·W_gate) ⊙ (x·W_up)).
template <class T>
Matrix<T> swiglu_ffn(const Matrix<T>& x, const Matrix<T>& w_gate, const Matrix<T>& w_up,
                     const Matrix<T>& w_down);

// ---- full model ------------------------------------------------------------

template <class T>
Matrix<T> forward(const ModelParams<T>& params, const ModelConfig& cfg,
                  std::span<const TokenId> tokens);

template <class T>
struct LossAndGrads {
  T loss;
  Gradients<T> grads;
};

// Mean next-token cross-entropy over positions with loss_mask == 1 and its
// exact gradient. Throws kNoSupervisedPositions when the mask is all zero.
template <class T>
LossAndGrads<T> backward(const ModelParams<T>& params, const ModelConfig& cfg,
                         std::span<const TokenId> tokens, std::span<const TokenId> targets,
                         std::span<const std::uint8_t> loss_mask);

struct SupervisedSequence {
  std::span<const TokenId> tokens;
  std::span<const TokenId> targets;
  std::span<const std::uint8_t> loss_mask;  // empty means every position counts
};

// Batch loss: mean over all supervised positions of the batch. grads is
// overwritten. Sequences may run on up to `threads` workers; the reduction
// order is fixed, so results do not depend on the thread count.
template <class T>
T backward_batch(const ModelParams<T>& params, const ModelConfig& cfg,
                 std::span<const SupervisedSequence> batch, Gradients<T>& grads, int threads = 1);

// Per-position next-token negative log-likelihood (natural log), computed in
// double from the model's logits.
template <class T>
std::vector<double> token_nll(const ModelParams<T>& params, const ModelConfig& cfg,
                              std::span<const TokenId> tokens, std::span<const TokenId> targets);

}  // namespace stagelm::model
