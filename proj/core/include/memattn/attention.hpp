#pragma once

#include <cstddef>
#include <cstdint>

#include "memattn/tensor.hpp"

namespace memattn {

// Bias-free Q/K/V/output projections.
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // [d_model x d_model] each
  std::size_t num_heads = 1;

  std::size_t d_model() const noexcept { return w_q.rows(); }
  std::size_t head_dim() const noexcept { return d_model() / num_heads; }
};

struct FfnParams {
  Tensor w1;  // [d_model x d_ff]
  Tensor w2;  // [d_ff x d_model]

  std::size_t d_ff() const noexcept { return w1.cols(); }
};

// LayerNorm scale and shift, each [1 x d_model].
struct NormParams {
  Tensor gamma, beta;
};

struct BlockParams {
  AttentionParams attn;
  FfnParams ffn;
  NormParams norm1, norm2;

  std::size_t d_model() const noexcept { return attn.d_model(); }

  // Weights ~ N(0, 1/fan_in) drawn in the order w_q, w_k, w_v, w_o, w1, w2;
  // norms start at gamma = 1, beta = 0. All-zero weights are available via
  // zeros() for passthrough tests.
  static BlockParams init(std::size_t d_model, std::size_t d_ff,
                          std::size_t num_heads, Prng& prng);
  static BlockParams zeros(std::size_t d_model, std::size_t d_ff,
                           std::size_t num_heads);

  // Throws DimensionError on any inconsistent tensor shape.
  void validate() const;
};

// Post-projection tensors of one block; keys/values are what banks capture.
struct BlockActivations {
  Tensor queries, keys, values;  // [n_tokens x d_model]
  Tensor block_output;           // [n_tokens x d_model]
};

struct Qkv {
  Tensor q, k, v;
};

inline constexpr float kLayerNormEpsilon = 1e-5F;

Qkv project_qkv(const Tensor& x, const AttentionParams& params);

/**
 * Multi-head scaled dot-product attention.
 *
 * Per head h: softmax(Q_h K_h^T / sqrt(head_dim)) V_h, concatenated back to
 * [n x d_model]. K and V may hold a different token count than Q, which is
 * how retrieved memories are attended. The result is taken before w_o.
 */
Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       std::size_t num_heads);

Tensor layer_norm(const Tensor& x, const NormParams& norm);

// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& x);

/**
 * Everything after the attention mix: x + attn * w_o, then the pre-norm FFN
 * residual. Shared by the dense and memorizing paths so that identical
 * attention outputs give bitwise-identical block outputs.
 */
Tensor block_tail(const Tensor& x, const Tensor& attention_output,
                  const BlockParams& params);

// Pre-norm residual block: x + w_o attn(LN1 x), then + FFN(LN2 .) with GELU.
BlockActivations transformer_block(const Tensor& x, const BlockParams& params);

// Trainable scalars: 4 d^2 + 2 d d_ff + 4 d (two LayerNorms with scale and shift).
std::uint64_t count_params(const BlockParams& params);

}  // namespace memattn
