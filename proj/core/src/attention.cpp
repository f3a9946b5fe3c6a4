#include "memattn/attention.hpp"

#include <cmath>

#include "memattn/errors.hpp"

namespace memattn {

namespace {

void require_square(const Tensor& w, std::size_t d, const char* name) {
  if (w.rank() != 2 || w.rows() != d || w.cols() != d) {
    throw DimensionError(std::string(name) + " must be [" + std::to_string(d) +
                         "x" + std::to_string(d) + "], got " +
                         shape_to_string(w.shape()));
  }
}

void require_vector(const Tensor& t, std::size_t d, const char* name) {
  if (t.rank() != 2 || t.rows() != 1 || t.cols() != d) {
    throw DimensionError(std::string(name) + " must be [1x" + std::to_string(d) +
                         "], got " + shape_to_string(t.shape()));
  }
}

NormParams unit_norm(std::size_t d) {
  Tensor gamma({1, d});
  for (float& v : gamma.data()) v = 1.0F;
  return {std::move(gamma), Tensor({1, d})};
}

}  // namespace

BlockParams BlockParams::init(std::size_t d_model, std::size_t d_ff,
                              std::size_t num_heads, Prng& prng) {
  if (num_heads == 0 || d_model % num_heads != 0) {
    throw DimensionError("d_model " + std::to_string(d_model) +
                         " is not divisible by num_heads " +
                         std::to_string(num_heads));
  }
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double out_std = 1.0 / std::sqrt(static_cast<double>(d_ff));
  BlockParams p;
  p.attn.num_heads = num_heads;
  p.attn.w_q = init_gaussian({d_model, d_model}, prng, attn_std);
  p.attn.w_k = init_gaussian({d_model, d_model}, prng, attn_std);
  p.attn.w_v = init_gaussian({d_model, d_model}, prng, attn_std);
  p.attn.w_o = init_gaussian({d_model, d_model}, prng, attn_std);
  p.ffn.w1 = init_gaussian({d_model, d_ff}, prng, attn_std);
  p.ffn.w2 = init_gaussian({d_ff, d_model}, prng, out_std);
  p.norm1 = unit_norm(d_model);
  p.norm2 = unit_norm(d_model);
  return p;
}

BlockParams BlockParams::zeros(std::size_t d_model, std::size_t d_ff,
                               std::size_t num_heads) {
  if (num_heads == 0 || d_model % num_heads != 0) {
    throw DimensionError("d_model " + std::to_string(d_model) +
                         " is not divisible by num_heads " +
                         std::to_string(num_heads));
  }
  BlockParams p;
  p.attn.num_heads = num_heads;
  p.attn.w_q = Tensor({d_model, d_model});
  p.attn.w_k = Tensor({d_model, d_model});
  p.attn.w_v = Tensor({d_model, d_model});
  p.attn.w_o = Tensor({d_model, d_model});
  p.ffn.w1 = Tensor({d_model, d_ff});
  p.ffn.w2 = Tensor({d_ff, d_model});
  p.norm1 = {Tensor({1, d_model}), Tensor({1, d_model})};
  p.norm2 = {Tensor({1, d_model}), Tensor({1, d_model})};
  return p;
}

void BlockParams::validate() const {
  require_matrix(attn.w_q, "w_q");
  const std::size_t d = attn.w_q.rows();
  if (attn.num_heads == 0 || d % attn.num_heads != 0) {
    throw DimensionError("d_model " + std::to_string(d) +
                         " is not divisible by num_heads " +
                         std::to_string(attn.num_heads));
  }
  require_square(attn.w_q, d, "w_q");
  require_square(attn.w_k, d, "w_k");
  require_square(attn.w_v, d, "w_v");
  require_square(attn.w_o, d, "w_o");
  require_matrix(ffn.w1, "w1");
  require_matrix(ffn.w2, "w2");
  if (ffn.w1.rows() != d || ffn.w2.cols() != d || ffn.w1.cols() != ffn.w2.rows()) {
    throw DimensionError("FFN shapes " + shape_to_string(ffn.w1.shape()) + " / " +
                         shape_to_string(ffn.w2.shape()) +
                         " inconsistent with d_model " + std::to_string(d));
  }
  require_vector(norm1.gamma, d, "norm1.gamma");
  require_vector(norm1.beta, d, "norm1.beta");
  require_vector(norm2.gamma, d, "norm2.gamma");
  require_vector(norm2.beta, d, "norm2.beta");
}

Qkv project_qkv(const Tensor& x, const AttentionParams& params) {
  require_matrix(x, "block input");
  if (x.cols() != params.d_model()) {
    throw DimensionError("input width " + std::to_string(x.cols()) +
                         " does not match d_model " +
                         std::to_string(params.d_model()));
  }
  return {matmul(x, params.w_q), matmul(x, params.w_k), matmul(x, params.w_v)};
}

Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       std::size_t num_heads) {
  require_matrix(q, "queries");
  require_matrix(k, "keys");
  require_matrix(v, "values");
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention shape mismatch: Q " + shape_to_string(q.shape()) +
                         ", K " + shape_to_string(k.shape()) + ", V " +
                         shape_to_string(v.shape()));
  }
  if (num_heads == 0 || d % num_heads != 0) {
    throw DimensionError("d_model " + std::to_string(d) +
                         " is not divisible by num_heads " + std::to_string(num_heads));
  }
  const std::size_t head_dim = d / num_heads;
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(head_dim));

  Tensor out({q.rows(), d});
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t begin = h * head_dim;
    Tensor scores = matmul_transposed(slice_cols(q, begin, head_dim),
                                      slice_cols(k, begin, head_dim));
    for (float& s : scores.data()) s *= inv_sqrt;
    assign_cols(out, matmul(softmax_rows(scores), slice_cols(v, begin, head_dim)),
                begin);
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const NormParams& norm) {
  require_matrix(x, "layer_norm input");
  const std::size_t d = x.cols();
  if (norm.gamma.size() != d || norm.beta.size() != d) {
    throw DimensionError("layer_norm width " + std::to_string(d) +
                         " does not match norm parameters " +
                         shape_to_string(norm.gamma.shape()));
  }
  Tensor out(x.shape());
  const auto gamma = norm.gamma.data();
  const auto beta = norm.beta.data();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      dst[j] = static_cast<float>((in[j] - mean) * inv_std) * gamma[j] + beta[j];
    }
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.data()) {
    v = 0.5F * v * (1.0F + std::erf(v * 0.70710678118654752F));
  }
  return out;
}

Tensor block_tail(const Tensor& x, const Tensor& attention_output,
                  const BlockParams& params) {
  Tensor mid = add(x, matmul(attention_output, params.attn.w_o));
  Tensor hidden = gelu(matmul(layer_norm(mid, params.norm2), params.ffn.w1));
  return add(mid, matmul(hidden, params.ffn.w2));
}

BlockActivations transformer_block(const Tensor& x, const BlockParams& params) {
  auto [q, k, v] = project_qkv(layer_norm(x, params.norm1), params.attn);
  Tensor local = dense_attention(q, k, v, params.attn.num_heads);
  Tensor out = block_tail(x, local, params);
  return {std::move(q), std::move(k), std::move(v), std::move(out)};
}

std::uint64_t count_params(const BlockParams& params) {
  return params.attn.w_q.size() + params.attn.w_k.size() + params.attn.w_v.size() +
         params.attn.w_o.size() + params.ffn.w1.size() + params.ffn.w2.size() +
         params.norm1.gamma.size() + params.norm1.beta.size() +
         params.norm2.gamma.size() + params.norm2.beta.size();
}

}  // namespace memattn
