#pragma once

/**
 * @file memory_attention.hpp
 *
 * Memorizing Transformer block: the local dense attention of a standard
 * block is combined with cross-attention against the top-k (key, value)
 * tuples retrieved from an external memory. The queries are shared between
 * the local and memory paths, so the block has exactly the parameters of a
 * dense block.
 *
 * Combined output (before w_o):
 *
 *     A_c = R_L * A_L + sum_{i=1..k} R_i * A_i
 *
 * where A_L is local attention, A_i attention over the i-th retrieved memory
 * and R_i is derived from its retrieval distance D_i (see FusionMode).
 */

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "memattn/attention.hpp"
#include "memattn/memory_bank.hpp"
#include "memattn/tensor.hpp"

namespace memattn {

enum class FusionMode {
  // R_i = (1 - R_L) * (1/D_i) / sum_j (1/D_j). R_L + sum R_i = 1.
  NormalizedInverseDistance,
  // R_i = D_i / sum_j (R_L / D_j), the ratio formula taken literally. Farther
  // memories get larger weights and weights may exceed 1.
  PaperLiteral,
};

std::string_view to_string(FusionMode mode) noexcept;
// Accepts "normalized" / "normalized-inverse-distance" and "paper-literal".
FusionMode parse_fusion_mode(std::string_view text);

inline constexpr double kDefaultLocalRatio = 0.3;
inline constexpr std::size_t kDefaultK = 3;
inline constexpr double kDefaultDistanceEpsilon = 1e-6;

struct BlockConfig {
  double r_local = kDefaultLocalRatio;
  std::size_t k = kDefaultK;
  FusionMode fusion_mode = FusionMode::NormalizedInverseDistance;
  double epsilon = kDefaultDistanceEpsilon;

  // Throws ParameterError unless 0 <= r_local <= 1 and epsilon > 0.
  void validate() const;
};

struct FusionWeights {
  double r_local = 0.0;
  std::vector<double> r_mem;      // one per retrieved memory
  std::vector<double> distances;  // clamped to >= epsilon
};

struct RetrievedMemory {
  std::uint64_t entry_id = 0;
  double distance = 0.0;
  Tensor keys, values;  // [n_mem_tokens x d_model], current layer
};

// What one memorizing layer retrieved and how it weighted it.
struct RetrievalTrace {
  std::uint32_t layer_id = 0;
  std::vector<Neighbor> neighbors;
  FusionWeights weights;
};

// Attention of the shared queries over one memory's keys/values, per head.
Tensor memory_attention_single(const Tensor& q, const RetrievedMemory& memory,
                               std::size_t num_heads);

/**
 * Resolves R_L and R_1..R_k from retrieval distances.
 *
 * Distances are clamped to at least cfg.epsilon first. An empty distance list
 * yields no memory weights; fuse_attention then bypasses fusion entirely.
 * PaperLiteral with r_local == 0 divides by zero and is rejected.
 */
FusionWeights compute_fusion_weights(std::span<const double> distances,
                                     const BlockConfig& cfg);

/**
 * A_c = R_L A_L + sum_i R_i A_i, accumulated per element in double.
 *
 * With no memories A_c is A_L unchanged (not R_L * A_L), so a memorizing
 * block that retrieves nothing is bitwise identical to a dense block.
 */
Tensor fuse_attention(const Tensor& local, const std::vector<RetrievedMemory>& memories,
                      const Tensor& q, const BlockConfig& cfg, std::size_t num_heads,
                      FusionWeights* weights_out = nullptr);

// Throws BankIncompatibleError unless the store can serve this block at
// layer_id with the given fingerprint width.
void check_bank_compatible(const BankGeometry& bank, std::size_t d_model,
                           std::size_t num_heads, std::uint32_t layer_id,
                           std::size_t fingerprint_dim);

/**
 * Forward pass of a memorizing block.
 *
 * Local path as in transformer_block; then the k nearest entries to
 * @p fingerprint are fetched from @p bank for @p layer_id, attended one by
 * one with the same queries, fused, and passed through the shared w_o and
 * FFN tail. A null bank, an empty bank or cfg.k == 0 reduce exactly to
 * transformer_block.
 */
BlockActivations memorizing_block_forward(const Tensor& x, const BlockParams& params,
                                          const MemoryStore* bank, std::uint32_t layer_id,
                                          std::span<const float> fingerprint,
                                          const BlockConfig& cfg,
                                          RetrievalTrace* trace = nullptr);

// A dense block's parameters plus memorizing hyperparameters. The
// hyperparameters are not trained, so the count matches the dense block.
struct MemorizingBlock {
  const BlockParams& params;
  BlockConfig cfg;
};

std::uint64_t count_params(const MemorizingBlock& block);

}  // namespace memattn
