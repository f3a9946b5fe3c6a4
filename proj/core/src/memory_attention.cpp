#include "memattn/memory_attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "memattn/errors.hpp"

namespace memattn {

std::string_view to_string(FusionMode mode) noexcept {
  switch (mode) {
    case FusionMode::NormalizedInverseDistance:
      return "normalized";
    case FusionMode::PaperLiteral:
      return "paper-literal";
  }
  return "unknown";
}

FusionMode parse_fusion_mode(std::string_view text) {
  if (text == "normalized" || text == "normalized-inverse-distance") {
    return FusionMode::NormalizedInverseDistance;
  }
  if (text == "paper-literal" || text == "literal") return FusionMode::PaperLiteral;
  throw ConfigError("unknown fusion mode '" + std::string(text) +
                    "' (expected normalized or paper-literal)");
}

void BlockConfig::validate() const {
  if (!(r_local >= 0.0 && r_local <= 1.0)) {
    throw ParameterError("r_local must lie in [0, 1], got " + std::to_string(r_local));
  }
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("distance epsilon must be positive, got " +
                         std::to_string(epsilon));
  }
}

Tensor memory_attention_single(const Tensor& q, const RetrievedMemory& memory,
                               std::size_t num_heads) {
  if (memory.keys.shape() != memory.values.shape()) {
    throw DimensionError("memory " + std::to_string(memory.entry_id) + " keys " +
                         shape_to_string(memory.keys.shape()) + " and values " +
                         shape_to_string(memory.values.shape()) + " differ");
  }
  return dense_attention(q, memory.keys, memory.values, num_heads);
}

FusionWeights compute_fusion_weights(std::span<const double> distances,
                                     const BlockConfig& cfg) {
  cfg.validate();
  FusionWeights w;
  w.r_local = cfg.r_local;
  w.distances.reserve(distances.size());
  for (double d : distances) {
    if (!(d >= 0.0) || !std::isfinite(d)) {
      throw ParameterError("retrieval distance must be finite and non-negative, got " +
                           std::to_string(d));
    }
    w.distances.push_back(std::max(d, cfg.epsilon));
  }
  if (w.distances.empty()) return w;

  w.r_mem.resize(w.distances.size());
  switch (cfg.fusion_mode) {
    case FusionMode::NormalizedInverseDistance: {
      double inv_total = 0.0;
      for (double d : w.distances) inv_total += 1.0 / d;
      const double share = 1.0 - cfg.r_local;
      for (std::size_t i = 0; i < w.distances.size(); ++i) {
        w.r_mem[i] = share * (1.0 / w.distances[i]) / inv_total;
      }
      break;
    }
    case FusionMode::PaperLiteral: {
      if (cfg.r_local == 0.0) {
        throw ParameterError("paper-literal fusion is undefined for r_local = 0");
      }
      double denom = 0.0;
      for (double d : w.distances) denom += cfg.r_local / d;
      for (std::size_t i = 0; i < w.distances.size(); ++i) {
        w.r_mem[i] = w.distances[i] / denom;
      }
      break;
    }
  }
  return w;
}

Tensor fuse_attention(const Tensor& local, const std::vector<RetrievedMemory>& memories,
                      const Tensor& q, const BlockConfig& cfg, std::size_t num_heads,
                      FusionWeights* weights_out) {
  if (memories.empty()) {
    if (weights_out != nullptr) {
      cfg.validate();
      *weights_out = FusionWeights{cfg.r_local, {}, {}};
    }
    return local;
  }

  std::vector<double> distances;
  distances.reserve(memories.size());
  for (const auto& m : memories) distances.push_back(m.distance);
  FusionWeights weights = compute_fusion_weights(distances, cfg);

  std::vector<double> acc(local.size());
  {
    const auto src = local.data();
    for (std::size_t e = 0; e < acc.size(); ++e) acc[e] = weights.r_local * src[e];
  }
  for (std::size_t i = 0; i < memories.size(); ++i) {
    const Tensor mem_out = memory_attention_single(q, memories[i], num_heads);
    if (mem_out.shape() != local.shape()) {
      throw DimensionError("memory attention output " + shape_to_string(mem_out.shape()) +
                           " does not match local attention " +
                           shape_to_string(local.shape()));
    }
    const auto src = mem_out.data();
    const double r = weights.r_mem[i];
    for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += r * src[e];
  }

  Tensor fused(local.shape());
  auto dst = fused.data();
  for (std::size_t e = 0; e < acc.size(); ++e) dst[e] = static_cast<float>(acc[e]);
  if (weights_out != nullptr) *weights_out = std::move(weights);
  return fused;
}

void check_bank_compatible(const BankGeometry& bank, std::size_t d_model,
                           std::size_t num_heads, std::uint32_t layer_id,
                           std::size_t fingerprint_dim) {
  const bool ok = bank.d_model == d_model && bank.num_heads == num_heads &&
                  bank.fingerprint_dim == fingerprint_dim && bank.layer_slot(layer_id) >= 0;
  if (!ok) {
    throw BankIncompatibleError(
        "bank geometry " + bank.describe() + " cannot serve block {layer=" +
        std::to_string(layer_id) + ", d_model=" + std::to_string(d_model) +
        ", num_heads=" + std::to_string(num_heads) +
        ", fingerprint_dim=" + std::to_string(fingerprint_dim) + "}");
  }
}

BlockActivations memorizing_block_forward(const Tensor& x, const BlockParams& params,
                                          const MemoryStore* bank, std::uint32_t layer_id,
                                          std::span<const float> fingerprint,
                                          const BlockConfig& cfg, RetrievalTrace* trace) {
  cfg.validate();
  if (trace != nullptr) *trace = RetrievalTrace{layer_id, {}, {cfg.r_local, {}, {}}};
  if (bank == nullptr || cfg.k == 0 || bank->entry_count() == 0) {
    return transformer_block(x, params);
  }
  check_bank_compatible(bank->geometry(), params.d_model(), params.attn.num_heads,
                        layer_id, fingerprint.size());

  auto [q, k, v] = project_qkv(layer_norm(x, params.norm1), params.attn);
  const std::size_t heads = params.attn.num_heads;
  Tensor local = dense_attention(q, k, v, heads);

  const std::vector<Neighbor> neighbors = bank->knn_search(fingerprint, cfg.k);
  std::vector<RetrievedMemory> memories;
  memories.reserve(neighbors.size());
  for (const Neighbor& n : neighbors) {
    LayerKV kv;
    try {
      kv = bank->fetch_payload(n.entry_id, layer_id);
    } catch (const Error& e) {
      throw RetrievalError(n.entry_id, e.what());
    }
    memories.push_back({n.entry_id, n.distance, std::move(kv.keys), std::move(kv.values)});
  }

  FusionWeights weights;
  Tensor fused = fuse_attention(local, memories, q, cfg, heads, &weights);
  Tensor out = block_tail(x, fused, params);
  if (trace != nullptr) {
    trace->neighbors = neighbors;
    trace->weights = std::move(weights);
  }
  return {std::move(q), std::move(k), std::move(v), std::move(out)};
}

std::uint64_t count_params(const MemorizingBlock& block) {
  return count_params(block.params);
}

}  // namespace memattn
