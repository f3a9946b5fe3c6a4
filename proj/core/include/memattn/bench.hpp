#pragma once

/**
 * @file bench.hpp
 *
 * Efficiency accounting for dense vs memorizing encoders: analytic FLOPs and
 * parameters, paired wall-clock timing, cache/IO counters, and the k
 * ablation runner.
 *
 * FLOP convention: a multiply-accumulate is 2 FLOPs and only matrix products
 * are counted (patch projection, Q/K/V/O projections, FFN, attention scores
 * and mixing). LayerNorm, softmax, GELU, residual adds and the fusion sum are
 * excluded. "Parametric" FLOPs cover the weights and local attention and do
 * not depend on k; "total" adds 2 * (2 * n * n_mem * d_model) per retrieved
 * memory per memorizing layer.
 */

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "memattn/encoder.hpp"
#include "memattn/memory_attention.hpp"
#include "memattn/memory_bank.hpp"

namespace memattn {

enum class BenchMode { Dense, Memorizing };

std::string_view to_string(BenchMode mode) noexcept;
BenchMode parse_bench_mode(std::string_view text);

struct FlopCount {
  std::uint64_t parametric = 0;
  std::uint64_t total = 0;
};

// One block over n tokens attending `memories` retrieved entries of
// n_mem tokens each.
FlopCount count_block_flops(std::uint64_t n_tokens, std::uint64_t d_model,
                            std::uint64_t d_ff, std::uint64_t n_mem_tokens,
                            std::uint64_t memories);

// Whole encoder; block_cfg.k memories per memorizing layer.
FlopCount count_flops(const EncoderConfig& cfg, const BlockConfig& block_cfg,
                      std::uint64_t n_mem_tokens);

struct LatencyStats {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;  // nearest-rank
  std::size_t samples = 0;
};

LatencyStats summarize_latencies(std::vector<double> samples_ms);

// Times `run` with a monotonic clock; warmup calls are discarded.
LatencyStats time_inference(const std::function<void()>& run, std::size_t repetitions,
                            std::size_t warmup);

struct EfficiencyReport {
  BenchMode mode = BenchMode::Dense;
  std::size_t k = 0;
  LatencyStats latency;
  std::uint64_t parametric_flops = 0;
  std::uint64_t total_flops_incl_memory = 0;
  std::uint64_t params = 0;
  std::uint64_t peak_cache_bytes = 0;
  std::uint64_t bytes_read = 0;
};

std::string to_json(const EfficiencyReport& report);
std::string to_json(const std::vector<EfficiencyReport>& reports);

// Trainable parameters of the encoder as run in `mode`.
std::uint64_t encoder_params(const EncoderWeights& weights, BenchMode mode,
                             const BlockConfig& block_cfg);

/**
 * Times encode() once per volume per repetition. Dense mode never touches
 * @p bank; memorizing mode requires it.
 */
EfficiencyReport run_efficiency(BenchMode mode, const EncoderWeights& weights,
                                std::span<const Volume> volumes, const MemoryStore* bank,
                                const BlockConfig& block_cfg, std::size_t repetitions,
                                std::size_t warmup);

/**
 * Dense and memorizing runs interleaved per volume and repetition, so both
 * modes see the same machine state. Returns {dense, memorizing}.
 */
std::pair<EfficiencyReport, EfficiencyReport> run_paired(
    const EncoderWeights& weights, std::span<const Volume> volumes, const MemoryStore& bank,
    const BlockConfig& block_cfg, std::size_t repetitions, std::size_t warmup);

// Hex prefix of SHA-256 over the little-endian bytes of all tensors in order.
std::string features_checksum(std::span<const Tensor> features);

// Shannon entropy (nats) of {R_L, R_1..R_k} normalized by their sum.
double fusion_entropy(const FusionWeights& weights);

struct AblationRow {
  std::size_t k = 0;
  std::string checksum;
  double mean_latency_ms = 0.0;
  double mean_fusion_entropy = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // sorted by k
  std::string dense_checksum;     // all-dense encoder, no bank
  std::string control_checksum;   // memorizing path with k = 0
};

/**
 * One row per distinct k (ascending) over identical inputs. Requires the bank
 * to hold at least max(k_values) entries.
 */
AblationResult run_ablation(std::vector<std::size_t> k_values,
                            const EncoderWeights& weights, std::span<const Volume> volumes,
                            const MemoryStore& bank, const BlockConfig& base_cfg,
                            std::size_t repetitions = 1);

// Header "k,checksum,mean_latency_ms,mean_fusion_entropy" then one row per k.
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace memattn
