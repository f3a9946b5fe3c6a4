#include "memattn/bench.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "memattn/errors.hpp"
#include "memattn/file_util.hpp"

namespace memattn {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

nlohmann::json report_json(const EfficiencyReport& r) {
  return {
      {"mode", std::string(to_string(r.mode))},
      {"k", r.k},
      {"latency_ms",
       {{"mean", r.latency.mean_ms},
        {"median", r.latency.median_ms},
        {"p95", r.latency.p95_ms},
        {"samples", r.latency.samples}}},
      {"parametric_flops", r.parametric_flops},
      {"total_flops_incl_memory", r.total_flops_incl_memory},
      {"params", r.params},
      {"peak_cache_bytes", r.peak_cache_bytes},
      {"bytes_read", r.bytes_read},
  };
}

std::size_t effective_k(const MemoryStore* bank, std::size_t k) {
  if (bank == nullptr) return 0;
  return static_cast<std::size_t>(std::min<std::uint64_t>(k, bank->entry_count()));
}

void fill_static_fields(EfficiencyReport& r, const EncoderWeights& weights,
                        const MemoryStore* bank, const BlockConfig& block_cfg) {
  BlockConfig effective = block_cfg;
  effective.k = r.mode == BenchMode::Dense ? 0 : effective_k(bank, block_cfg.k);
  r.k = effective.k;
  const std::uint64_t n_mem = bank != nullptr ? bank->geometry().n_tokens
                                              : weights.config.n_tokens();
  const FlopCount flops = count_flops(weights.config, effective, n_mem);
  r.parametric_flops = flops.parametric;
  r.total_flops_incl_memory = flops.total;
  r.params = encoder_params(weights, r.mode, block_cfg);
}

void fill_cache_fields(EfficiencyReport& r, const MemoryStore& bank) {
  const CacheStats s = bank.stats();
  r.peak_cache_bytes = s.peak_resident * bank.geometry().payload_bytes();
  r.bytes_read = s.bytes_read;
}

}  // namespace

std::string_view to_string(BenchMode mode) noexcept {
  return mode == BenchMode::Dense ? "dense" : "memorizing";
}

BenchMode parse_bench_mode(std::string_view text) {
  if (text == "dense") return BenchMode::Dense;
  if (text == "memorizing") return BenchMode::Memorizing;
  throw ConfigError("unknown bench mode '" + std::string(text) +
                    "' (expected dense or memorizing)");
}

FlopCount count_block_flops(std::uint64_t n_tokens, std::uint64_t d_model,
                            std::uint64_t d_ff, std::uint64_t n_mem_tokens,
                            std::uint64_t memories) {
  const std::uint64_t projections = 4 * (2 * n_tokens * d_model * d_model);
  const std::uint64_t ffn = 2 * (2 * n_tokens * d_model * d_ff);
  const std::uint64_t local = 2 * (2 * n_tokens * n_tokens * d_model);
  const std::uint64_t per_memory = 2 * (2 * n_tokens * n_mem_tokens * d_model);
  FlopCount f;
  f.parametric = projections + ffn + local;
  f.total = f.parametric + memories * per_memory;
  return f;
}

FlopCount count_flops(const EncoderConfig& cfg, const BlockConfig& block_cfg,
                      std::uint64_t n_mem_tokens) {
  cfg.validate();
  const std::uint64_t n = cfg.n_tokens();
  FlopCount f;
  f.parametric = 2 * n * cfg.patch_dim() * cfg.d_model;
  f.total = f.parametric;
  for (std::uint32_t layer = 0; layer < cfg.num_layers; ++layer) {
    const std::uint64_t memories = cfg.is_memorizing(layer) ? block_cfg.k : 0;
    const FlopCount b = count_block_flops(n, cfg.d_model, cfg.d_ff, n_mem_tokens, memories);
    f.parametric += b.parametric;
    f.total += b.total;
  }
  return f;
}

LatencyStats summarize_latencies(std::vector<double> samples_ms) {
  LatencyStats s;
  s.samples = samples_ms.size();
  if (samples_ms.empty()) return s;
  std::sort(samples_ms.begin(), samples_ms.end());
  const std::size_t n = samples_ms.size();
  s.mean_ms = std::accumulate(samples_ms.begin(), samples_ms.end(), 0.0) /
              static_cast<double>(n);
  s.median_ms = n % 2 == 1 ? samples_ms[n / 2]
                           : 0.5 * (samples_ms[n / 2 - 1] + samples_ms[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95_ms = samples_ms[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

LatencyStats time_inference(const std::function<void()>& run, std::size_t repetitions,
                            std::size_t warmup) {
  if (repetitions == 0) throw ParameterError("repetitions must be at least 1");
  for (std::size_t i = 0; i < warmup; ++i) run();
  std::vector<double> samples;
  samples.reserve(repetitions);
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto start = Clock::now();
    run();
    samples.push_back(elapsed_ms(start));
  }
  return summarize_latencies(std::move(samples));
}

std::string to_json(const EfficiencyReport& report) { return report_json(report).dump(2); }

std::string to_json(const std::vector<EfficiencyReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  return arr.dump(2);
}

std::uint64_t encoder_params(const EncoderWeights& weights, BenchMode mode,
                             const BlockConfig& block_cfg) {
  std::uint64_t total = weights.patch_proj.size() + weights.patch_bias.size();
  for (std::uint32_t layer = 0; layer < weights.blocks.size(); ++layer) {
    const BlockParams& p = weights.blocks[layer];
    if (mode == BenchMode::Memorizing && weights.config.is_memorizing(layer)) {
      total += count_params(MemorizingBlock{p, block_cfg});
    } else {
      total += count_params(p);
    }
  }
  return total;
}

EfficiencyReport run_efficiency(BenchMode mode, const EncoderWeights& weights,
                                std::span<const Volume> volumes, const MemoryStore* bank,
                                const BlockConfig& block_cfg, std::size_t repetitions,
                                std::size_t warmup) {
  if (repetitions == 0) throw ParameterError("repetitions must be at least 1");
  if (volumes.empty()) throw ParameterError("benchmark needs at least one volume");
  if (mode == BenchMode::Memorizing && bank == nullptr) {
    throw ConfigError("memorizing benchmark needs a bank");
  }
  const MemoryStore* store = mode == BenchMode::Dense ? nullptr : bank;

  EfficiencyReport r;
  r.mode = mode;
  fill_static_fields(r, weights, store, block_cfg);

  for (std::size_t i = 0; i < warmup; ++i) {
    for (const Volume& v : volumes) (void)encode(v, weights, store, block_cfg);
  }
  std::vector<double> samples;
  samples.reserve(repetitions * volumes.size());
  for (std::size_t i = 0; i < repetitions; ++i) {
    for (const Volume& v : volumes) {
      const auto start = Clock::now();
      (void)encode(v, weights, store, block_cfg);
      samples.push_back(elapsed_ms(start));
    }
  }
  r.latency = summarize_latencies(std::move(samples));
  if (store != nullptr) fill_cache_fields(r, *store);
  return r;
}

std::pair<EfficiencyReport, EfficiencyReport> run_paired(
    const EncoderWeights& weights, std::span<const Volume> volumes, const MemoryStore& bank,
    const BlockConfig& block_cfg, std::size_t repetitions, std::size_t warmup) {
  if (repetitions == 0) throw ParameterError("repetitions must be at least 1");
  if (volumes.empty()) throw ParameterError("benchmark needs at least one volume");

  EfficiencyReport dense, mem;
  dense.mode = BenchMode::Dense;
  mem.mode = BenchMode::Memorizing;
  fill_static_fields(dense, weights, nullptr, block_cfg);
  fill_static_fields(mem, weights, &bank, block_cfg);

  for (std::size_t i = 0; i < warmup; ++i) {
    for (const Volume& v : volumes) {
      (void)encode(v, weights, nullptr, block_cfg);
      (void)encode(v, weights, &bank, block_cfg);
    }
  }
  std::vector<double> dense_ms, mem_ms;
  for (std::size_t i = 0; i < repetitions; ++i) {
    for (const Volume& v : volumes) {
      // Alternate which mode goes first to cancel ordering effects.
      const bool dense_first = (i % 2) == 0;
      for (int pass = 0; pass < 2; ++pass) {
        const bool run_dense = (pass == 0) == dense_first;
        const auto start = Clock::now();
        (void)encode(v, weights, run_dense ? nullptr : &bank, block_cfg);
        (run_dense ? dense_ms : mem_ms).push_back(elapsed_ms(start));
      }
    }
  }
  dense.latency = summarize_latencies(std::move(dense_ms));
  mem.latency = summarize_latencies(std::move(mem_ms));
  fill_cache_fields(mem, bank);
  return {dense, mem};
}

std::string features_checksum(std::span<const Tensor> features) {
  std::vector<std::byte> bytes;
  for (const Tensor& t : features) {
    for (float v : t.data()) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::byte>(u >> (8 * i)));
    }
  }
  const auto digest = sha256(bytes);
  return to_hex(std::span(digest).first(8));
}

double fusion_entropy(const FusionWeights& weights) {
  double total = weights.r_local;
  for (double r : weights.r_mem) total += r;
  if (!(total > 0.0)) return 0.0;
  double h = 0.0;
  const auto term = [&](double w) {
    const double p = w / total;
    if (p > 0.0) h -= p * std::log(p);
  };
  term(weights.r_local);
  for (double r : weights.r_mem) term(r);
  return h;
}

AblationResult run_ablation(std::vector<std::size_t> k_values,
                            const EncoderWeights& weights, std::span<const Volume> volumes,
                            const MemoryStore& bank, const BlockConfig& base_cfg,
                            std::size_t repetitions) {
  if (repetitions == 0) throw ParameterError("repetitions must be at least 1");
  if (volumes.empty()) throw ParameterError("ablation needs at least one volume");
  std::sort(k_values.begin(), k_values.end());
  k_values.erase(std::unique(k_values.begin(), k_values.end()), k_values.end());
  if (!k_values.empty() && bank.entry_count() < k_values.back()) {
    throw ParameterError("bank holds " + std::to_string(bank.entry_count()) +
                         " entries, fewer than max k " + std::to_string(k_values.back()));
  }

  const auto run_all = [&](const MemoryStore* store, std::size_t k, double* latency_ms,
                           double* entropy) {
    BlockConfig cfg = base_cfg;
    cfg.k = k;
    std::vector<Tensor> outputs;
    std::vector<double> samples;
    double entropy_sum = 0.0;
    std::size_t entropy_count = 0;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      for (const Volume& v : volumes) {
        const auto start = Clock::now();
        EncodeResult r = encode(v, weights, store, cfg);
        samples.push_back(elapsed_ms(start));
        if (rep == 0) {
          for (const auto& t : r.traces) {
            entropy_sum += fusion_entropy(t.weights);
            ++entropy_count;
          }
          outputs.push_back(std::move(r.features));
        }
      }
    }
    if (latency_ms != nullptr) *latency_ms = summarize_latencies(samples).mean_ms;
    if (entropy != nullptr) {
      *entropy = entropy_count == 0 ? 0.0 : entropy_sum / static_cast<double>(entropy_count);
    }
    return features_checksum(outputs);
  };

  AblationResult result;
  for (std::size_t k : k_values) {
    AblationRow row;
    row.k = k;
    row.checksum = run_all(&bank, k, &row.mean_latency_ms, &row.mean_fusion_entropy);
    result.rows.push_back(std::move(row));
  }
  result.dense_checksum = run_all(nullptr, 0, nullptr, nullptr);
  result.control_checksum = run_all(&bank, 0, nullptr, nullptr);
  return result;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "k,checksum,mean_latency_ms,mean_fusion_entropy\n";
  for (const AblationRow& r : rows) {
    out << r.k << ',' << r.checksum << ',' << std::fixed << std::setprecision(6)
        << r.mean_latency_ms << ',' << std::setprecision(9) << r.mean_fusion_entropy
        << '\n';
    out.unsetf(std::ios::floatfield);
  }
  return out.str();
}

}  // namespace memattn
