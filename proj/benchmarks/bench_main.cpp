#include <benchmark/benchmark.h>

#include <filesystem>

#include "memattn/bank_builder.hpp"
#include "memattn/encoder.hpp"
#include "memattn/memory_bank.hpp"

using namespace memattn;

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Prng prng(1);
  const Tensor a = init_gaussian({n, n}, prng, 1.0);
  const Tensor b = init_gaussian({n, n}, prng, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.counters["FLOPs"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_DenseAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Prng prng(2);
  const Tensor q = init_gaussian({n, 64}, prng, 1.0);
  const Tensor k = init_gaussian({n, 64}, prng, 1.0);
  const Tensor v = init_gaussian({n, 64}, prng, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(dense_attention(q, k, v, 4));
}
BENCHMARK(BM_DenseAttention)->Arg(64)->Arg(256);

// Temp bank of `count` tiny entries; only the fingerprint index matters here.
class KnnFixture : public benchmark::Fixture {
 public:
  void SetUp(const benchmark::State& state) override {
    path_ = std::filesystem::temp_directory_path() / "memattn_bench_knn.msb";
    const BankGeometry g{64, {0}, 1, 1, 1};
    BankWriter writer(path_, g);
    Prng prng(3);
    std::vector<float> fp(64);
    const std::vector<std::byte> payload(g.payload_bytes());
    for (std::int64_t i = 0; i < state.range(0); ++i) {
      for (float& v : fp) v = static_cast<float>(prng.next_uniform() - 0.5);
      writer.append_raw(fp, 0, SourceId{}, payload);
    }
    writer.finish();
    bank_ = std::make_unique<BankHandle>(path_);
    query_.assign(64, 0.1F);
  }
  void TearDown(const benchmark::State&) override {
    bank_.reset();
    std::filesystem::remove(path_);
  }

 protected:
  std::filesystem::path path_;
  std::unique_ptr<BankHandle> bank_;
  std::vector<float> query_;
};

BENCHMARK_DEFINE_F(KnnFixture, Search)(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(bank_->knn_search(query_, 7));
}
BENCHMARK_REGISTER_F(KnnFixture, Search)->Arg(1000)->Arg(10000);

class EncodeFixture : public benchmark::Fixture {
 public:
  void SetUp(const benchmark::State&) override {
    cfg_.seed = 42;
    weights_ = std::make_unique<EncoderWeights>(EncoderWeights::init(cfg_));
    path_ = std::filesystem::temp_directory_path() / "memattn_bench_enc.msb";
    Prng prng(4);
    std::vector<MemoryEntry> entries;
    for (int i = 0; i < 16; ++i) {
      const EncodeResult r = encode(make_synthetic_volume(cfg_.volume_dims, prng), *weights_);
      MemoryEntry e;
      e.fingerprint = r.fingerprint.values;
      for (std::uint32_t l : cfg_.memorizing_layers) {
        e.layers.push_back({r.activations[l].keys, r.activations[l].values});
      }
      entries.push_back(std::move(e));
    }
    write_bank(entries, bank_geometry_for(cfg_), path_);
    bank_ = std::make_unique<BankHandle>(path_);
    volume_ = make_synthetic_volume(cfg_.volume_dims, prng);
  }
  void TearDown(const benchmark::State&) override {
    bank_.reset();
    std::filesystem::remove(path_);
  }

 protected:
  EncoderConfig cfg_;
  std::unique_ptr<EncoderWeights> weights_;
  std::filesystem::path path_;
  std::unique_ptr<BankHandle> bank_;
  Volume volume_;
};

BENCHMARK_DEFINE_F(EncodeFixture, Dense)(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(encode(volume_, *weights_));
}
BENCHMARK_REGISTER_F(EncodeFixture, Dense)->Unit(benchmark::kMillisecond);

BENCHMARK_DEFINE_F(EncodeFixture, Memorizing)(benchmark::State& state) {
  BlockConfig cfg;
  cfg.k = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(encode(volume_, *weights_, bank_.get(), cfg));
}
BENCHMARK_REGISTER_F(EncodeFixture, Memorizing)
    ->Arg(1)->Arg(3)->Arg(5)->Arg(7)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
