#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <list>
#include <numeric>
#include <random>
#include <thread>

#include "memattn/errors.hpp"
#include "memattn/memory_bank.hpp"
#include "test_util.hpp"

using namespace memattn;
using memattn::testing::bitwise_equal;
using memattn::testing::random_tensor;
using memattn::testing::TempDir;

namespace {

BankGeometry small_geometry(std::uint32_t fp_dim = 2) {
  return BankGeometry{fp_dim, {1, 3}, 3, 2, 4};
}

MemoryEntry random_entry(const BankGeometry& g, std::mt19937_64& rng, std::uint32_t class_id) {
  MemoryEntry e;
  std::normal_distribution<float> dist;
  e.fingerprint.resize(g.fingerprint_dim);
  for (float& v : e.fingerprint) v = dist(rng);
  for (std::size_t l = 0; l < g.layer_ids.size(); ++l) {
    e.layers.push_back({random_tensor({g.n_tokens, g.d_model}, rng),
                        random_tensor({g.n_tokens, g.d_model}, rng)});
  }
  e.class_id = class_id;
  for (auto& b : e.source_id) b = static_cast<std::uint8_t>(rng());
  return e;
}

std::vector<MemoryEntry> random_entries(const BankGeometry& g, std::size_t n,
                                        std::uint64_t seed, std::uint32_t class_id = 0) {
  std::mt19937_64 rng(seed);
  std::vector<MemoryEntry> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_entry(g, rng, class_id));
  return out;
}

void corrupt_byte(const std::filesystem::path& path, std::uint64_t offset) {
  std::fstream io(path, std::ios::in | std::ios::out | std::ios::binary);
  io.seekg(static_cast<std::streamoff>(offset));
  const char c = static_cast<char>(io.get());
  io.seekp(static_cast<std::streamoff>(offset));
  io.put(static_cast<char>(c ^ 0x5a));
}

}  // namespace

TEST(BankGeometryTest, SizesFollowLayout) {
  const BankGeometry g = small_geometry();
  EXPECT_EQ(g.header_bytes(), 44U + 8U);
  EXPECT_EQ(g.index_row_bytes(), 48U);
  EXPECT_EQ(g.payload_bytes(), 2U * 2U * 3U * 4U * 4U);
  EXPECT_EQ(g.layer_slot(3), 1);
  EXPECT_EQ(g.layer_slot(2), -1);
  EXPECT_THROW((BankGeometry{2, {}, 3, 2, 4}.validate()), SchemaError);
  EXPECT_THROW((BankGeometry{2, {1, 1}, 3, 2, 4}.validate()), SchemaError);
  EXPECT_THROW((BankGeometry{0, {1}, 3, 2, 4}.validate()), SchemaError);
}

TEST(BankFileTest, EmptyBankOpensAndReturnsNoNeighbors) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank({}, g, dir / "empty.msb");
  const BankHandle bank(dir / "empty.msb");
  EXPECT_EQ(bank.entry_count(), 0U);
  EXPECT_EQ(std::filesystem::file_size(dir / "empty.msb"), g.header_bytes());
  EXPECT_TRUE(bank.knn_search(std::vector<float>{1, 0}, 3).empty());
}

TEST(BankFileTest, RoundTripPreservesEverything) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry(5);
  const auto entries = random_entries(g, 7, 1, 4);
  write_bank(entries, g, dir / "b.msb");
  const BankHandle bank(dir / "b.msb");
  EXPECT_EQ(bank.geometry(), g);
  EXPECT_EQ(bank.header().version, kBankVersion);
  ASSERT_EQ(bank.entry_count(), entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const IndexRow row = bank.index_row(i);
    EXPECT_TRUE(std::equal(row.fingerprint.begin(), row.fingerprint.end(),
                           entries[i].fingerprint.begin()));
    EXPECT_EQ(row.class_id, 4U);
    EXPECT_EQ(row.source_id, entries[i].source_id);
    EXPECT_EQ(row.length, g.payload_bytes());
    for (std::size_t l = 0; l < g.layer_ids.size(); ++l) {
      const LayerKV kv = bank.fetch_payload(i, g.layer_ids[l]);
      EXPECT_TRUE(bitwise_equal(kv.keys, entries[i].layers[l].keys));
      EXPECT_TRUE(bitwise_equal(kv.values, entries[i].layers[l].values));
    }
  }
  EXPECT_THROW(bank.fetch_payload(0, 2), ParameterError);
  EXPECT_THROW(bank.fetch_payload(7, 1), ParameterError);
}

TEST(BankFileTest, FileSizeIsExact) {
  TempDir dir("bank");
  for (std::uint32_t fp : {1U, 3U, 16U}) {
    const BankGeometry g = small_geometry(fp);
    for (std::size_t n : {1, 2, 11}) {
      write_bank(random_entries(g, n, n + fp), g, dir / "b.msb");
      EXPECT_EQ(std::filesystem::file_size(dir / "b.msb"), g.file_bytes(n));
      EXPECT_EQ(g.file_bytes(n),
                44 + 4 * 2 + n * (4 * fp + 40) + n * 2 * 2 * 3 * 4 * 4);
    }
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "b.msb.tmp"));
  EXPECT_FALSE(std::filesystem::exists(dir / "b.msb.spool"));
}

TEST(BankFileTest, WriterRejectsMismatchedEntries) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  std::mt19937_64 rng(2);
  MemoryEntry e = random_entry(g, rng, 0);
  e.fingerprint.push_back(0.0F);
  EXPECT_THROW(write_bank(std::vector<MemoryEntry>{e}, g, dir / "b.msb"), SchemaError);
  e = random_entry(g, rng, 0);
  e.layers.pop_back();
  EXPECT_THROW(write_bank(std::vector<MemoryEntry>{e}, g, dir / "b.msb"), SchemaError);
  EXPECT_FALSE(std::filesystem::exists(dir / "b.msb"));
}

TEST(BankFileTest, OpenReadsOnlyHeaderAndIndex) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry(4);
  write_bank(random_entries(g, 20, 3), g, dir / "b.msb");
  const BankHandle bank(dir / "b.msb");
  EXPECT_EQ(bank.stats().bytes_read, g.header_bytes() + 20 * g.index_row_bytes());
  bank.knn_search(std::vector<float>(4, 0.0F), 5);
  EXPECT_EQ(bank.stats().bytes_read, g.header_bytes() + 20 * g.index_row_bytes());
  bank.fetch_entry(11);
  EXPECT_EQ(bank.stats().bytes_read,
            g.header_bytes() + 20 * g.index_row_bytes() + g.payload_bytes());
}

TEST(BankFileTest, BadMagicNamesFile) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 2, 4), g, dir / "b.msb");
  corrupt_byte(dir / "b.msb", 0);
  try {
    BankHandle bank(dir / "b.msb");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find((dir / "b.msb").string()), std::string::npos);
  }
}

TEST(BankFileTest, TruncatedIndexIsCorruption) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 3, 5), g, dir / "b.msb");
  std::filesystem::resize_file(dir / "b.msb", g.header_bytes() + g.index_row_bytes() + 7);
  EXPECT_THROW(BankHandle(dir / "b.msb"), CorruptionError);
}

TEST(BankFileTest, MissingFileIsIoError) {
  TempDir dir("bank");
  EXPECT_THROW(BankHandle(dir / "nope.msb"), IoError);
  write_bank({}, small_geometry(), dir / "b.msb");
  EXPECT_THROW(BankHandle(dir / "b.msb", 0), ParameterError);
}

TEST(BankFileTest, PayloadCorruptionIsDetectedByCrc) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 3, 6), g, dir / "b.msb");
  const std::uint64_t payload1 = g.header_bytes() + 3 * g.index_row_bytes() + g.payload_bytes();
  corrupt_byte(dir / "b.msb", payload1 + 17);
  const BankHandle bank(dir / "b.msb");
  EXPECT_NO_THROW(bank.fetch_entry(0));
  try {
    bank.fetch_entry(1);
    FAIL() << "expected CorruptionError";
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC mismatch in payload of entry 1"),
              std::string::npos);
  }
  EXPECT_NO_THROW(bank.fetch_entry(2));
}

TEST(KnnSearchTest, HandExample) {
  const std::vector<float> fps{1, 0, 0, 1, 0.7071F, 0.7071F};
  const std::vector<float> q{1, 0};
  const auto result = knn_linear_scan(fps, 2, q, 2);
  ASSERT_EQ(result.size(), 2U);
  EXPECT_EQ(result[0].entry_id, 0U);
  EXPECT_EQ(result[0].distance, 0.0);
  EXPECT_EQ(result[1].entry_id, 2U);
  EXPECT_NEAR(result[1].distance, 0.7654, 1e-4);
}

TEST(KnnSearchTest, ZeroKAndOversizedK) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 4, 7), g, dir / "b.msb");
  const BankHandle bank(dir / "b.msb");
  const std::vector<float> q{0.1F, 0.2F};
  EXPECT_TRUE(bank.knn_search(q, 0).empty());
  const auto all = knn_search(bank, q, 10);
  ASSERT_EQ(all.size(), 4U);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_LE(all[i - 1].distance, all[i].distance);
  EXPECT_THROW(bank.knn_search(std::vector<float>{1, 2, 3}, 1), DimensionError);
}

TEST(KnnSearchTest, MatchesBruteForceOracle) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> dim(1, 16), count(1, 60), kk(0, 70);
  std::normal_distribution<float> val;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = dim(rng), n = count(rng), k = kk(rng);
    std::vector<float> fps(n * d), q(d);
    for (float& v : fps) v = val(rng);
    for (float& v : q) v = val(rng);
    if (trial % 4 == 0) std::copy_n(fps.begin(), d, fps.begin() + (n - 1) * d);  // a tie
    std::vector<std::pair<double, std::uint64_t>> oracle;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += std::pow(double(fps[i * d + c]) - q[c], 2);
      oracle.emplace_back(std::sqrt(s), i);
    }
    std::sort(oracle.begin(), oracle.end());
    const auto got = knn_linear_scan(fps, d, q, k, 100);
    ASSERT_EQ(got.size(), std::min(k, n));
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].entry_id, oracle[i].second + 100);
      EXPECT_NEAR(got[i].distance, oracle[i].first, 1e-9);
    }
  }
}

TEST(KnnSearchTest, PermutingEntriesPermutesIds) {
  std::mt19937_64 rng(9);
  const std::size_t n = 30, d = 6;
  std::vector<float> fps(n * d);
  std::normal_distribution<float> val;
  for (float& v : fps) v = val(rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<float> permuted(n * d);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(fps.begin() + perm[i] * d, d, permuted.begin() + i * d);
  const std::vector<float> q(fps.begin(), fps.begin() + d);
  const auto a = knn_linear_scan(fps, d, q, 5);
  const auto b = knn_linear_scan(permuted, d, q, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(perm[b[i].entry_id], a[i].entry_id);
    EXPECT_EQ(a[i].distance, b[i].distance);
  }
}

TEST(BankCacheTest, SecondFetchIsAHit) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 3, 10), g, dir / "b.msb");
  const BankHandle bank(dir / "b.msb");
  const auto first = bank.fetch_entry(1);
  const std::uint64_t bytes = bank.stats().bytes_read;
  const auto second = bank.fetch_entry(1);
  EXPECT_EQ(first, second);
  const CacheStats s = bank.stats();
  EXPECT_EQ(s.cache_hits, 1U);
  EXPECT_EQ(s.cache_misses, 1U);
  EXPECT_EQ(s.bytes_read, bytes);
  EXPECT_EQ(s.resident, 1U);
}

TEST(BankCacheTest, LeastRecentlyUsedIsEvicted) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 3, 11), g, dir / "b.msb");
  const BankHandle bank(dir / "b.msb", 2);
  for (std::uint64_t id : {0, 1, 2, 0}) bank.fetch_entry(id);
  EXPECT_EQ(bank.resident_entries(), (std::vector<std::uint64_t>{0, 2}));
  const CacheStats s = bank.stats();
  EXPECT_EQ(s.cache_misses, 4U);
  EXPECT_EQ(s.cache_hits, 0U);
  EXPECT_EQ(s.peak_resident, 2U);
}

TEST(BankCacheTest, RandomAccessMatchesLruModel) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 12, 12), g, dir / "b.msb");
  std::mt19937_64 rng(13);
  for (std::size_t cap : {1, 3, 5, 12}) {
    const BankHandle bank(dir / "b.msb", cap);
    std::list<std::uint64_t> model;
    std::uint64_t hits = 0;
    std::uniform_int_distribution<std::uint64_t> pick(0, 11);
    for (int step = 0; step < 400; ++step) {
      const std::uint64_t id = pick(rng);
      bank.fetch_entry(id);
      const auto it = std::find(model.begin(), model.end(), id);
      if (it != model.end()) {
        ++hits;
        model.erase(it);
      }
      model.push_front(id);
      if (model.size() > cap) model.pop_back();
      ASSERT_LE(bank.stats().resident, cap);
    }
    EXPECT_EQ(bank.resident_entries(), std::vector<std::uint64_t>(model.begin(), model.end()));
    const CacheStats s = bank.stats();
    EXPECT_EQ(s.cache_hits, hits);
    EXPECT_EQ(s.cache_hits + s.cache_misses, 400U);
    EXPECT_LE(s.peak_resident, cap);
    EXPECT_EQ(s.bytes_read, g.header_bytes() + 12 * g.index_row_bytes() +
                                s.cache_misses * g.payload_bytes());
  }
}

TEST(BankCacheTest, ConcurrentFetchesAgree) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  const auto entries = random_entries(g, 16, 14);
  write_bank(entries, g, dir / "b.msb");
  const BankHandle bank(dir / "b.msb", 4);
  std::vector<std::thread> threads;
  std::atomic<int> mismatches{0};
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 200; ++i) {
        const std::uint64_t id = static_cast<std::uint64_t>((i * 7 + t * 3) % 16);
        if (!bitwise_equal(bank.fetch_payload(id, 3).values, entries[id].layers[1].values))
          ++mismatches;
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(mismatches.load(), 0);
  EXPECT_EQ(bank.stats().cache_hits + bank.stats().cache_misses, 800U);
}

TEST(MergeBanksTest, ConcatenatesInOrder) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry(3);
  const auto a = random_entries(g, 4, 15, 1), b = random_entries(g, 0, 16, 2),
             c = random_entries(g, 3, 17, 3);
  write_bank(a, g, dir / "a.msb");
  write_bank(b, g, dir / "b.msb");
  write_bank(c, g, dir / "c.msb");
  merge_banks({dir / "a.msb", dir / "b.msb", dir / "c.msb"}, dir / "m.msb");
  const BankHandle m(dir / "m.msb");
  ASSERT_EQ(m.entry_count(), 7U);
  EXPECT_EQ(std::filesystem::file_size(dir / "m.msb"), g.file_bytes(7));
  for (std::uint64_t i = 0; i < 7; ++i) {
    const MemoryEntry& src = i < 4 ? a[i] : c[i - 4];
    EXPECT_EQ(m.class_id(i), i < 4 ? 1U : 3U);
    EXPECT_EQ(m.index_row(i).source_id, src.source_id);
    EXPECT_TRUE(bitwise_equal(m.fetch_payload(i, 1).keys, src.layers[0].keys));
  }
}

TEST(MergeBanksTest, SingleBankCopiesBytes) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry();
  write_bank(random_entries(g, 5, 18), g, dir / "a.msb");
  merge_banks({dir / "a.msb"}, dir / "m.msb");
  const auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(bytes(dir / "a.msb"), bytes(dir / "m.msb"));
}

TEST(MergeBanksTest, GeometryMismatchNamesFile) {
  TempDir dir("bank");
  write_bank(random_entries(small_geometry(2), 2, 19), small_geometry(2), dir / "a.msb");
  write_bank(random_entries(small_geometry(3), 2, 20), small_geometry(3), dir / "odd.msb");
  try {
    merge_banks({dir / "a.msb", dir / "odd.msb"}, dir / "m.msb");
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("odd.msb"), std::string::npos);
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "m.msb"));
  EXPECT_THROW(merge_banks({}, dir / "m.msb"), ConfigError);
}

TEST(BankSetTest, BehavesLikeMergedBank) {
  TempDir dir("bank");
  const BankGeometry g = small_geometry(4);
  write_bank(random_entries(g, 6, 21, 1), g, dir / "a.msb");
  write_bank(random_entries(g, 0, 22, 2), g, dir / "b.msb");
  write_bank(random_entries(g, 9, 23, 3), g, dir / "c.msb");
  const std::vector<std::filesystem::path> paths{dir / "a.msb", dir / "b.msb", dir / "c.msb"};
  merge_banks(paths, dir / "m.msb");
  const BankSet set(paths, 4);
  const BankHandle merged(dir / "m.msb");
  ASSERT_EQ(set.entry_count(), merged.entry_count());
  EXPECT_EQ(set.geometry(), merged.geometry());
  std::mt19937_64 rng(24);
  std::normal_distribution<float> val;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<float> q(4);
    for (float& v : q) v = val(rng);
    const auto a = set.knn_search(q, 5), b = merged.knn_search(q, 5);
    EXPECT_EQ(a, b);
  }
  for (std::uint64_t i = 0; i < set.entry_count(); ++i) {
    EXPECT_EQ(set.class_id(i), merged.class_id(i));
    EXPECT_TRUE(bitwise_equal(set.fetch_payload(i, 3).values, merged.fetch_payload(i, 3).values));
  }
  EXPECT_THROW(set.fetch_payload(15, 1), ParameterError);
}

TEST(BankSetTest, RejectsMixedGeometry) {
  TempDir dir("bank");
  write_bank({}, small_geometry(2), dir / "a.msb");
  write_bank({}, small_geometry(5), dir / "b.msb");
  EXPECT_THROW(BankSet({dir / "a.msb", dir / "b.msb"}), SchemaError);
  EXPECT_THROW(BankSet({}), ConfigError);
}
