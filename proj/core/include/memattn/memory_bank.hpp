#pragma once

/**
 * @file memory_bank.hpp
 *
 * On-disk external memory of (fingerprint, per-layer key/value) tuples.
 *
 * File layout, all integers little-endian, floats IEEE-754 binary32 LE:
 *
 *   header   magic "MSAMBNK1" (8 bytes)
 *            version u32 (= 1), dtype_code u32 (0 = f32 LE)
 *            fingerprint_dim u32
 *            layer_count u32, layer_ids u32[layer_count]
 *            n_tokens u32, num_heads u32, d_model u32
 *            entry_count u64
 *   index    entry_count rows of:
 *              fingerprint f32[fingerprint_dim]
 *              offset u64   (absolute file offset of the payload)
 *              length u64   (payload bytes)
 *              class_id u32, source_id u8[16], payload_crc32 u32
 *   payload  per entry, per layer in layer_ids order:
 *              keys f32[n_tokens * d_model], values f32[n_tokens * d_model]
 *
 * Header size is 44 + 4 * layer_count bytes, an index row is
 * 4 * fingerprint_dim + 40 bytes, and a payload is
 * layer_count * 2 * n_tokens * d_model * 4 bytes.
 */

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <list>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "memattn/tensor.hpp"

namespace memattn {

inline constexpr std::array<char, 8> kBankMagic = {'M', 'S', 'A', 'M', 'B', 'N', 'K', '1'};
inline constexpr std::uint32_t kBankVersion = 1;
inline constexpr std::uint32_t kDtypeF32LE = 0;
inline constexpr std::size_t kDefaultCacheCapacity = 64;

using SourceId = std::array<std::uint8_t, 16>;

struct BankGeometry {
  std::uint32_t fingerprint_dim = 0;
  std::vector<std::uint32_t> layer_ids;
  std::uint32_t n_tokens = 0;
  std::uint32_t num_heads = 0;
  std::uint32_t d_model = 0;

  std::uint64_t header_bytes() const noexcept { return 44 + 4 * layer_ids.size(); }
  std::uint64_t index_row_bytes() const noexcept { return 4ULL * fingerprint_dim + 40; }
  std::uint64_t payload_bytes() const noexcept {
    return static_cast<std::uint64_t>(layer_ids.size()) * 2 * n_tokens * d_model * 4;
  }
  std::uint64_t file_bytes(std::uint64_t entry_count) const noexcept {
    return header_bytes() + entry_count * (index_row_bytes() + payload_bytes());
  }

  // Position of layer_id within layer_ids, or -1.
  int layer_slot(std::uint32_t layer_id) const noexcept;

  // Throws SchemaError on zero fields, empty or duplicate layer ids.
  void validate() const;
  std::string describe() const;

  friend bool operator==(const BankGeometry&, const BankGeometry&) = default;
};

struct BankHeader {
  BankGeometry geometry;
  std::uint32_t version = kBankVersion;
  std::uint32_t dtype_code = kDtypeF32LE;
  std::uint64_t entry_count = 0;
};

struct LayerKV {
  Tensor keys, values;  // [n_tokens x d_model] each
};

struct MemoryEntry {
  std::vector<float> fingerprint;
  std::vector<LayerKV> layers;  // parallel to BankGeometry::layer_ids
  std::uint32_t class_id = 0;
  SourceId source_id{};
};

// One decoded payload: every memorized layer of one entry.
struct EntryPayload {
  std::vector<LayerKV> layers;
};

struct IndexRow {
  std::span<const float> fingerprint;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t class_id = 0;
  SourceId source_id{};
  std::uint32_t payload_crc32 = 0;
};

struct Neighbor {
  std::uint64_t entry_id = 0;
  double distance = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct CacheStats {
  std::uint64_t bytes_read = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::size_t resident = 0;
  std::size_t peak_resident = 0;
};

/**
 * Read side of a memory: what a memorizing block needs from a bank.
 *
 * Implemented by a single BankHandle and by BankSet (several banks searched
 * as one concatenated index). Implementations are safe for concurrent use.
 */
class MemoryStore {
 public:
  virtual ~MemoryStore() = default;

  virtual const BankGeometry& geometry() const = 0;
  virtual std::uint64_t entry_count() const = 0;
  virtual std::uint32_t class_id(std::uint64_t entry_id) const = 0;

  // Exact k nearest fingerprints by Euclidean distance, ascending, ties broken
  // by lower entry id. Returns min(k, entry_count()) results.
  virtual std::vector<Neighbor> knn_search(std::span<const float> query,
                                           std::size_t k) const = 0;

  virtual LayerKV fetch_payload(std::uint64_t entry_id, std::uint32_t layer_id) const = 0;

  virtual CacheStats stats() const = 0;
  virtual std::size_t cache_capacity() const = 0;
};

/**
 * Linear scan over a row-major [count x dim] fingerprint table. Entry ids are
 * row index + id_offset.
 */
std::vector<Neighbor> knn_linear_scan(std::span<const float> fingerprints,
                                      std::size_t dim, std::span<const float> query,
                                      std::size_t k, std::uint64_t id_offset = 0);

// Streams entries into a bank file. Payloads are spooled next to the output
// and the final file appears atomically on finish().
class BankWriter {
 public:
  BankWriter(std::filesystem::path path, BankGeometry geometry);
  ~BankWriter();

  BankWriter(const BankWriter&) = delete;
  BankWriter& operator=(const BankWriter&) = delete;

  void append(const MemoryEntry& entry);
  // Appends an already-encoded payload (used by merge_banks).
  void append_raw(std::span<const float> fingerprint, std::uint32_t class_id,
                  const SourceId& source_id, std::span<const std::byte> payload);

  std::uint64_t entry_count() const noexcept { return rows_.size(); }
  void finish();

 private:
  struct PendingRow {
    std::vector<float> fingerprint;
    std::uint32_t class_id;
    SourceId source_id;
    std::uint32_t crc;
  };

  std::filesystem::path path_;
  std::filesystem::path spool_path_;
  BankGeometry geometry_;
  std::ofstream spool_;
  std::vector<PendingRow> rows_;
  bool finished_ = false;
};

void write_bank(std::span<const MemoryEntry> entries, const BankGeometry& geometry,
                const std::filesystem::path& path);

/**
 * Open bank file with an eagerly loaded index and a lazily filled LRU cache
 * of decoded payloads.
 *
 * Opening reads exactly header + index bytes. A payload is read from disk
 * the first time it is fetched (one pread, CRC-checked) and kept until it
 * falls out of the cache. bytes_read counts every byte pulled from the file.
 */
class BankHandle final : public MemoryStore {
 public:
  explicit BankHandle(const std::filesystem::path& path,
                      std::size_t cache_capacity = kDefaultCacheCapacity);
  ~BankHandle() override;

  BankHandle(const BankHandle&) = delete;
  BankHandle& operator=(const BankHandle&) = delete;

  const BankHeader& header() const noexcept { return header_; }
  const BankGeometry& geometry() const override { return header_.geometry; }
  std::uint64_t entry_count() const override { return header_.entry_count; }
  std::uint32_t class_id(std::uint64_t entry_id) const override;
  const std::filesystem::path& path() const noexcept { return path_; }

  IndexRow index_row(std::uint64_t entry_id) const;
  std::span<const float> fingerprints() const noexcept { return fingerprints_; }

  std::vector<Neighbor> knn_search(std::span<const float> query,
                                   std::size_t k) const override;

  LayerKV fetch_payload(std::uint64_t entry_id, std::uint32_t layer_id) const override;
  std::shared_ptr<const EntryPayload> fetch_entry(std::uint64_t entry_id) const;

  // Raw payload bytes, CRC-checked, bypassing the cache.
  std::vector<std::byte> read_raw_payload(std::uint64_t entry_id) const;

  CacheStats stats() const override;
  std::size_t cache_capacity() const override { return capacity_; }
  // Cached entry ids, most recently used first.
  std::vector<std::uint64_t> resident_entries() const;

 private:
  std::vector<std::byte> pread_exact(std::uint64_t offset, std::uint64_t length,
                                     const char* what) const;
  void check_entry(std::uint64_t entry_id) const;

  std::filesystem::path path_;
  int fd_ = -1;
  BankHeader header_;
  std::size_t capacity_;

  std::vector<float> fingerprints_;
  std::vector<std::uint64_t> offsets_;
  std::vector<std::uint64_t> lengths_;
  std::vector<std::uint32_t> class_ids_;
  std::vector<SourceId> source_ids_;
  std::vector<std::uint32_t> crcs_;

  using LruList = std::list<std::uint64_t>;
  struct CacheSlot {
    LruList::iterator position;
    std::shared_ptr<const EntryPayload> payload;
  };
  mutable std::mutex cache_mutex_;
  mutable LruList lru_;
  mutable std::unordered_map<std::uint64_t, CacheSlot> cache_;
  mutable std::size_t peak_resident_ = 0;
  mutable std::atomic<std::uint64_t> bytes_read_{0};
  mutable std::atomic<std::uint64_t> hits_{0};
  mutable std::atomic<std::uint64_t> misses_{0};
};

std::unique_ptr<BankHandle> open_bank(const std::filesystem::path& path,
                                      std::size_t cache_capacity = kDefaultCacheCapacity);

// Free-function form of MemoryStore::knn_search.
std::vector<Neighbor> knn_search(const MemoryStore& store, std::span<const float> query,
                                 std::size_t k);

/**
 * Several banks with identical geometry searched as one index. Entry ids are
 * global: bank i's entries follow those of banks 0..i-1, the same order
 * merge_banks writes.
 */
class BankSet final : public MemoryStore {
 public:
  BankSet(const std::vector<std::filesystem::path>& paths,
          std::size_t cache_capacity = kDefaultCacheCapacity);

  const BankGeometry& geometry() const override;
  std::uint64_t entry_count() const override { return total_; }
  std::uint32_t class_id(std::uint64_t entry_id) const override;
  std::vector<Neighbor> knn_search(std::span<const float> query,
                                   std::size_t k) const override;
  LayerKV fetch_payload(std::uint64_t entry_id, std::uint32_t layer_id) const override;
  CacheStats stats() const override;
  std::size_t cache_capacity() const override;

  std::size_t bank_count() const noexcept { return banks_.size(); }
  const BankHandle& bank(std::size_t i) const { return *banks_.at(i); }

 private:
  std::pair<const BankHandle*, std::uint64_t> locate(std::uint64_t entry_id) const;

  std::vector<std::unique_ptr<BankHandle>> banks_;
  std::vector<std::uint64_t> starts_;
  std::uint64_t total_ = 0;
};

// Concatenates banks in input order, preserving class ids and payload bytes.
void merge_banks(const std::vector<std::filesystem::path>& paths,
                 const std::filesystem::path& out_path);

}  // namespace memattn
