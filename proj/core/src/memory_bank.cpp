#include "memattn/memory_bank.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <set>
#include <sstream>

#include "byte_io.hpp"
#include "memattn/errors.hpp"

namespace memattn {

namespace {

std::uint32_t crc32_of(std::span<const std::byte> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; payloads are far below 4 GiB but chunk anyway.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - pos, 1U << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos),
                static_cast<uInt>(chunk));
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void encode_header(detail::ByteWriter& w, const BankGeometry& g, std::uint64_t count) {
  w.put_bytes(kBankMagic.data(), kBankMagic.size());
  w.put_u32(kBankVersion);
  w.put_u32(kDtypeF32LE);
  w.put_u32(g.fingerprint_dim);
  w.put_u32(static_cast<std::uint32_t>(g.layer_ids.size()));
  for (std::uint32_t id : g.layer_ids) w.put_u32(id);
  w.put_u32(g.n_tokens);
  w.put_u32(g.num_heads);
  w.put_u32(g.d_model);
  w.put_u64(count);
}

EntryPayload decode_payload(std::span<const std::byte> bytes, const BankGeometry& g,
                            const std::string& context) {
  detail::ByteReader r(bytes, context);
  const std::size_t n = g.n_tokens, d = g.d_model;
  EntryPayload payload;
  payload.layers.reserve(g.layer_ids.size());
  for (std::size_t l = 0; l < g.layer_ids.size(); ++l) {
    LayerKV kv{Tensor({n, d}), Tensor({n, d})};
    r.get_f32s(kv.keys.data());
    r.get_f32s(kv.values.data());
    payload.layers.push_back(std::move(kv));
  }
  return payload;
}

}  // namespace

int BankGeometry::layer_slot(std::uint32_t layer_id) const noexcept {
  const auto it = std::find(layer_ids.begin(), layer_ids.end(), layer_id);
  return it == layer_ids.end() ? -1 : static_cast<int>(it - layer_ids.begin());
}

void BankGeometry::validate() const {
  if (fingerprint_dim == 0 || n_tokens == 0 || num_heads == 0 || d_model == 0) {
    throw SchemaError("bank geometry fields must be positive: " + describe());
  }
  if (layer_ids.empty()) throw SchemaError("bank geometry has no memorized layers");
  if (std::set<std::uint32_t>(layer_ids.begin(), layer_ids.end()).size() !=
      layer_ids.size()) {
    throw SchemaError("bank geometry has duplicate layer ids: " + describe());
  }
}

std::string BankGeometry::describe() const {
  std::ostringstream out;
  out << "{fingerprint_dim=" << fingerprint_dim << ", layers=[";
  for (std::size_t i = 0; i < layer_ids.size(); ++i) {
    if (i != 0) out << ',';
    out << layer_ids[i];
  }
  out << "], n_tokens=" << n_tokens << ", num_heads=" << num_heads
      << ", d_model=" << d_model << '}';
  return out.str();
}

std::vector<Neighbor> knn_linear_scan(std::span<const float> fingerprints,
                                      std::size_t dim, std::span<const float> query,
                                      std::size_t k, std::uint64_t id_offset) {
  if (query.size() != dim) {
    throw DimensionError("query fingerprint has length " + std::to_string(query.size()) +
                         ", bank fingerprints have " + std::to_string(dim));
  }
  const std::size_t count = dim == 0 ? 0 : fingerprints.size() / dim;
  const std::size_t take = std::min(k, count);
  if (take == 0) return {};

  std::vector<Neighbor> all(count);
  for (std::size_t i = 0; i < count; ++i) {
    all[i] = {id_offset + i, l2_distance(fingerprints.subspan(i * dim, dim), query)};
  }
  const auto closer = [](const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.entry_id < b.entry_id);
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take),
                    all.end(), closer);
  all.resize(take);
  return all;
}

// ---------------------------------------------------------------- BankWriter

BankWriter::BankWriter(std::filesystem::path path, BankGeometry geometry)
    : path_(std::move(path)), geometry_(std::move(geometry)) {
  geometry_.validate();
  spool_path_ = path_;
  spool_path_ += ".spool";
  spool_.open(spool_path_, std::ios::binary | std::ios::trunc);
  if (!spool_) throw IoError("cannot open " + spool_path_.string() + " for writing");
}

BankWriter::~BankWriter() {
  if (spool_.is_open()) spool_.close();
  std::error_code ignored;
  std::filesystem::remove(spool_path_, ignored);
}

void BankWriter::append(const MemoryEntry& entry) {
  if (entry.layers.size() != geometry_.layer_ids.size()) {
    throw SchemaError("entry carries " + std::to_string(entry.layers.size()) +
                      " layers, bank geometry expects " +
                      std::to_string(geometry_.layer_ids.size()));
  }
  const Shape expected{geometry_.n_tokens, geometry_.d_model};
  detail::ByteWriter payload;
  for (const LayerKV& kv : entry.layers) {
    if (kv.keys.shape() != expected || kv.values.shape() != expected) {
      throw SchemaError("entry tensors " + shape_to_string(kv.keys.shape()) + "/" +
                        shape_to_string(kv.values.shape()) + " do not match bank " +
                        shape_to_string(expected));
    }
    payload.put_f32s(kv.keys.data());
    payload.put_f32s(kv.values.data());
  }
  append_raw(entry.fingerprint, entry.class_id, entry.source_id, payload.bytes());
}

void BankWriter::append_raw(std::span<const float> fingerprint, std::uint32_t class_id,
                            const SourceId& source_id,
                            std::span<const std::byte> payload) {
  if (finished_) throw Error("BankWriter::append after finish");
  if (fingerprint.size() != geometry_.fingerprint_dim) {
    throw SchemaError("entry fingerprint has length " + std::to_string(fingerprint.size()) +
                      ", bank expects " + std::to_string(geometry_.fingerprint_dim));
  }
  if (payload.size() != geometry_.payload_bytes()) {
    throw SchemaError("entry payload has " + std::to_string(payload.size()) +
                      " bytes, bank expects " + std::to_string(geometry_.payload_bytes()));
  }
  spool_.write(reinterpret_cast<const char*>(payload.data()),
               static_cast<std::streamsize>(payload.size()));
  if (!spool_) throw IoError("write failed for " + spool_path_.string());
  rows_.push_back({std::vector<float>(fingerprint.begin(), fingerprint.end()), class_id,
                   source_id, crc32_of(payload)});
}

void BankWriter::finish() {
  if (finished_) return;
  spool_.close();
  if (!spool_) throw IoError("write failed for " + spool_path_.string());

  const std::uint64_t count = rows_.size();
  const std::uint64_t payload_start =
      geometry_.header_bytes() + count * geometry_.index_row_bytes();
  const std::uint64_t length = geometry_.payload_bytes();

  detail::ByteWriter head;
  encode_header(head, geometry_, count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const PendingRow& row = rows_[i];
    head.put_f32s(row.fingerprint);
    head.put_u64(payload_start + i * length);
    head.put_u64(length);
    head.put_u32(row.class_id);
    head.put_bytes(row.source_id.data(), row.source_id.size());
    head.put_u32(row.crc);
  }

  std::filesystem::path tmp = path_;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(head.bytes().data()),
              static_cast<std::streamsize>(head.size()));
    std::ifstream spool(spool_path_, std::ios::binary);
    if (!spool) throw IoError("cannot reopen " + spool_path_.string());
    if (count > 0) out << spool.rdbuf();
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path_, ec);
  if (ec) throw IoError("cannot move bank into place at " + path_.string());
  std::filesystem::remove(spool_path_, ec);
  finished_ = true;
}

void write_bank(std::span<const MemoryEntry> entries, const BankGeometry& geometry,
                const std::filesystem::path& path) {
  BankWriter writer(path, geometry);
  for (const MemoryEntry& e : entries) writer.append(e);
  writer.finish();
}

// ---------------------------------------------------------------- BankHandle

BankHandle::BankHandle(const std::filesystem::path& path, std::size_t cache_capacity)
    : path_(path), capacity_(cache_capacity) {
  if (capacity_ == 0) throw ParameterError("bank cache capacity must be at least 1");
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) {
    throw IoError("cannot open bank " + path.string() + ": " + std::strerror(errno));
  }
  struct stat st {};
  if (::fstat(fd_, &st) != 0) {
    ::close(fd_);
    throw IoError("cannot stat bank " + path.string());
  }
  const auto file_size = static_cast<std::uint64_t>(st.st_size);
  const std::string ctx = path.string();

  try {
    if (file_size < 24) throw FormatError(ctx + ": file too small to be a bank");
    const auto fixed = pread_exact(0, 24, "header");
    detail::ByteReader r(fixed, ctx);
    std::array<char, 8> magic{};
    r.get_bytes(magic.data(), magic.size());
    if (magic != kBankMagic) throw FormatError(ctx + ": bad bank magic");
    header_.version = r.get_u32();
    if (header_.version != kBankVersion) {
      throw FormatError(ctx + ": unsupported bank version " +
                        std::to_string(header_.version));
    }
    header_.dtype_code = r.get_u32();
    if (header_.dtype_code != kDtypeF32LE) {
      throw FormatError(ctx + ": unsupported dtype code " +
                        std::to_string(header_.dtype_code));
    }
    BankGeometry& g = header_.geometry;
    g.fingerprint_dim = r.get_u32();
    const std::uint32_t layer_count = r.get_u32();
    if (layer_count == 0 || 24 + 4ULL * layer_count + 20 > file_size) {
      throw CorruptionError(ctx + ": truncated header (layer_count " +
                            std::to_string(layer_count) + ")");
    }
    const auto rest = pread_exact(24, 4ULL * layer_count + 20, "header");
    detail::ByteReader r2(rest, ctx);
    g.layer_ids.resize(layer_count);
    for (auto& id : g.layer_ids) id = r2.get_u32();
    g.n_tokens = r2.get_u32();
    g.num_heads = r2.get_u32();
    g.d_model = r2.get_u32();
    header_.entry_count = r2.get_u64();
    try {
      g.validate();
    } catch (const SchemaError& e) {
      throw FormatError(ctx + ": " + e.what());
    }

    const std::uint64_t count = header_.entry_count;
    const std::uint64_t row_bytes = g.index_row_bytes();
    if (count > (file_size - g.header_bytes()) / row_bytes) {
      throw CorruptionError(ctx + ": truncated index (" + std::to_string(count) +
                            " entries declared)");
    }
    const auto index = pread_exact(g.header_bytes(), count * row_bytes, "index");
    detail::ByteReader ri(index, ctx);
    fingerprints_.resize(count * g.fingerprint_dim);
    offsets_.resize(count);
    lengths_.resize(count);
    class_ids_.resize(count);
    source_ids_.resize(count);
    crcs_.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      ri.get_f32s(std::span(fingerprints_).subspan(i * g.fingerprint_dim,
                                                   g.fingerprint_dim));
      offsets_[i] = ri.get_u64();
      lengths_[i] = ri.get_u64();
      class_ids_[i] = ri.get_u32();
      ri.get_bytes(source_ids_[i].data(), source_ids_[i].size());
      crcs_[i] = ri.get_u32();
      if (lengths_[i] != g.payload_bytes() || offsets_[i] > file_size ||
          lengths_[i] > file_size - offsets_[i]) {
        throw CorruptionError(ctx + ": index row " + std::to_string(i) +
                              " points outside the payload region");
      }
    }
  } catch (...) {
    ::close(fd_);
    fd_ = -1;
    throw;
  }
}

BankHandle::~BankHandle() {
  if (fd_ >= 0) ::close(fd_);
}

std::vector<std::byte> BankHandle::pread_exact(std::uint64_t offset, std::uint64_t length,
                                               const char* what) const {
  std::vector<std::byte> buf(length);
  std::uint64_t done = 0;
  while (done < length) {
    const ssize_t got = ::pread(fd_, buf.data() + done, length - done,
                                static_cast<off_t>(offset + done));
    if (got < 0) {
      if (errno == EINTR) continue;
      throw IoError(path_.string() + ": read of " + what + " failed: " +
                    std::strerror(errno));
    }
    if (got == 0) {
      throw CorruptionError(path_.string() + ": unexpected end of file in " + what);
    }
    done += static_cast<std::uint64_t>(got);
  }
  bytes_read_ += length;
  return buf;
}

void BankHandle::check_entry(std::uint64_t entry_id) const {
  if (entry_id >= header_.entry_count) {
    throw ParameterError("entry id " + std::to_string(entry_id) + " out of range for " +
                         path_.string() + " with " +
                         std::to_string(header_.entry_count) + " entries");
  }
}

std::uint32_t BankHandle::class_id(std::uint64_t entry_id) const {
  check_entry(entry_id);
  return class_ids_[entry_id];
}

IndexRow BankHandle::index_row(std::uint64_t entry_id) const {
  check_entry(entry_id);
  const std::size_t dim = header_.geometry.fingerprint_dim;
  return {std::span(fingerprints_).subspan(entry_id * dim, dim), offsets_[entry_id],
          lengths_[entry_id], class_ids_[entry_id], source_ids_[entry_id],
          crcs_[entry_id]};
}

std::vector<Neighbor> BankHandle::knn_search(std::span<const float> query,
                                             std::size_t k) const {
  return knn_linear_scan(fingerprints_, header_.geometry.fingerprint_dim, query, k);
}

std::vector<std::byte> BankHandle::read_raw_payload(std::uint64_t entry_id) const {
  check_entry(entry_id);
  auto bytes = pread_exact(offsets_[entry_id], lengths_[entry_id], "payload");
  if (crc32_of(bytes) != crcs_[entry_id]) {
    throw CorruptionError(path_.string() + ": CRC mismatch in payload of entry " +
                          std::to_string(entry_id));
  }
  return bytes;
}

std::shared_ptr<const EntryPayload> BankHandle::fetch_entry(std::uint64_t entry_id) const {
  check_entry(entry_id);
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = cache_.find(entry_id); it != cache_.end()) {
      lru_.splice(lru_.begin(), lru_, it->second.position);
      ++hits_;
      return it->second.payload;
    }
  }

  const auto raw = read_raw_payload(entry_id);
  auto decoded = std::make_shared<const EntryPayload>(
      decode_payload(raw, header_.geometry, path_.string()));

  std::lock_guard lock(cache_mutex_);
  ++misses_;
  if (auto it = cache_.find(entry_id); it != cache_.end()) {
    // Another reader filled the slot while this one was on disk.
    lru_.splice(lru_.begin(), lru_, it->second.position);
    return it->second.payload;
  }
  lru_.push_front(entry_id);
  cache_.emplace(entry_id, CacheSlot{lru_.begin(), decoded});
  while (cache_.size() > capacity_) {
    cache_.erase(lru_.back());
    lru_.pop_back();
  }
  peak_resident_ = std::max(peak_resident_, cache_.size());
  return decoded;
}

LayerKV BankHandle::fetch_payload(std::uint64_t entry_id, std::uint32_t layer_id) const {
  const int slot = header_.geometry.layer_slot(layer_id);
  if (slot < 0) {
    throw ParameterError("layer " + std::to_string(layer_id) + " is not memorized in " +
                         path_.string() + " " + header_.geometry.describe());
  }
  return fetch_entry(entry_id)->layers[static_cast<std::size_t>(slot)];
}

CacheStats BankHandle::stats() const {
  std::lock_guard lock(cache_mutex_);
  return {bytes_read_.load(), hits_.load(), misses_.load(), cache_.size(), peak_resident_};
}

std::vector<std::uint64_t> BankHandle::resident_entries() const {
  std::lock_guard lock(cache_mutex_);
  return {lru_.begin(), lru_.end()};
}

std::unique_ptr<BankHandle> open_bank(const std::filesystem::path& path,
                                      std::size_t cache_capacity) {
  return std::make_unique<BankHandle>(path, cache_capacity);
}

std::vector<Neighbor> knn_search(const MemoryStore& store, std::span<const float> query,
                                 std::size_t k) {
  return store.knn_search(query, k);
}

// ------------------------------------------------------------------- BankSet

BankSet::BankSet(const std::vector<std::filesystem::path>& paths,
                 std::size_t cache_capacity) {
  if (paths.empty()) throw ConfigError("a bank set needs at least one bank file");
  for (const auto& p : paths) {
    auto bank = open_bank(p, cache_capacity);
    if (!banks_.empty() && !(bank->geometry() == banks_.front()->geometry())) {
      throw SchemaError(p.string() + " has geometry " + bank->geometry().describe() +
                        ", expected " + banks_.front()->geometry().describe() +
                        " from " + banks_.front()->path().string());
    }
    starts_.push_back(total_);
    total_ += bank->entry_count();
    banks_.push_back(std::move(bank));
  }
}

const BankGeometry& BankSet::geometry() const { return banks_.front()->geometry(); }

std::pair<const BankHandle*, std::uint64_t> BankSet::locate(std::uint64_t entry_id) const {
  if (entry_id >= total_) {
    throw ParameterError("entry id " + std::to_string(entry_id) +
                         " out of range for bank set with " + std::to_string(total_) +
                         " entries");
  }
  const auto it = std::upper_bound(starts_.begin(), starts_.end(), entry_id);
  // Last bank starting at or before the id; empty banks share their start
  // with the next bank and are therefore never selected.
  const std::size_t b = static_cast<std::size_t>(it - starts_.begin()) - 1;
  return {banks_[b].get(), entry_id - starts_[b]};
}

std::uint32_t BankSet::class_id(std::uint64_t entry_id) const {
  const auto [bank, local] = locate(entry_id);
  return bank->class_id(local);
}

std::vector<Neighbor> BankSet::knn_search(std::span<const float> query,
                                          std::size_t k) const {
  std::vector<Neighbor> merged;
  for (std::size_t i = 0; i < banks_.size(); ++i) {
    auto part = knn_linear_scan(banks_[i]->fingerprints(),
                                geometry().fingerprint_dim, query, k, starts_[i]);
    merged.insert(merged.end(), part.begin(), part.end());
  }
  std::sort(merged.begin(), merged.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.entry_id < b.entry_id);
  });
  if (merged.size() > k) merged.resize(k);
  return merged;
}

LayerKV BankSet::fetch_payload(std::uint64_t entry_id, std::uint32_t layer_id) const {
  const auto [bank, local] = locate(entry_id);
  return bank->fetch_payload(local, layer_id);
}

CacheStats BankSet::stats() const {
  CacheStats total;
  for (const auto& b : banks_) {
    const CacheStats s = b->stats();
    total.bytes_read += s.bytes_read;
    total.cache_hits += s.cache_hits;
    total.cache_misses += s.cache_misses;
    total.resident += s.resident;
    total.peak_resident += s.peak_resident;
  }
  return total;
}

std::size_t BankSet::cache_capacity() const {
  return banks_.front()->cache_capacity() * banks_.size();
}

void merge_banks(const std::vector<std::filesystem::path>& paths,
                 const std::filesystem::path& out_path) {
  if (paths.empty()) throw ConfigError("merge_banks needs at least one input bank");
  std::vector<std::unique_ptr<BankHandle>> banks;
  for (const auto& p : paths) {
    auto bank = open_bank(p, 1);
    if (!banks.empty() && !(bank->geometry() == banks.front()->geometry())) {
      throw SchemaError(p.string() + " has geometry " + bank->geometry().describe() +
                        ", expected " + banks.front()->geometry().describe());
    }
    banks.push_back(std::move(bank));
  }
  BankWriter writer(out_path, banks.front()->geometry());
  for (const auto& bank : banks) {
    for (std::uint64_t i = 0; i < bank->entry_count(); ++i) {
      const IndexRow row = bank->index_row(i);
      writer.append_raw(row.fingerprint, row.class_id, row.source_id,
                        bank->read_raw_payload(i));
    }
  }
  writer.finish();
}

}  // namespace memattn
