#pragma once

// Little-endian encode/decode helpers shared by the bank, encoder and volume
// containers.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "memattn/errors.hpp"

namespace memattn::detail {

class ByteWriter {
 public:
  void put_bytes(const void* src, std::size_t n) {
    const auto* p = static_cast<const std::byte*>(src);
    buf_.insert(buf_.end(), p, p + n);
  }

  void put_u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::byte>(v >> (8 * i)));
  }

  void put_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::byte>(v >> (8 * i)));
  }

  void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }

  void put_f32s(std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
      put_bytes(values.data(), values.size_bytes());
    } else {
      for (float v : values) put_f32(v);
    }
  }

  const std::vector<std::byte>& bytes() const noexcept { return buf_; }
  std::vector<std::byte>& bytes() noexcept { return buf_; }
  std::size_t size() const noexcept { return buf_.size(); }

 private:
  std::vector<std::byte> buf_;
};

// Bounds-checked cursor; running off the end throws CorruptionError.
class ByteReader {
 public:
  ByteReader(std::span<const std::byte> data, std::string context)
      : data_(data), context_(std::move(context)) {}

  void get_bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  std::uint32_t get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  float get_f32() { return std::bit_cast<float>(get_u32()); }

  void get_f32s(std::span<float> out) {
    if constexpr (std::endian::native == std::endian::little) {
      get_bytes(out.data(), out.size_bytes());
    } else {
      for (float& v : out) v = get_f32();
    }
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw CorruptionError(context_ + ": unexpected end of data at byte " +
                            std::to_string(pos_));
    }
  }

  std::span<const std::byte> data_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace memattn::detail
