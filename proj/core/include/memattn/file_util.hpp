#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memattn {

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);

// Writes to "<path>.tmp" and renames over path, so readers never see a
// partially written file.
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::byte> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

std::array<std::uint8_t, 32> sha256(std::span<const std::byte> bytes);
std::array<std::uint8_t, 32> sha256(std::string_view text);

std::string to_hex(std::span<const std::uint8_t> bytes);

}  // namespace memattn
