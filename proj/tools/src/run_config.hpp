#pragma once

// Flags, an optional JSON config file and the environment, resolved into one
// validated configuration before any command does real work.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "memattn/encoder.hpp"
#include "memattn/memory_attention.hpp"
#include "memattn/memory_bank.hpp"

namespace memattn::cli {

inline constexpr const char* kCacheCapEnv = "MEMATTN_CACHE_CAP";

// Raw command-line values; unset optionals fall back to the config file.
struct RunFlags {
  std::optional<std::string> config_path;
  std::optional<std::string> encoder_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> banks;
  std::optional<double> r_local;
  std::optional<std::size_t> k;
  std::optional<std::string> fusion;
  std::optional<double> epsilon;
  std::optional<std::size_t> cache_capacity;
  std::optional<unsigned> threads;
  bool dense = false;
};

struct RunConfig {
  EncoderConfig encoder_config;
  std::optional<std::filesystem::path> encoder_path;  // otherwise init from seed
  BlockConfig block;
  std::size_t cache_capacity = kDefaultCacheCapacity;
  std::string cache_capacity_source = "default";
  std::vector<std::filesystem::path> banks;
  bool dense = false;
  unsigned threads = 0;

  nlohmann::json to_json() const;
};

/**
 * Precedence: flags, then the config file, then built-in defaults. The cache
 * capacity additionally honours MEMATTN_CACHE_CAP between flag and config
 * file. Throws ConfigError / ParameterError on anything invalid, including
 * an explicit k > 0 with no banks.
 */
RunConfig resolve_run_config(const RunFlags& flags, const char* env_cache_cap);

// Loads the weights file or initializes from the seed. When loaded from a
// file the file's config replaces cfg.encoder_config.
EncoderWeights load_weights(RunConfig& cfg);

// Null when no banks are configured or the run is dense.
std::unique_ptr<MemoryStore> open_store(const RunConfig& cfg);

// Prints the resolved configuration as one JSON line on stderr.
void echo_config(std::string_view command, const nlohmann::json& resolved);

std::filesystem::path require_file(const std::string& path, std::string_view what);

}  // namespace memattn::cli
