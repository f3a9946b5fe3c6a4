#include "run_config.hpp"

#include <charconv>
#include <iostream>

#include "memattn/errors.hpp"
#include "memattn/file_util.hpp"

namespace memattn::cli {

namespace {

nlohmann::json read_config_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    auto j = nlohmann::json::parse(
        std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid config: " + e.what());
  }
}

std::size_t parse_cache_env(const char* text) {
  std::size_t value = 0;
  const std::string_view s(text);
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || end != s.data() + s.size() || value == 0) {
    throw ConfigError(std::string(kCacheCapEnv) + "='" + std::string(s) +
                      "' is not a positive integer");
  }
  return value;
}

template <typename T>
std::optional<T> config_value(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

std::filesystem::path require_file(const std::string& path, std::string_view what) {
  if (!std::filesystem::is_regular_file(path)) {
    throw ConfigError(std::string(what) + " not found: " + path);
  }
  return path;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  if (encoder_path) {
    j["encoder"] = encoder_path->string();
  } else {
    j["seed"] = encoder_config.seed;
  }
  j["encoder_config"] = nlohmann::json::parse(encoder_config_to_json(encoder_config));
  j["r_local"] = block.r_local;
  j["k"] = block.k;
  j["fusion"] = std::string(to_string(block.fusion_mode));
  j["epsilon"] = block.epsilon;
  j["cache_capacity"] = cache_capacity;
  j["cache_capacity_source"] = cache_capacity_source;
  j["banks"] = nlohmann::json::array();
  for (const auto& b : banks) j["banks"].push_back(b.string());
  j["dense"] = dense;
  j["threads"] = threads;
  return j;
}

RunConfig resolve_run_config(const RunFlags& flags, const char* env_cache_cap) {
  nlohmann::json file = nlohmann::json::object();
  std::filesystem::path base;
  if (flags.config_path) {
    base = require_file(*flags.config_path, "config file").parent_path();
    file = read_config_file(*flags.config_path);
  }
  const auto relative = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_relative() ? base / path : path;
  };

  RunConfig cfg;
  if (file.contains("encoder_config")) {
    cfg.encoder_config = encoder_config_from_json(file.at("encoder_config").dump());
  }

  if (flags.encoder_path && flags.seed) {
    throw ConfigError("--encoder and --seed are mutually exclusive");
  }
  if (flags.encoder_path) {
    cfg.encoder_path = require_file(*flags.encoder_path, "encoder file");
  } else if (flags.seed) {
    cfg.encoder_config.seed = *flags.seed;
  } else if (auto p = config_value<std::string>(file, "encoder")) {
    const auto path = relative(*p);
    cfg.encoder_path = require_file(path.string(), "encoder file");
  } else if (auto s = config_value<std::uint64_t>(file, "seed")) {
    cfg.encoder_config.seed = *s;
  }

  cfg.block.r_local = flags.r_local.value_or(
      config_value<double>(file, "r_local").value_or(kDefaultLocalRatio));
  const std::optional<std::size_t> k =
      flags.k ? flags.k : config_value<std::size_t>(file, "k");
  cfg.block.k = k.value_or(kDefaultK);
  const std::optional<std::string> fusion =
      flags.fusion ? flags.fusion : config_value<std::string>(file, "fusion");
  if (fusion) cfg.block.fusion_mode = parse_fusion_mode(*fusion);
  cfg.block.epsilon = flags.epsilon.value_or(
      config_value<double>(file, "epsilon").value_or(kDefaultDistanceEpsilon));

  if (flags.cache_capacity) {
    cfg.cache_capacity = *flags.cache_capacity;
    cfg.cache_capacity_source = "flag";
  } else if (env_cache_cap != nullptr && *env_cache_cap != '\0') {
    cfg.cache_capacity = parse_cache_env(env_cache_cap);
    cfg.cache_capacity_source = "env";
  } else if (auto c = config_value<std::size_t>(file, "cache_capacity")) {
    cfg.cache_capacity = *c;
    cfg.cache_capacity_source = "config";
  }
  if (cfg.cache_capacity == 0) throw ConfigError("cache capacity must be at least 1");

  if (!flags.banks.empty()) {
    for (const auto& b : flags.banks) cfg.banks.push_back(require_file(b, "bank file"));
  } else if (auto list = config_value<std::vector<std::string>>(file, "banks")) {
    for (const auto& b : *list) {
      cfg.banks.push_back(require_file(relative(b).string(), "bank file"));
    }
  }
  cfg.threads = flags.threads.value_or(config_value<unsigned>(file, "threads").value_or(0));
  cfg.dense = flags.dense || config_value<bool>(file, "dense").value_or(false);

  cfg.block.validate();
  if (!cfg.encoder_path) cfg.encoder_config.validate();

  if (cfg.dense) {
    cfg.block.k = 0;
    cfg.banks.clear();
  } else if (cfg.banks.empty() && cfg.block.k > 0) {
    if (k) {
      throw ConfigError("k=" + std::to_string(cfg.block.k) +
                        " needs at least one bank (--bank); use --k 0 or --dense for "
                        "dense inference");
    }
    cfg.block.k = 0;
  }
  return cfg;
}

EncoderWeights load_weights(RunConfig& cfg) {
  if (cfg.encoder_path) {
    EncoderWeights w = load_encoder(*cfg.encoder_path);
    cfg.encoder_config = w.config;
    return w;
  }
  return EncoderWeights::init(cfg.encoder_config);
}

std::unique_ptr<MemoryStore> open_store(const RunConfig& cfg) {
  if (cfg.dense || cfg.banks.empty()) return nullptr;
  std::unique_ptr<MemoryStore> store;
  if (cfg.banks.size() == 1) {
    store = open_bank(cfg.banks.front(), cfg.cache_capacity);
  } else {
    store = std::make_unique<BankSet>(cfg.banks, cfg.cache_capacity);
  }
  if (!cfg.encoder_config.memorizing_layers.empty()) {
    check_bank_compatible(store->geometry(), cfg.encoder_config);
  }
  return store;
}

void echo_config(std::string_view command, const nlohmann::json& resolved) {
  std::cerr << "memattn " << command << ": resolved config " << resolved.dump() << '\n';
}

}  // namespace memattn::cli
