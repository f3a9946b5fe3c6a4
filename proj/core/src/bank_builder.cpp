#include "memattn/bank_builder.hpp"

#include <algorithm>
#include <chrono>
#include <future>
#include <set>
#include <thread>

#include "json.hpp"
#include "memattn/errors.hpp"
#include "memattn/file_util.hpp"

namespace memattn {

namespace {

// Either a finished entry or the reason it was skipped.
struct Encoded {
  std::optional<MemoryEntry> entry;
  std::string skip_reason;
};

Encoded encode_for_bank(const std::filesystem::path& path, std::uint32_t class_id,
                        const EncoderWeights& weights) {
  const EncoderConfig& cfg = weights.config;
  Encoded out;
  try {
    const Volume volume = read_volume(path);
    const EncodeResult r = encode(volume, weights);
    if (r.fingerprint.degenerate) {
      out.skip_reason = "degenerate (zero) fingerprint";
      return out;
    }
    MemoryEntry e;
    e.fingerprint = r.fingerprint.values;
    e.class_id = class_id;
    e.source_id = source_id_for(path);
    for (std::uint32_t layer : cfg.memorizing_layers) {
      const BlockActivations& act = r.activations.at(layer);
      e.layers.push_back({act.keys, act.values});
    }
    out.entry = std::move(e);
  } catch (const std::exception& ex) {
    out.skip_reason = ex.what();
  }
  return out;
}

nlohmann::json report_json(const BuildReport& r) {
  nlohmann::json j;
  j["class_id"] = r.class_id;
  j["entries_written"] = r.entries_written;
  j["bank_path"] = r.bank_path.string();
  j["wall_time_seconds"] = r.wall_time_seconds;
  j["skipped"] = nlohmann::json::array();
  for (const auto& [path, reason] : r.skipped) {
    j["skipped"].push_back({{"path", path.string()}, {"reason", reason}});
  }
  if (r.error) j["error"] = *r.error;
  return j;
}

ClassDatasetManifest manifest_from_json(const nlohmann::json& j,
                                        const std::filesystem::path& base_dir) {
  ClassDatasetManifest m;
  m.class_id = j.at("class_id").get<std::uint32_t>();
  m.label = j.value("label", std::string());
  for (const auto& v : j.at("volumes")) {
    std::filesystem::path p = v.get<std::string>();
    m.volume_paths.push_back(p.is_relative() ? base_dir / p : p);
  }
  if (m.volume_paths.empty()) {
    throw ConfigError("manifest for class " + std::to_string(m.class_id) +
                      " lists no volumes");
  }
  return m;
}

}  // namespace

std::vector<ClassDatasetManifest> parse_manifests(std::string_view json_text,
                                                  const std::filesystem::path& base_dir) {
  std::vector<ClassDatasetManifest> out;
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (j.is_array()) {
      for (const auto& item : j) out.push_back(manifest_from_json(item, base_dir));
    } else {
      out.push_back(manifest_from_json(j, base_dir));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid manifest: ") + e.what());
  }
  return out;
}

std::vector<ClassDatasetManifest> load_manifests(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw ConfigError("manifest file not found: " + path.string());
  }
  const auto bytes = read_file_bytes(path);
  return parse_manifests(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
      path.parent_path());
}

std::string build_report_to_json(const BuildReport& report) {
  return report_json(report).dump(2);
}

std::string build_reports_to_json(const std::vector<BuildReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  return arr.dump(2);
}

SourceId source_id_for(const std::filesystem::path& path) {
  const auto digest = sha256(path.string());
  SourceId id{};
  std::copy_n(digest.begin(), id.size(), id.begin());
  return id;
}

BankGeometry bank_geometry_for(const EncoderConfig& cfg) {
  return {cfg.d_model, cfg.memorizing_layers, static_cast<std::uint32_t>(cfg.n_tokens()),
          cfg.num_heads, cfg.d_model};
}

std::filesystem::path class_bank_path(const std::filesystem::path& out_dir,
                                      std::uint32_t class_id) {
  return out_dir / ("class_" + std::to_string(class_id) + ".msb");
}

BuildReport build_bank(const ClassDatasetManifest& manifest, const EncoderWeights& weights,
                       const std::filesystem::path& out_path, unsigned threads) {
  const auto start = std::chrono::steady_clock::now();
  const EncoderConfig& cfg = weights.config;
  cfg.validate();
  if (cfg.memorizing_layers.empty()) {
    throw ConfigError("encoder has no memorizing layers; nothing to capture");
  }
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());

  BuildReport report;
  report.class_id = manifest.class_id;
  report.bank_path = out_path;

  BankWriter writer(out_path, bank_geometry_for(cfg));
  const auto& paths = manifest.volume_paths;
  // Encode a window of volumes concurrently, then append in manifest order.
  for (std::size_t begin = 0; begin < paths.size(); begin += threads) {
    const std::size_t end = std::min(paths.size(), begin + threads);
    std::vector<std::future<Encoded>> pending;
    for (std::size_t i = begin; i < end; ++i) {
      pending.push_back(std::async(threads > 1 ? std::launch::async : std::launch::deferred,
                                   encode_for_bank, paths[i], manifest.class_id,
                                   std::cref(weights)));
    }
    for (std::size_t i = begin; i < end; ++i) {
      Encoded e = pending[i - begin].get();
      if (e.entry) {
        writer.append(*e.entry);
        ++report.entries_written;
      } else {
        report.skipped.emplace_back(paths[i], std::move(e.skip_reason));
      }
    }
  }
  if (report.entries_written == 0) {
    throw BuildError("no entries written for class " + std::to_string(manifest.class_id) +
                     ": all " + std::to_string(paths.size()) + " volumes were skipped" +
                     (report.skipped.empty() ? "" : " (first: " +
                                                        report.skipped.front().second + ")"));
  }
  writer.finish();
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<BuildReport> build_all(const std::vector<ClassDatasetManifest>& manifests,
                                   const EncoderWeights& weights,
                                   const std::filesystem::path& out_dir, unsigned threads) {
  std::set<std::uint32_t> seen;
  for (const auto& m : manifests) {
    if (!seen.insert(m.class_id).second) {
      throw ConfigError("duplicate class_id " + std::to_string(m.class_id) +
                        " in manifests");
    }
  }
  std::vector<BuildReport> reports;
  if (manifests.empty()) return reports;
  std::filesystem::create_directories(out_dir);
  for (const auto& m : manifests) {
    const auto path = class_bank_path(out_dir, m.class_id);
    try {
      reports.push_back(build_bank(m, weights, path, threads));
    } catch (const Error& e) {
      BuildReport failed;
      failed.class_id = m.class_id;
      failed.bank_path = path;
      for (const auto& p : m.volume_paths) failed.skipped.emplace_back(p, e.what());
      failed.error = e.what();
      reports.push_back(std::move(failed));
    }
  }
  return reports;
}

}  // namespace memattn
