#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "memattn/encoder.hpp"
#include "memattn/memory_bank.hpp"

namespace memattn {

// One class's slice of a multi-class dataset.
struct ClassDatasetManifest {
  std::uint32_t class_id = 0;
  std::string label;
  std::vector<std::filesystem::path> volume_paths;
};

struct BuildReport {
  std::uint32_t class_id = 0;
  std::uint64_t entries_written = 0;
  std::vector<std::pair<std::filesystem::path, std::string>> skipped;
  std::filesystem::path bank_path;
  double wall_time_seconds = 0.0;
  // Set when the class failed as a whole (build_all keeps going).
  std::optional<std::string> error;
};

/**
 * Parses {"class_id", "label", "volumes": [...]} or a JSON array of such
 * objects. Relative volume paths resolve against @p base_dir.
 */
std::vector<ClassDatasetManifest> parse_manifests(std::string_view json_text,
                                                  const std::filesystem::path& base_dir);
std::vector<ClassDatasetManifest> load_manifests(const std::filesystem::path& path);

std::string build_report_to_json(const BuildReport& report);
std::string build_reports_to_json(const std::vector<BuildReport>& reports);

// First 16 bytes of SHA-256 over the path string.
SourceId source_id_for(const std::filesystem::path& path);

// Bank geometry the encoder produces: fingerprints of width d_model, one
// key/value pair per memorizing layer.
BankGeometry bank_geometry_for(const EncoderConfig& cfg);

/**
 * Encodes each manifest volume with all blocks dense and writes one entry per
 * volume: its fingerprint plus the post-projection keys/values of every
 * memorizing layer. Unreadable or mismatched volumes and degenerate
 * fingerprints are skipped with a reason. Volumes are encoded on up to
 * @p threads workers; entries are written in manifest order.
 *
 * Throws BuildError when nothing was written (no file is left behind).
 */
BuildReport build_bank(const ClassDatasetManifest& manifest, const EncoderWeights& weights,
                       const std::filesystem::path& out_path, unsigned threads = 0);

// One bank per class at out_dir / "class_<id>.msb". Duplicate class ids are
// rejected with ConfigError before any work; a failing class is reported and
// the rest continue.
std::vector<BuildReport> build_all(const std::vector<ClassDatasetManifest>& manifests,
                                   const EncoderWeights& weights,
                                   const std::filesystem::path& out_dir,
                                   unsigned threads = 0);

std::filesystem::path class_bank_path(const std::filesystem::path& out_dir,
                                      std::uint32_t class_id);

}  // namespace memattn
