#pragma once

/**
 * @file encoder.hpp
 *
 * Toy volumetric ViT encoder with frozen, seeded weights. Any subset of its
 * blocks can run as memorizing blocks against a MemoryStore; retrieval is
 * keyed by one fingerprint per volume, taken from the patch embedding.
 */

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "memattn/attention.hpp"
#include "memattn/memory_attention.hpp"
#include "memattn/memory_bank.hpp"
#include "memattn/tensor.hpp"

namespace memattn {

using VolumeDims = std::array<std::uint32_t, 3>;  // (D, H, W)

struct EncoderConfig {
  VolumeDims volume_dims{32, 32, 32};
  std::uint32_t patch_size = 8;
  std::uint32_t d_model = 64;
  std::uint32_t d_ff = 256;
  std::uint32_t num_heads = 4;
  std::uint32_t num_layers = 4;
  std::vector<std::uint32_t> memorizing_layers{2};  // sorted, unique
  std::uint64_t seed = 0;

  // Throws ConfigError on any violated invariant.
  void validate() const;
  std::size_t n_tokens() const noexcept;
  std::size_t patch_dim() const noexcept {
    return static_cast<std::size_t>(patch_size) * patch_size * patch_size;
  }
  bool is_memorizing(std::uint32_t layer) const noexcept;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

std::string encoder_config_to_json(const EncoderConfig& cfg);
// Missing keys keep the defaults of EncoderConfig{}.
EncoderConfig encoder_config_from_json(std::string_view json_text);

// Voxel (z, y, x) at index (z * H + y) * W + x, intensities in [0, 1].
struct Volume {
  VolumeDims dims{0, 0, 0};
  std::vector<float> voxels;

  std::size_t voxel_count() const noexcept {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  // Throws DimensionError on a length mismatch, ParameterError on values
  // outside [0, 1].
  void validate() const;
};

struct EncoderWeights {
  EncoderConfig config;
  Tensor patch_proj;  // [patch_size^3 x d_model]
  Tensor patch_bias;  // [1 x d_model]
  std::vector<BlockParams> blocks;

  /**
   * Frozen random weights from config.seed. Draw order: patch_proj
   * ~ N(0, 1/patch_dim), then each block as BlockParams::init. The bias
   * starts at zero.
   */
  static EncoderWeights init(const EncoderConfig& config);

  std::uint64_t param_count() const;
};

struct Fingerprint {
  std::vector<float> values;  // unit norm, or all zero when degenerate
  bool degenerate = false;
};

struct EncodeResult {
  Tensor features;                          // [n_tokens x d_model]
  std::vector<BlockActivations> activations;  // one per layer
  Fingerprint fingerprint;
  std::vector<RetrievalTrace> traces;  // one per memorizing layer
};

/**
 * Fixed sinusoidal 3-D position code, [n_tokens x d_model].
 *
 * Channel c encodes axis a = c % 3 (z, y, x) of the patch grid position. With
 * j = c / 3, f = j / 2 and m = ceil(d_model / 3), the channel holds
 * sin(pos_a / 10000^(2f/m)) for even j and cos(.) for odd j.
 */
Tensor positional_encoding(const EncoderConfig& cfg);

// Non-overlapping patch_size^3 patches, flattened (z, y, x) row-major, in
// patch-grid order, projected, plus bias and positional encoding.
Tensor patch_embed(const Volume& volume, const EncoderWeights& weights);

// Mean over tokens, L2-normalized. A zero mean maps to the zero vector with
// degenerate set.
Fingerprint fingerprint(const Tensor& tokens);

// Throws BankIncompatibleError naming both geometries.
void check_bank_compatible(const BankGeometry& bank, const EncoderConfig& cfg);

/**
 * Runs patch embedding and all blocks. Layers in config.memorizing_layers
 * become memorizing blocks when @p bank is given; bank compatibility is
 * checked before any block runs.
 */
EncodeResult encode(const Volume& volume, const EncoderWeights& weights,
                    const MemoryStore* bank = nullptr,
                    const BlockConfig& block_cfg = BlockConfig{});

// "MSAMENC1" container: magic, u32 version, config header, then f32 tensors
// patch_proj, patch_bias, and per block w_q w_k w_v w_o w1 w2 norm1.{gamma,
// beta} norm2.{gamma,beta}. Little-endian throughout.
void save_encoder(const EncoderWeights& weights, const std::filesystem::path& path);
EncoderWeights load_encoder(const std::filesystem::path& path);

// ".vol" files use the "VOL1" container (magic, u32 D H W, f32 voxels). Any
// other extension is raw little-endian f32 with a "<path>.json" sidecar
// {"dims": [D, H, W], "dtype": "f32le"}.
void write_volume(const std::filesystem::path& path, const Volume& volume);
Volume read_volume(const std::filesystem::path& path);

// Low background noise plus a few Gaussian blobs, clipped to [0, 1].
Volume make_synthetic_volume(const VolumeDims& dims, Prng& prng);

// Writes a [rows x cols] f32 tensor plus "<path>.json" {"shape", "dtype"}.
void write_features(const std::filesystem::path& path, const Tensor& features);
Tensor read_features(const std::filesystem::path& path);

}  // namespace memattn
