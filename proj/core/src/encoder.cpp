#include "memattn/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "byte_io.hpp"
#include "json.hpp"
#include "memattn/errors.hpp"
#include "memattn/file_util.hpp"

namespace memattn {

namespace {

constexpr std::array<char, 8> kEncoderMagic = {'M', 'S', 'A', 'M', 'E', 'N', 'C', '1'};
constexpr std::uint32_t kEncoderVersion = 1;
constexpr std::array<char, 4> kVolumeMagic = {'V', 'O', 'L', '1'};

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p += ".json";
  return p;
}

void put_tensor(detail::ByteWriter& w, const Tensor& t) { w.put_f32s(t.data()); }

Tensor get_tensor(detail::ByteReader& r, Shape shape) {
  Tensor t(std::move(shape));
  r.get_f32s(t.data());
  return t;
}

}  // namespace

// ------------------------------------------------------------------ config

void EncoderConfig::validate() const {
  for (std::uint32_t d : volume_dims) {
    if (d == 0) throw ConfigError("volume dimensions must be positive");
  }
  if (patch_size == 0) throw ConfigError("patch_size must be positive");
  for (std::uint32_t d : volume_dims) {
    if (d % patch_size != 0) {
      throw ConfigError("patch_size " + std::to_string(patch_size) +
                        " does not divide volume dimension " + std::to_string(d));
    }
  }
  if (d_model == 0 || d_ff == 0 || num_heads == 0 || num_layers == 0) {
    throw ConfigError("d_model, d_ff, num_heads and num_layers must be positive");
  }
  if (d_model % num_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (!std::is_sorted(memorizing_layers.begin(), memorizing_layers.end()) ||
      std::adjacent_find(memorizing_layers.begin(), memorizing_layers.end()) !=
          memorizing_layers.end()) {
    throw ConfigError("memorizing_layers must be sorted and unique");
  }
  for (std::uint32_t layer : memorizing_layers) {
    if (layer >= num_layers) {
      throw ConfigError("memorizing layer " + std::to_string(layer) +
                        " out of range for " + std::to_string(num_layers) + " layers");
    }
  }
}

std::size_t EncoderConfig::n_tokens() const noexcept {
  if (patch_size == 0) return 0;
  return static_cast<std::size_t>(volume_dims[0] / patch_size) *
         (volume_dims[1] / patch_size) * (volume_dims[2] / patch_size);
}

bool EncoderConfig::is_memorizing(std::uint32_t layer) const noexcept {
  return std::binary_search(memorizing_layers.begin(), memorizing_layers.end(), layer);
}

std::string encoder_config_to_json(const EncoderConfig& cfg) {
  nlohmann::json j;
  j["volume_dims"] = cfg.volume_dims;
  j["patch_size"] = cfg.patch_size;
  j["d_model"] = cfg.d_model;
  j["d_ff"] = cfg.d_ff;
  j["num_heads"] = cfg.num_heads;
  j["num_layers"] = cfg.num_layers;
  j["memorizing_layers"] = cfg.memorizing_layers;
  j["seed"] = cfg.seed;
  return j.dump(2);
}

EncoderConfig encoder_config_from_json(std::string_view json_text) {
  EncoderConfig cfg;
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (j.contains("volume_dims")) cfg.volume_dims = j.at("volume_dims").get<VolumeDims>();
    if (j.contains("patch_size")) cfg.patch_size = j.at("patch_size").get<std::uint32_t>();
    if (j.contains("d_model")) cfg.d_model = j.at("d_model").get<std::uint32_t>();
    if (j.contains("d_ff")) cfg.d_ff = j.at("d_ff").get<std::uint32_t>();
    if (j.contains("num_heads")) cfg.num_heads = j.at("num_heads").get<std::uint32_t>();
    if (j.contains("num_layers")) cfg.num_layers = j.at("num_layers").get<std::uint32_t>();
    if (j.contains("memorizing_layers")) {
      std::set<std::uint32_t> layers(j.at("memorizing_layers").begin(),
                                     j.at("memorizing_layers").end());
      cfg.memorizing_layers.assign(layers.begin(), layers.end());
    }
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid encoder config: ") + e.what());
  }
  return cfg;
}

// ------------------------------------------------------------------ volume

void Volume::validate() const {
  if (voxels.size() != voxel_count()) {
    throw DimensionError("volume has " + std::to_string(voxels.size()) +
                         " voxels, dims imply " + std::to_string(voxel_count()));
  }
  for (float v : voxels) {
    if (!(v >= 0.0F && v <= 1.0F)) {
      throw ParameterError("volume intensity " + std::to_string(v) +
                           " outside the normalized range [0, 1]");
    }
  }
}

// ----------------------------------------------------------------- weights

EncoderWeights EncoderWeights::init(const EncoderConfig& config) {
  config.validate();
  Prng prng(config.seed);
  EncoderWeights w;
  w.config = config;
  const std::size_t pd = config.patch_dim();
  w.patch_proj = init_gaussian({pd, config.d_model}, prng,
                               1.0 / std::sqrt(static_cast<double>(pd)));
  w.patch_bias = Tensor({1, config.d_model});
  w.blocks.reserve(config.num_layers);
  for (std::uint32_t l = 0; l < config.num_layers; ++l) {
    w.blocks.push_back(BlockParams::init(config.d_model, config.d_ff, config.num_heads, prng));
  }
  return w;
}

std::uint64_t EncoderWeights::param_count() const {
  std::uint64_t total = patch_proj.size() + patch_bias.size();
  for (const auto& b : blocks) total += count_params(b);
  return total;
}

// ----------------------------------------------------------------- forward

Tensor positional_encoding(const EncoderConfig& cfg) {
  const std::size_t p = cfg.patch_size;
  const std::size_t gd = cfg.volume_dims[0] / p, gh = cfg.volume_dims[1] / p,
                    gw = cfg.volume_dims[2] / p;
  const std::size_t d = cfg.d_model;
  const double m = static_cast<double>((d + 2) / 3);
  Tensor pe({gd * gh * gw, d});
  for (std::size_t z = 0; z < gd; ++z) {
    for (std::size_t y = 0; y < gh; ++y) {
      for (std::size_t x = 0; x < gw; ++x) {
        const std::size_t token = (z * gh + y) * gw + x;
        const std::array<double, 3> pos{static_cast<double>(z), static_cast<double>(y),
                                        static_cast<double>(x)};
        auto row = pe.row(token);
        for (std::size_t c = 0; c < d; ++c) {
          const std::size_t j = c / 3;
          const double freq = std::pow(10000.0, 2.0 * static_cast<double>(j / 2) / m);
          const double angle = pos[c % 3] / freq;
          row[c] = static_cast<float>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
      }
    }
  }
  return pe;
}

Tensor patch_embed(const Volume& volume, const EncoderWeights& weights) {
  const EncoderConfig& cfg = weights.config;
  if (volume.dims != cfg.volume_dims) {
    throw DimensionError("volume dims (" + std::to_string(volume.dims[0]) + "," +
                         std::to_string(volume.dims[1]) + "," +
                         std::to_string(volume.dims[2]) + ") do not match encoder (" +
                         std::to_string(cfg.volume_dims[0]) + "," +
                         std::to_string(cfg.volume_dims[1]) + "," +
                         std::to_string(cfg.volume_dims[2]) + ")");
  }
  if (volume.voxels.size() != volume.voxel_count()) volume.validate();

  const std::size_t p = cfg.patch_size;
  const std::size_t H = cfg.volume_dims[1], W = cfg.volume_dims[2];
  const std::size_t gd = cfg.volume_dims[0] / p, gh = H / p, gw = W / p;
  Tensor patches({gd * gh * gw, p * p * p});
  for (std::size_t bz = 0; bz < gd; ++bz) {
    for (std::size_t by = 0; by < gh; ++by) {
      for (std::size_t bx = 0; bx < gw; ++bx) {
        auto row = patches.row((bz * gh + by) * gw + bx);
        std::size_t c = 0;
        for (std::size_t z = 0; z < p; ++z) {
          for (std::size_t y = 0; y < p; ++y) {
            const std::size_t base = ((bz * p + z) * H + (by * p + y)) * W + bx * p;
            for (std::size_t x = 0; x < p; ++x) row[c++] = volume.voxels[base + x];
          }
        }
      }
    }
  }

  Tensor tokens = matmul(patches, weights.patch_proj);
  const Tensor pe = positional_encoding(cfg);
  const auto bias = weights.patch_bias.data();
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    auto row = tokens.row(t);
    const auto pos = pe.row(t);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c] + pos[c];
  }
  return tokens;
}

Fingerprint fingerprint(const Tensor& tokens) {
  require_matrix(tokens, "fingerprint tokens");
  const std::size_t n = tokens.rows(), d = tokens.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    const auto row = tokens.row(t);
    for (std::size_t c = 0; c < d; ++c) mean[c] += row[c];
  }
  double norm_sq = 0.0;
  for (double& m : mean) {
    m /= static_cast<double>(n);
    norm_sq += m * m;
  }
  Fingerprint fp;
  fp.values.assign(d, 0.0F);
  const double norm = std::sqrt(norm_sq);
  if (!(norm > 1e-12)) {
    fp.degenerate = true;
    return fp;
  }
  for (std::size_t c = 0; c < d; ++c) fp.values[c] = static_cast<float>(mean[c] / norm);
  return fp;
}

void check_bank_compatible(const BankGeometry& bank, const EncoderConfig& cfg) {
  bool ok = bank.d_model == cfg.d_model && bank.num_heads == cfg.num_heads &&
            bank.fingerprint_dim == cfg.d_model;
  for (std::uint32_t layer : cfg.memorizing_layers) ok = ok && bank.layer_slot(layer) >= 0;
  if (!ok) {
    std::string layers;
    for (std::uint32_t l : cfg.memorizing_layers) {
      layers += (layers.empty() ? "" : ",") + std::to_string(l);
    }
    throw BankIncompatibleError("bank geometry " + bank.describe() +
                                " is incompatible with encoder {d_model=" +
                                std::to_string(cfg.d_model) +
                                ", num_heads=" + std::to_string(cfg.num_heads) +
                                ", memorizing_layers=[" + layers + "]}");
  }
}

EncodeResult encode(const Volume& volume, const EncoderWeights& weights,
                    const MemoryStore* bank, const BlockConfig& block_cfg) {
  const EncoderConfig& cfg = weights.config;
  block_cfg.validate();
  if (bank != nullptr && !cfg.memorizing_layers.empty()) {
    check_bank_compatible(bank->geometry(), cfg);
  }

  EncodeResult result;
  Tensor x = patch_embed(volume, weights);
  result.fingerprint = fingerprint(x);
  result.activations.reserve(cfg.num_layers);
  for (std::uint32_t layer = 0; layer < cfg.num_layers; ++layer) {
    const BlockParams& params = weights.blocks.at(layer);
    BlockActivations act;
    if (bank != nullptr && cfg.is_memorizing(layer)) {
      RetrievalTrace trace;
      act = memorizing_block_forward(x, params, bank, layer, result.fingerprint.values,
                                     block_cfg, &trace);
      result.traces.push_back(std::move(trace));
    } else {
      act = transformer_block(x, params);
    }
    x = act.block_output;
    result.activations.push_back(std::move(act));
  }
  result.features = std::move(x);
  return result;
}

// --------------------------------------------------------------------- I/O

void save_encoder(const EncoderWeights& weights, const std::filesystem::path& path) {
  const EncoderConfig& cfg = weights.config;
  cfg.validate();
  detail::ByteWriter w;
  w.put_bytes(kEncoderMagic.data(), kEncoderMagic.size());
  w.put_u32(kEncoderVersion);
  for (std::uint32_t d : cfg.volume_dims) w.put_u32(d);
  w.put_u32(cfg.patch_size);
  w.put_u32(cfg.d_model);
  w.put_u32(cfg.d_ff);
  w.put_u32(cfg.num_heads);
  w.put_u32(cfg.num_layers);
  w.put_u32(static_cast<std::uint32_t>(cfg.memorizing_layers.size()));
  for (std::uint32_t l : cfg.memorizing_layers) w.put_u32(l);
  w.put_u64(cfg.seed);
  put_tensor(w, weights.patch_proj);
  put_tensor(w, weights.patch_bias);
  for (const BlockParams& b : weights.blocks) {
    for (const Tensor* t : {&b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o, &b.ffn.w1,
                            &b.ffn.w2, &b.norm1.gamma, &b.norm1.beta, &b.norm2.gamma,
                            &b.norm2.beta}) {
      put_tensor(w, *t);
    }
  }
  write_file_atomic(path, w.bytes());
}

EncoderWeights load_encoder(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const std::string ctx = path.string();
  detail::ByteReader r(bytes, ctx);
  std::array<char, 8> magic{};
  if (bytes.size() < magic.size()) throw FormatError(ctx + ": not an encoder file");
  r.get_bytes(magic.data(), magic.size());
  if (magic != kEncoderMagic) throw FormatError(ctx + ": bad encoder magic");
  if (const auto v = r.get_u32(); v != kEncoderVersion) {
    throw FormatError(ctx + ": unsupported encoder version " + std::to_string(v));
  }
  EncoderWeights w;
  EncoderConfig& cfg = w.config;
  for (auto& d : cfg.volume_dims) d = r.get_u32();
  cfg.patch_size = r.get_u32();
  cfg.d_model = r.get_u32();
  cfg.d_ff = r.get_u32();
  cfg.num_heads = r.get_u32();
  cfg.num_layers = r.get_u32();
  const std::uint32_t mem_count = r.get_u32();
  if (mem_count > r.remaining() / 4) throw CorruptionError(ctx + ": truncated header");
  cfg.memorizing_layers.resize(mem_count);
  for (auto& l : cfg.memorizing_layers) l = r.get_u32();
  cfg.seed = r.get_u64();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(ctx + ": " + e.what());
  }

  const std::size_t d = cfg.d_model, ff = cfg.d_ff;
  w.patch_proj = get_tensor(r, {cfg.patch_dim(), d});
  w.patch_bias = get_tensor(r, {1, d});
  for (std::uint32_t l = 0; l < cfg.num_layers; ++l) {
    BlockParams b;
    b.attn.num_heads = cfg.num_heads;
    b.attn.w_q = get_tensor(r, {d, d});
    b.attn.w_k = get_tensor(r, {d, d});
    b.attn.w_v = get_tensor(r, {d, d});
    b.attn.w_o = get_tensor(r, {d, d});
    b.ffn.w1 = get_tensor(r, {d, ff});
    b.ffn.w2 = get_tensor(r, {ff, d});
    b.norm1.gamma = get_tensor(r, {1, d});
    b.norm1.beta = get_tensor(r, {1, d});
    b.norm2.gamma = get_tensor(r, {1, d});
    b.norm2.beta = get_tensor(r, {1, d});
    w.blocks.push_back(std::move(b));
  }
  if (r.remaining() != 0) {
    throw CorruptionError(ctx + ": " + std::to_string(r.remaining()) +
                          " trailing bytes after encoder weights");
  }
  return w;
}

void write_volume(const std::filesystem::path& path, const Volume& volume) {
  volume.validate();
  detail::ByteWriter w;
  if (path.extension() == ".vol") {
    w.put_bytes(kVolumeMagic.data(), kVolumeMagic.size());
    for (std::uint32_t d : volume.dims) w.put_u32(d);
    w.put_f32s(volume.voxels);
    write_file_atomic(path, w.bytes());
    return;
  }
  w.put_f32s(volume.voxels);
  nlohmann::json side;
  side["dims"] = volume.dims;
  side["dtype"] = "f32le";
  write_file_atomic(path, w.bytes());
  write_file_atomic(sidecar_path(path), side.dump(2) + "\n");
}

Volume read_volume(const std::filesystem::path& path) {
  const std::string ctx = path.string();
  Volume v;
  if (path.extension() == ".vol") {
    const auto bytes = read_file_bytes(path);
    detail::ByteReader r(bytes, ctx);
    std::array<char, 4> magic{};
    if (bytes.size() < magic.size()) throw FormatError(ctx + ": not a VOL1 file");
    r.get_bytes(magic.data(), magic.size());
    if (magic != kVolumeMagic) throw FormatError(ctx + ": bad volume magic");
    for (auto& d : v.dims) d = r.get_u32();
    if (v.voxel_count() * 4 != r.remaining()) {
      throw CorruptionError(ctx + ": payload has " + std::to_string(r.remaining()) +
                            " bytes, dims imply " + std::to_string(v.voxel_count() * 4));
    }
    v.voxels.resize(v.voxel_count());
    r.get_f32s(v.voxels);
  } else {
    const auto side_bytes = read_file_bytes(sidecar_path(path));
    try {
      const auto side = nlohmann::json::parse(
          std::string_view(reinterpret_cast<const char*>(side_bytes.data()),
                           side_bytes.size()));
      v.dims = side.at("dims").get<VolumeDims>();
      if (side.value("dtype", std::string("f32le")) != "f32le") {
        throw FormatError(ctx + ": unsupported dtype " + side.at("dtype").dump());
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(ctx + ": bad sidecar: " + e.what());
    }
    const auto bytes = read_file_bytes(path);
    if (bytes.size() != v.voxel_count() * 4) {
      throw CorruptionError(ctx + ": raw volume has " + std::to_string(bytes.size()) +
                            " bytes, sidecar dims imply " +
                            std::to_string(v.voxel_count() * 4));
    }
    detail::ByteReader r(bytes, ctx);
    v.voxels.resize(v.voxel_count());
    r.get_f32s(v.voxels);
  }
  v.validate();
  return v;
}

Volume make_synthetic_volume(const VolumeDims& dims, Prng& prng) {
  Volume v;
  v.dims = dims;
  v.voxels.resize(v.voxel_count());
  for (float& x : v.voxels) x = static_cast<float>(0.05 * prng.next_uniform());

  const int blobs = 1 + static_cast<int>(prng.next_u64() % 3);
  for (int b = 0; b < blobs; ++b) {
    const double cz = prng.next_uniform() * dims[0];
    const double cy = prng.next_uniform() * dims[1];
    const double cx = prng.next_uniform() * dims[2];
    const double radius = 2.0 + prng.next_uniform() * 0.25 * dims[0];
    const double peak = 0.4 + 0.6 * prng.next_uniform();
    const double inv = 1.0 / (2.0 * radius * radius);
    for (std::uint32_t z = 0; z < dims[0]; ++z) {
      for (std::uint32_t y = 0; y < dims[1]; ++y) {
        for (std::uint32_t x = 0; x < dims[2]; ++x) {
          const double r2 = (z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx);
          float& voxel = v.voxels[(static_cast<std::size_t>(z) * dims[1] + y) * dims[2] + x];
          voxel = static_cast<float>(
              std::min(1.0, static_cast<double>(voxel) + peak * std::exp(-r2 * inv)));
        }
      }
    }
  }
  return v;
}

void write_features(const std::filesystem::path& path, const Tensor& features) {
  require_matrix(features, "features");
  detail::ByteWriter w;
  w.put_f32s(features.data());
  nlohmann::json side;
  side["shape"] = features.shape();
  side["dtype"] = "f32le";
  write_file_atomic(path, w.bytes());
  write_file_atomic(sidecar_path(path), side.dump(2) + "\n");
}

Tensor read_features(const std::filesystem::path& path) {
  const auto side_bytes = read_file_bytes(sidecar_path(path));
  Shape shape;
  try {
    const auto side = nlohmann::json::parse(std::string_view(
        reinterpret_cast<const char*>(side_bytes.data()), side_bytes.size()));
    shape = side.at("shape").get<Shape>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad sidecar: " + e.what());
  }
  const auto bytes = read_file_bytes(path);
  Tensor t(shape);
  if (bytes.size() != t.size() * 4) {
    throw CorruptionError(path.string() + ": feature file size disagrees with sidecar");
  }
  detail::ByteReader r(bytes, path.string());
  r.get_f32s(t.data());
  return t;
}

}  // namespace memattn
