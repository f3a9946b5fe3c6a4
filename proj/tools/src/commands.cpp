#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>

#include "memattn/bank_builder.hpp"
#include "memattn/bench.hpp"
#include "memattn/errors.hpp"
#include "memattn/file_util.hpp"

namespace memattn::cli {

namespace {

RunConfig resolve(const RunFlags& flags) {
  return resolve_run_config(flags, std::getenv(kCacheCapEnv));
}

std::vector<Volume> load_queries(const QueryArgs& q, const EncoderConfig& cfg) {
  std::vector<Volume> volumes;
  if (!q.inputs.empty()) {
    for (const auto& p : q.inputs) volumes.push_back(read_volume(require_file(p, "input volume")));
    return volumes;
  }
  if (q.synthetic == 0) throw ConfigError("--synthetic must be at least 1");
  Prng prng(q.input_seed);
  for (std::size_t i = 0; i < q.synthetic; ++i) {
    volumes.push_back(make_synthetic_volume(cfg.volume_dims, prng));
  }
  return volumes;
}

nlohmann::json queries_json(const QueryArgs& q) {
  if (!q.inputs.empty()) return q.inputs;
  return {{"synthetic", q.synthetic}, {"input_seed", q.input_seed}};
}

nlohmann::json trace_json(const EncodeResult& r, const MemoryStore* store) {
  nlohmann::json j;
  j["fingerprint_degenerate"] = r.fingerprint.degenerate;
  j["layers"] = nlohmann::json::array();
  for (const RetrievalTrace& t : r.traces) {
    nlohmann::json layer;
    layer["layer"] = t.layer_id;
    layer["r_local"] = t.weights.r_local;
    layer["neighbors"] = nlohmann::json::array();
    for (std::size_t i = 0; i < t.neighbors.size(); ++i) {
      const Neighbor& n = t.neighbors[i];
      layer["neighbors"].push_back({{"entry_id", n.entry_id},
                                    {"distance", n.distance},
                                    {"class_id", store->class_id(n.entry_id)},
                                    {"weight", t.weights.r_mem.at(i)}});
    }
    j["layers"].push_back(std::move(layer));
  }
  return j;
}

}  // namespace

int cmd_build_bank(const BuildBankArgs& a) {
  RunConfig cfg = resolve(a.run);
  if (a.out.has_value() == a.out_dir.has_value()) {
    throw ConfigError("build-bank needs exactly one of --out FILE or --out-dir DIR");
  }
  const auto manifests = load_manifests(a.manifest);
  if (a.out && manifests.size() != 1) {
    throw ConfigError(a.manifest + " lists " + std::to_string(manifests.size()) +
                      " classes; use --out-dir to build one bank per class");
  }
  const EncoderWeights weights = load_weights(cfg);
  if (weights.config.memorizing_layers.empty()) {
    throw ConfigError("encoder has no memorizing layers; nothing to capture");
  }
  nlohmann::json resolved = cfg.to_json();
  resolved["manifest"] = a.manifest;
  resolved["out"] = a.out ? *a.out : *a.out_dir;
  echo_config("build-bank", resolved);

  std::vector<BuildReport> reports;
  if (a.out) {
    try {
      reports.push_back(build_bank(manifests.front(), weights, *a.out, cfg.threads));
    } catch (const BuildError& e) {
      BuildReport failed;
      failed.class_id = manifests.front().class_id;
      failed.bank_path = *a.out;
      failed.error = e.what();
      reports.push_back(std::move(failed));
    }
  } else {
    reports = build_all(manifests, weights, *a.out_dir, cfg.threads);
  }

  const std::string text =
      (a.out ? build_report_to_json(reports.front()) : build_reports_to_json(reports)) + "\n";
  std::cout << text;
  if (a.report) write_file_atomic(*a.report, text);

  bool ok = true;
  for (const BuildReport& r : reports) {
    if (r.entries_written == 0 || r.error) {
      ok = false;
      std::cerr << "build-bank: class " << r.class_id << " produced no bank"
                << (r.error ? ": " + *r.error : std::string()) << '\n';
    }
  }
  return ok ? 0 : 1;
}

int cmd_infer(const InferArgs& a) {
  RunConfig cfg = resolve(a.run);
  const auto input = require_file(a.input, "input volume");
  const EncoderWeights weights = load_weights(cfg);
  const auto store = open_store(cfg);
  nlohmann::json resolved = cfg.to_json();
  resolved["input"] = a.input;
  resolved["out"] = a.out;
  echo_config("infer", resolved);

  const Volume volume = read_volume(input);
  const EncodeResult result = encode(volume, weights, store.get(), cfg.block);
  write_features(a.out, result.features);
  if (a.trace) write_file_atomic(*a.trace, trace_json(result, store.get()).dump(2) + "\n");
  std::cerr << "infer: wrote " << shape_to_string(result.features.shape()) << " features to "
            << a.out << '\n';
  return 0;
}

int cmd_bench(const BenchArgs& a) {
  RunConfig cfg = resolve(a.run);
  if (a.mode != "both") (void)parse_bench_mode(a.mode);
  if (a.repetitions == 0) throw ConfigError("--reps must be at least 1");
  const EncoderWeights weights = load_weights(cfg);
  const auto store = open_store(cfg);
  if (a.mode != "dense" && store == nullptr) {
    throw ConfigError("bench --mode " + a.mode + " needs at least one bank (--bank)");
  }
  nlohmann::json resolved = cfg.to_json();
  resolved["mode"] = a.mode;
  resolved["queries"] = queries_json(a.queries);
  resolved["repetitions"] = a.repetitions;
  resolved["warmup"] = a.warmup;
  echo_config("bench", resolved);

  const std::vector<Volume> volumes = load_queries(a.queries, weights.config);
  std::vector<EfficiencyReport> reports;
  if (a.mode == "both") {
    auto [dense, mem] = run_paired(weights, volumes, *store, cfg.block, a.repetitions, a.warmup);
    reports = {dense, mem};
  } else {
    reports.push_back(run_efficiency(parse_bench_mode(a.mode), weights, volumes, store.get(),
                                     cfg.block, a.repetitions, a.warmup));
  }
  const std::string text = to_json(reports) + "\n";
  std::cout << text;
  if (a.json_out) write_file_atomic(*a.json_out, text);
  return 0;
}

int cmd_ablate(const AblateArgs& a) {
  RunConfig cfg = resolve(a.run);
  if (a.k_values.empty()) throw ConfigError("--k-values must list at least one k");
  if (a.repetitions == 0) throw ConfigError("--reps must be at least 1");
  const EncoderWeights weights = load_weights(cfg);
  const auto store = open_store(cfg);
  if (store == nullptr) throw ConfigError("ablate needs at least one bank (--bank)");
  nlohmann::json resolved = cfg.to_json();
  resolved["k_values"] = a.k_values;
  resolved["queries"] = queries_json(a.queries);
  resolved["repetitions"] = a.repetitions;
  echo_config("ablate", resolved);

  const std::vector<Volume> volumes = load_queries(a.queries, weights.config);
  const AblationResult result =
      run_ablation(a.k_values, weights, volumes, *store, cfg.block, a.repetitions);
  const std::string csv = ablation_csv(result.rows);
  std::cout << csv;
  if (a.out) write_file_atomic(*a.out, csv);
  std::cerr << "ablate: dense_checksum=" << result.dense_checksum
            << " control_checksum(k=0)=" << result.control_checksum
            << (result.dense_checksum == result.control_checksum ? " (match)" : " (MISMATCH)")
            << '\n';
  return 0;
}

int cmd_inspect_bank(const InspectArgs& a) {
  const BankHandle bank(require_file(a.bank, "bank file"), 1);
  const BankGeometry& g = bank.geometry();
  std::map<std::uint32_t, std::uint64_t> per_class;
  for (std::uint64_t i = 0; i < bank.entry_count(); ++i) ++per_class[bank.class_id(i)];
  const std::uint64_t payload_total = bank.entry_count() * g.payload_bytes();

  if (a.json) {
    nlohmann::json j;
    j["path"] = a.bank;
    j["version"] = bank.header().version;
    j["dtype"] = "f32le";
    j["fingerprint_dim"] = g.fingerprint_dim;
    j["layer_ids"] = g.layer_ids;
    j["n_tokens"] = g.n_tokens;
    j["num_heads"] = g.num_heads;
    j["d_model"] = g.d_model;
    j["entry_count"] = bank.entry_count();
    j["payload_bytes_per_entry"] = g.payload_bytes();
    j["total_payload_bytes"] = payload_total;
    j["file_bytes"] = g.file_bytes(bank.entry_count());
    j["classes"] = nlohmann::json::object();
    for (const auto& [id, n] : per_class) j["classes"][std::to_string(id)] = n;
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::cout << "path:                 " << a.bank << '\n'
            << "version:              " << bank.header().version << '\n'
            << "dtype:                f32le\n"
            << "fingerprint_dim:      " << g.fingerprint_dim << '\n'
            << "layers:               ";
  for (std::size_t i = 0; i < g.layer_ids.size(); ++i) {
    std::cout << (i ? "," : "") << g.layer_ids[i];
  }
  std::cout << '\n'
            << "n_tokens:             " << g.n_tokens << '\n'
            << "num_heads:            " << g.num_heads << '\n'
            << "d_model:              " << g.d_model << '\n'
            << "entries:              " << bank.entry_count() << '\n'
            << "payload bytes/entry:  " << g.payload_bytes() << '\n'
            << "total payload bytes:  " << payload_total << '\n';
  for (const auto& [id, n] : per_class) {
    std::cout << "class " << id << ": " << n << " entries\n";
  }
  return 0;
}

int cmd_merge_banks(const MergeArgs& a) {
  std::vector<std::filesystem::path> inputs;
  for (const auto& p : a.inputs) inputs.push_back(require_file(p, "bank file"));
  merge_banks(inputs, a.out);
  std::cerr << "merge-banks: wrote " << BankHandle(a.out, 1).entry_count() << " entries to "
            << a.out << '\n';
  return 0;
}

int cmd_init_encoder(const InitEncoderArgs& a) {
  RunConfig cfg = resolve(a.run);
  const EncoderWeights weights = load_weights(cfg);
  nlohmann::json resolved = cfg.to_json();
  resolved["out"] = a.out;
  echo_config("init-encoder", resolved);
  save_encoder(weights, a.out);
  std::cerr << "init-encoder: " << weights.param_count() << " parameters written to " << a.out
            << '\n';
  return 0;
}

int cmd_synth(const SynthArgs& a) {
  if (a.dims.size() != 3) throw ConfigError("--dims needs three values D,H,W");
  if (a.count == 0 || a.classes == 0) throw ConfigError("--count and --classes must be positive");
  const VolumeDims dims{a.dims[0], a.dims[1], a.dims[2]};
  for (std::uint32_t d : dims) {
    if (d == 0) throw ConfigError("--dims values must be positive");
  }
  const std::filesystem::path root(a.out_dir);
  std::filesystem::create_directories(root);
  Prng prng(a.seed);
  nlohmann::json manifests = nlohmann::json::array();
  for (std::uint32_t c = 0; c < a.classes; ++c) {
    const std::string sub = a.classes > 1 ? "class_" + std::to_string(c) + "/" : "";
    std::filesystem::create_directories(root / sub);
    nlohmann::json m;
    m["class_id"] = c;
    m["label"] = "synthetic_" + std::to_string(c);
    m["volumes"] = nlohmann::json::array();
    for (std::size_t i = 0; i < a.count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "vol_%03zu.vol", i);
      write_volume(root / (sub + name), make_synthetic_volume(dims, prng));
      m["volumes"].push_back(sub + name);
    }
    manifests.push_back(std::move(m));
  }
  const nlohmann::json out = a.classes == 1 ? manifests.front() : manifests;
  write_file_atomic(root / "manifest.json", out.dump(2) + "\n");
  std::cerr << "synth: " << a.classes * a.count << " volumes and manifest.json in " << a.out_dir
            << '\n';
  return 0;
}

}  // namespace memattn::cli
