#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "memattn/errors.hpp"

using namespace memattn;
using namespace memattn::cli;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kConfigFailure = 2;

void add_encoder_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--config", f.config_path, "JSON config file (flags override it)");
  app->add_option("--encoder", f.encoder_path, "Encoder weights file");
  app->add_option("--seed", f.seed, "Initialize encoder weights from this seed");
}

void add_memory_flags(CLI::App* app, RunFlags& f, bool with_k) {
  app->add_option("--bank", f.banks, "Bank file(s), comma separated")->delimiter(',');
  if (with_k) app->add_option("--k", f.k, "Memories retrieved per memorizing layer (3)");
  app->add_option("--r-local", f.r_local, "Local attention ratio R_L (0.3)");
  app->add_option("--fusion", f.fusion, "normalized | paper-literal");
  app->add_option("--epsilon", f.epsilon, "Distance clamp (1e-6)");
  app->add_option("--cache-cap", f.cache_capacity,
                  "Payload cache capacity in entries (env MEMATTN_CACHE_CAP)");
}

void add_query_flags(CLI::App* app, QueryArgs& q) {
  app->add_option("--inputs", q.inputs, "Query volumes, comma separated")->delimiter(',');
  app->add_option("--synthetic", q.synthetic, "Synthetic query volumes when no --inputs");
  app->add_option("--input-seed", q.input_seed, "Seed for synthetic query volumes");
}

bool is_config_error(const std::exception& e) {
  return dynamic_cast<const ConfigError*>(&e) != nullptr ||
         dynamic_cast<const ParameterError*>(&e) != nullptr ||
         dynamic_cast<const SchemaError*>(&e) != nullptr ||
         dynamic_cast<const BankIncompatibleError*>(&e) != nullptr ||
         dynamic_cast<const DimensionError*>(&e) != nullptr;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memorizing-attention volumetric encoder: banks, inference, benchmarks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "memattn 0.1.0");

  BuildBankArgs build;
  auto* build_cmd = app.add_subcommand("build-bank", "Capture class banks from a manifest");
  build_cmd->add_option("--manifest", build.manifest, "Class manifest JSON")->required();
  build_cmd->add_option("--out", build.out, "Output bank (single-class manifest)");
  build_cmd->add_option("--out-dir", build.out_dir, "Output directory, one bank per class");
  build_cmd->add_option("--report", build.report, "Also write the build report here");
  build_cmd->add_option("--threads", build.run.threads, "Encoding workers (0 = all cores)");
  add_encoder_flags(build_cmd, build.run);

  InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "Encode one volume, optionally with memory");
  infer_cmd->add_option("--input", infer.input, "Input volume")->required();
  infer_cmd->add_option("--out", infer.out, "Output feature file")->required();
  infer_cmd->add_option("--trace", infer.trace, "Write retrieval trace JSON here");
  infer_cmd->add_flag("--dense", infer.run.dense, "Skip memory entirely (k = 0)");
  add_encoder_flags(infer_cmd, infer.run);
  add_memory_flags(infer_cmd, infer.run, true);

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Latency, FLOPs, params and cache report");
  bench_cmd->add_option("--mode", bench.mode, "dense | memorizing | both")
      ->check(CLI::IsMember({"dense", "memorizing", "both"}));
  bench_cmd->add_option("--reps", bench.repetitions, "Timed repetitions per volume");
  bench_cmd->add_option("--warmup", bench.warmup, "Untimed warmup passes");
  bench_cmd->add_option("--json", bench.json_out, "Also write the JSON report here");
  add_encoder_flags(bench_cmd, bench.run);
  add_memory_flags(bench_cmd, bench.run, true);
  add_query_flags(bench_cmd, bench.queries);

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep k and emit a CSV");
  ablate_cmd->add_option("--k-values", ablate.k_values, "k values (1,3,5,7)")->delimiter(',');
  ablate_cmd->add_option("--reps", ablate.repetitions, "Timed repetitions per volume");
  ablate_cmd->add_option("--out", ablate.out, "Also write the CSV here");
  add_encoder_flags(ablate_cmd, ablate.run);
  add_memory_flags(ablate_cmd, ablate.run, false);
  add_query_flags(ablate_cmd, ablate.queries);

  InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect-bank", "Print a bank's header and classes");
  inspect_cmd->add_option("bank", inspect.bank, "Bank file")->required();
  inspect_cmd->add_flag("--json", inspect.json, "Machine-readable output");

  MergeArgs merge;
  auto* merge_cmd = app.add_subcommand("merge-banks", "Concatenate banks of equal geometry");
  merge_cmd->add_option("inputs", merge.inputs, "Input banks")->required();
  merge_cmd->add_option("--out", merge.out, "Merged bank")->required();

  InitEncoderArgs init;
  auto* init_cmd = app.add_subcommand("init-encoder", "Write seeded encoder weights");
  init_cmd->add_option("--out", init.out, "Output weights file")->required();
  add_encoder_flags(init_cmd, init.run);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic volumes and a manifest");
  synth_cmd->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--count", synth.count, "Volumes per class");
  synth_cmd->add_option("--classes", synth.classes, "Number of classes");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--dims", synth.dims, "Volume dims D,H,W")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigFailure;
  }

  try {
    if (build_cmd->parsed()) return cmd_build_bank(build);
    if (infer_cmd->parsed()) return cmd_infer(infer);
    if (bench_cmd->parsed()) return cmd_bench(bench);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate);
    if (inspect_cmd->parsed()) return cmd_inspect_bank(inspect);
    if (merge_cmd->parsed()) return cmd_merge_banks(merge);
    if (init_cmd->parsed()) return cmd_init_encoder(init);
    if (synth_cmd->parsed()) return cmd_synth(synth);
  } catch (const std::exception& e) {
    const bool config = is_config_error(e);
    std::cerr << "memattn: " << (config ? "configuration error: " : "error: ") << e.what()
              << '\n';
    return config ? kConfigFailure : kRuntimeFailure;
  }
  return kConfigFailure;
}
