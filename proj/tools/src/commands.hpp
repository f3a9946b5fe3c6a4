#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace memattn::cli {

struct BuildBankArgs {
  RunFlags run;
  std::string manifest;
  std::optional<std::string> out;
  std::optional<std::string> out_dir;
  std::optional<std::string> report;
};

struct InferArgs {
  RunFlags run;
  std::string input;
  std::string out;
  std::optional<std::string> trace;
};

// Query volumes for bench/ablate: files, or synthetic ones from a seed.
struct QueryArgs {
  std::vector<std::string> inputs;
  std::size_t synthetic = 4;
  std::uint64_t input_seed = 1;
};

struct BenchArgs {
  RunFlags run;
  QueryArgs queries;
  std::string mode = "both";
  std::size_t repetitions = 5;
  std::size_t warmup = 1;
  std::optional<std::string> json_out;
};

struct AblateArgs {
  RunFlags run;
  QueryArgs queries;
  std::vector<std::size_t> k_values{1, 3, 5, 7};
  std::size_t repetitions = 1;
  std::optional<std::string> out;
};

struct InspectArgs {
  std::string bank;
  bool json = false;
};

struct MergeArgs {
  std::vector<std::string> inputs;
  std::string out;
};

struct InitEncoderArgs {
  RunFlags run;
  std::string out;
};

struct SynthArgs {
  std::string out_dir;
  std::size_t count = 8;
  std::uint32_t classes = 1;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> dims{32, 32, 32};
};

int cmd_build_bank(const BuildBankArgs& args);
int cmd_infer(const InferArgs& args);
int cmd_bench(const BenchArgs& args);
int cmd_ablate(const AblateArgs& args);
int cmd_inspect_bank(const InspectArgs& args);
int cmd_merge_banks(const MergeArgs& args);
int cmd_init_encoder(const InitEncoderArgs& args);
int cmd_synth(const SynthArgs& args);

}  // namespace memattn::cli
