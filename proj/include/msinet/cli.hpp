#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "msinet/data.hpp"
#include "msinet/eval.hpp"
#include "msinet/msi_space.hpp"
#include "msinet/tcm.hpp"
#include "msinet/train.hpp"

namespace msinet {

// Fully resolved settings of one pipeline invocation.
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::string manifest;  // empty: generate the synthetic dataset
  SyntheticConfig data;
  SupernetConfig space;
  SearchConfig search;
  TrainConfig train;
  // msinet | random | searched | fixed:<N|E|G|A> | path to a descriptor file
  std::string arch = "msinet";
  std::size_t max_rank = 20;
  std::size_t eval_batch = 64;
  std::string checkpoint;  // eval input; empty: <out>/checkpoint.txt
  std::string sweep_axis = "rho";
  std::vector<std::string> sweep_values{"1", "2", "3"};

  bool operator==(const RunConfig&) const = default;
};

// Strict `key = value` lines (optionally grouped under `[section]` headers),
// '#' comments. `preset` is applied before every other key regardless of its
// position; `overrides` (`key=value`) are applied last. Unknown keys, bad
// values and inconsistent settings raise ParseError naming the line or override.
RunConfig parse_config(const std::string& text, const std::string& where = "config",
                       const std::vector<std::string>& overrides = {});
// Every key with its resolved value; parse_config of the result reproduces the config.
std::string config_to_text(const RunConfig& cfg);

// The config with one `sweep.values` entry applied on `sweep_axis`.
RunConfig sweep_point(const RunConfig& base, const std::string& value);

// Dataset named by the config: a manifest or the seeded synthetic set.
IdentityDataset load_dataset(const RunConfig& cfg);

// Architecture named by `arch`, relative to an output directory for `searched`.
ArchDescriptor resolve_arch(const RunConfig& cfg, const std::string& out_dir);

// Command bodies. Each writes its artifacts atomically into `out_dir`,
// appending deterministic records to metrics.jsonl and wall-clock records to
// timing.jsonl.
void command_gen_data(const RunConfig& cfg, const std::string& out_dir);
SearchResult command_search(const RunConfig& cfg, const std::string& out_dir);
void command_train(const RunConfig& cfg, const std::string& out_dir);
RetrievalMetrics command_eval(const RunConfig& cfg, const std::string& out_dir);
void command_sweep(const RunConfig& cfg, const std::string& out_dir);

// Entry point behind the `msinet` binary; returns the process exit code:
// 0 success, 1 usage or configuration error, 2 runtime failure.
int run_cli(int argc, char** argv);

}  // namespace msinet
