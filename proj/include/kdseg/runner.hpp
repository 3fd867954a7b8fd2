#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdseg/scenario.hpp"
#include "kdseg/trainer.hpp"

namespace kdseg {

// Everything cmd_run needs, resolved and validated before any output exists.
struct RunOptions {
  std::filesystem::path data_manifest;
  std::string scenario = "add-last-1";
  ScenarioMode mode = ScenarioMode::Learning;
  Ordering ordering = Ordering::Given;
  std::filesystem::path out_dir;
  std::string method_label;  // defaults to a distill/freeze derived name

  // Initial stage LR; incremental steps use lr_inc_start.
  float lr_start = 1e-4f;
  float lr_inc_start = 5e-5f;
  TrainConfig train;  // lr_start field is overridden per stage
};

// Deterministic 80/20 split: val iff fnv1a64(id) % 5 == 0.
std::uint64_t fnv1a64(std::string_view s);
bool is_validation_id(const std::string& id);

struct RunResult {
  std::vector<std::filesystem::path> checkpoints;  // M0..MK
  std::filesystem::path metrics_csv;
  std::filesystem::path plan_file;
};

// Full experiment: M_0 training, every incremental step, per-step held-out
// evaluation. The run directory is self-describing (config.json + plan.txt).
RunResult run_experiment(const RunOptions& opts);

// Merged comparison table across run directories, one row per (method, step).
std::string merge_reports(const std::vector<std::filesystem::path>& run_dirs);

std::string default_method_label(const RunOptions& opts);

}  // namespace kdseg
