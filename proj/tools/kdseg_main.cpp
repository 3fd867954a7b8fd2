#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kdseg/data.hpp"
#include "kdseg/error.hpp"
#include "kdseg/log.hpp"
#include "kdseg/runner.hpp"

namespace fs = std::filesystem;
using namespace kdseg;

namespace {

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cmd_gen(const SyntheticSpec& spec, const fs::path& out, bool verify) {
  if (!verify) {
    auto manifest = generate(spec, out);
    log_info("generated ", manifest.records.size(), " samples under ", out.string());
    return 0;
  }

  // Idempotence check: regenerate into a scratch directory and compare bytes.
  const fs::path tmp = out / ".verify_tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  auto fresh = generate(spec, tmp);
  auto existing = load_manifest(out / "manifest.tsv");
  int rc = 0;
  if (slurp(tmp / "manifest.tsv") != slurp(out / "manifest.tsv")) {
    log_error("manifest differs from a fresh generation");
    rc = 1;
  } else {
    for (const auto& rec : fresh.records) {
      if (slurp(tmp / rec.image_path) != slurp(out / rec.image_path) ||
          slurp(tmp / rec.label_path) != slurp(out / rec.label_path)) {
        log_error("sample ", rec.id, " differs from a fresh generation");
        rc = 1;
        break;
      }
    }
  }
  fs::remove_all(tmp, ec);
  if (rc == 0) log_info("verified: ", existing.records.size(), " samples are reproducible");
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental class learning for semantic segmentation with knowledge distillation"};
  app.require_subcommand(1);

  // --- gen ---
  auto* gen = app.add_subcommand("gen", "Generate the synthetic shapes dataset");
  SyntheticSpec spec;
  std::string gen_out;
  bool gen_verify = false;
  gen->add_option("--classes", spec.num_classes, "Class count incl. background")->capture_default_str();
  gen->add_option("--images", spec.images, "Number of images")->capture_default_str();
  gen->add_option("--size", spec.size, "Image size (H=W, divisible by 4)")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  gen->add_option("--skew", spec.class_frequency_skew, "Geometric class frequency decay")
      ->capture_default_str();
  gen->add_option("--shapes-min", spec.shapes_min, "Min shapes per image")->capture_default_str();
  gen->add_option("--shapes-max", spec.shapes_max, "Max shapes per image")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--verify", gen_verify, "Compare existing files against a fresh generation");

  // --- run ---
  auto* run = app.add_subcommand("run", "Run an incremental learning experiment");
  RunOptions opts;
  std::string run_data, run_out, run_mode = "learning", run_order = "given";
  std::string run_distill = "none", run_freeze = "none", run_label;
  run->add_option("--data", run_data, "Dataset manifest file")->required();
  run->add_option("--scenario", opts.scenario, "One of the named class schedules")
      ->capture_default_str();
  run->add_option("--mode", run_mode, "learning | labeling")->capture_default_str();
  run->add_option("--order", run_order, "given | alphabetical | frequency")->capture_default_str();
  run->add_option("--distill", run_distill, "none | cls-t | enc | dec | spkd | spkd-avg")
      ->capture_default_str();
  run->add_option("--lambda", opts.train.distill.lambda_d, "Distillation weight")
      ->capture_default_str();
  run->add_option("--temp", opts.train.distill.temperature, "Softmax temperature")
      ->capture_default_str();
  run->add_option("--branches", opts.train.distill.dec_branches,
                  "Dilation branches for the dec loss (1..4)");
  run->add_option("--freeze", run_freeze, "none | encoder | first-two")->capture_default_str();
  run->add_option("--seed", opts.train.seed, "Training seed")->capture_default_str();
  run->add_option("--steps-per-class", opts.train.steps_per_class, "Optimizer steps per class")
      ->capture_default_str();
  run->add_option("--lr-start", opts.lr_start, "Initial-stage starting LR")->capture_default_str();
  run->add_option("--lr-inc-start", opts.lr_inc_start, "Incremental-step starting LR")
      ->capture_default_str();
  run->add_option("--lr-end", opts.train.lr_end, "Final LR")->capture_default_str();
  run->add_option("--batch", opts.train.batch_size, "Batch size")->capture_default_str();
  run->add_option("--crop", opts.train.crop, "Training crop size")->capture_default_str();
  run->add_option("--weight-decay", opts.train.weight_decay, "Weight decay")->capture_default_str();
  run->add_option("--momentum", opts.train.momentum, "SGD momentum")->capture_default_str();
  run->add_option("--log-every", opts.train.log_every, "Log interval")->capture_default_str();
  run->add_option("--label", run_label, "Method label used in the metrics table");
  run->add_option("--out", run_out, "Run output directory")->required();

  // --- report ---
  auto* report = app.add_subcommand("report", "Merge run metrics into one comparison table");
  std::vector<std::string> report_runs;
  std::string report_out;
  report->add_option("--runs", report_runs, "Run directories")->required()->expected(-1);
  report->add_option("--out", report_out, "Merged CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(spec, gen_out, gen_verify);

    if (run->parsed()) {
      auto mode = parse_scenario_mode(run_mode);
      if (!mode) throw ParamError("unknown mode: " + run_mode);
      auto order = parse_ordering(run_order);
      if (!order) throw ParamError("unknown ordering: " + run_order);
      auto variant = parse_distill_variant(run_distill);
      if (!variant) throw ParamError("unknown distillation variant: " + run_distill);
      opts.mode = *mode;
      opts.ordering = *order;
      opts.train.distill.variant = *variant;
      if (run_freeze == "none") opts.train.freeze = FreezePolicy::None;
      else if (run_freeze == "encoder") opts.train.freeze = FreezePolicy::EncoderFrozen;
      else if (run_freeze == "first-two") opts.train.freeze = FreezePolicy::FirstTwoLayersFrozen;
      else throw ParamError("unknown freeze policy: " + run_freeze);
      opts.data_manifest = run_data;
      opts.out_dir = run_out;
      opts.method_label = run_label;

      auto result = run_experiment(opts);
      log_info("wrote ", result.checkpoints.size(), " checkpoints and ",
               result.metrics_csv.string());
      return 0;
    }

    if (report->parsed()) {
      std::vector<fs::path> dirs(report_runs.begin(), report_runs.end());
      const std::string table = merge_reports(dirs);
      std::ofstream out(report_out, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write " + report_out);
      out << table;
      log_info("wrote ", report_out);
      return 0;
    }
  } catch (const Error& e) {
    log_error(e.what());
    return 1;
  } catch (const std::exception& e) {
    log_error("unexpected: ", e.what());
    return 1;
  }
  return 0;
}
