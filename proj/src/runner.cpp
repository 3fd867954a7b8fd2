#include "kdseg/runner.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "kdseg/checkpoint.hpp"
#include "kdseg/error.hpp"
#include "kdseg/log.hpp"

namespace kdseg {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

bool is_validation_id(const std::string& id) { return fnv1a64(id) % 5 == 0; }

std::string default_method_label(const RunOptions& opts) {
  std::string label;
  if (opts.train.freeze == FreezePolicy::EncoderFrozen) label = "ef";
  else if (opts.train.freeze == FreezePolicy::FirstTwoLayersFrozen) label = "e2lf";
  const bool distilling =
      opts.train.distill.variant != DistillVariant::None && opts.train.distill.lambda_d > 0.0f;
  if (distilling) {
    if (!label.empty()) label += "+";
    label += distill_variant_name(opts.train.distill.variant);
    for (DistillVariant v : opts.train.distill.extra_variants)
      label += std::string("+") + distill_variant_name(v);
  }
  return label.empty() ? "fine-tuning" : label;
}

namespace {

nlohmann::json config_json(const RunOptions& opts, const std::string& method,
                           const ClassSchedule& schedule, int num_classes) {
  nlohmann::json j;
  j["data"] = opts.data_manifest.string();
  j["scenario"] = opts.scenario;
  j["mode"] = scenario_mode_name(opts.mode);
  j["order"] = ordering_name(opts.ordering);
  j["method"] = method;
  j["num_classes"] = num_classes;
  j["plan"] = "plan.txt";
  j["eval_split"] = "val iff fnv1a64(id) % 5 == 0";
  j["lr_start"] = opts.lr_start;
  j["lr_inc_start"] = opts.lr_inc_start;
  j["lr_end"] = opts.train.lr_end;
  j["power"] = opts.train.power;
  j["steps_per_class"] = opts.train.steps_per_class;
  j["weight_decay"] = opts.train.weight_decay;
  j["momentum"] = opts.train.momentum;
  j["batch_size"] = opts.train.batch_size;
  j["crop"] = opts.train.crop;
  j["seed"] = opts.train.seed;
  j["distill"] = distill_variant_name(opts.train.distill.variant);
  j["lambda_d"] = opts.train.distill.lambda_d;
  j["temperature"] = opts.train.distill.temperature;
  j["dec_branches"] = opts.train.distill.dec_branches;
  j["freeze"] = freeze_policy_name(opts.train.freeze);
  j["classes"] = schedule.names;
  return j;
}

// Per-class IoU columns are laid out by dataset class id; unseen classes stay
// blank until their step.
MetricsSummary dataset_order_summary(const ConfusionMatrix& cm, const ClassSchedule& schedule,
                                     int k, int num_classes) {
  const auto channel_summary = summarize(cm, {}, {});
  MetricsSummary out;
  out.per_class_pa.assign(static_cast<std::size_t>(num_classes), std::nullopt);
  out.per_class_iou.assign(static_cast<std::size_t>(num_classes), std::nullopt);
  const auto seen = schedule.seen_after(k);
  for (std::size_t ch = 0; ch < seen.size(); ++ch) {
    out.per_class_pa[static_cast<std::size_t>(seen[ch])] = channel_summary.per_class_pa[ch];
    out.per_class_iou[static_cast<std::size_t>(seen[ch])] = channel_summary.per_class_iou[ch];
  }
  out.mpa = channel_summary.mpa;
  out.mca = channel_summary.mca;
  out.miou = channel_summary.miou;

  std::vector<int> old_channels, new_channels;
  const int old_count = schedule.channels_after(k > 0 ? k - 1 : 0);
  for (int ch = 0; ch < old_count; ++ch) old_channels.push_back(ch);
  if (k > 0)
    for (int ch = old_count; ch < schedule.channels_after(k); ++ch) new_channels.push_back(ch);
  const auto grouped = summarize(cm, old_channels, new_channels);
  out.miou_old = grouped.miou_old;
  out.miou_new = grouped.miou_new;
  return out;
}

}  // namespace

RunResult run_experiment(const RunOptions& opts) {
  // Everything that can fail from bad configuration happens before the output
  // directory is created.
  opts.train.validate();
  DatasetManifest manifest = load_manifest(opts.data_manifest);
  if (manifest.records.empty()) throw DataError("dataset manifest is empty");
  const int num_classes = manifest.num_classes();
  auto names = synthetic_class_names(num_classes);

  std::vector<std::uint64_t> counts;
  if (opts.ordering == Ordering::FrequencyDescending) counts = class_pixel_counts(manifest);
  else counts.assign(static_cast<std::size_t>(num_classes), 0);
  auto ordered = order_classes(names, counts, opts.ordering);
  ClassSchedule schedule = make_scenario(opts.scenario, ordered, names, opts.ordering);

  DatasetManifest train_part, val_part;
  train_part.root = val_part.root = manifest.root;
  for (const auto& r : manifest.records)
    (is_validation_id(r.id) ? val_part : train_part).records.push_back(r);
  if (train_part.records.empty() || val_part.records.empty())
    throw DataError("train/val split left one side empty");
  auto splits = build_splits(train_part, schedule, opts.mode);

  std::vector<std::string> val_ids;
  for (const auto& r : val_part.records) val_ids.push_back(r.id);

  const std::string method =
      opts.method_label.empty() ? default_method_label(opts) : opts.method_label;

  // Configuration is sound; now the run directory may exist.
  std::filesystem::create_directories(opts.out_dir / "logs");
  RunResult result;
  result.plan_file = opts.out_dir / "plan.txt";
  {
    std::ofstream plan(result.plan_file);
    plan << schedule.serialize();
  }
  {
    std::ofstream cfg(opts.out_dir / "config.json");
    cfg << config_json(opts, method, schedule, num_classes).dump(2) << "\n";
  }

  std::ostringstream csv;
  csv << metrics_csv_header(names) << "\n";

  TrainConfig stage = opts.train;
  stage.lr_start = opts.lr_start;
  log_info("run ", method, ": training M0 on ", splits[0].sample_ids.size(), " samples");
  SegModel model(schedule.channels_after(0), stage.seed);
  {
    std::ofstream log_file(opts.out_dir / "logs" / "M0.log");
    train_initial(model, train_part, splits[0], schedule, stage, &log_file);
  }
  const auto ckpt0 = opts.out_dir / "M0.ckpt";
  save_checkpoint(model, ckpt0);
  result.checkpoints.push_back(ckpt0);
  csv << metrics_csv_row(method, 0,
                         dataset_order_summary(evaluate(model, manifest, val_ids, schedule, 0),
                                               schedule, 0, num_classes))
      << "\n";

  for (int k = 1; k <= schedule.num_steps(); ++k) {
    const int added = static_cast<int>(schedule.steps[static_cast<std::size_t>(k - 1)].size());
    log_info("run ", method, ": incremental step ", k, " adds ", added, " class(es) on ",
             splits[static_cast<std::size_t>(k)].sample_ids.size(), " samples");
    ModelSnapshot teacher = snapshot(model);
    SegModel student = extend_classifier(model, added, stage.seed + static_cast<std::uint64_t>(k));
    TrainConfig inc = opts.train;
    inc.lr_start = opts.lr_inc_start;
    {
      std::ofstream log_file(opts.out_dir / "logs" / ("M" + std::to_string(k) + ".log"));
      train_incremental(teacher, student, train_part, splits[static_cast<std::size_t>(k)],
                        schedule, k, inc, &log_file);
    }
    model = std::move(student);
    const auto ckpt = opts.out_dir / ("M" + std::to_string(k) + ".ckpt");
    save_checkpoint(model, ckpt);
    result.checkpoints.push_back(ckpt);
    csv << metrics_csv_row(method, k,
                           dataset_order_summary(evaluate(model, manifest, val_ids, schedule, k),
                                                 schedule, k, num_classes))
        << "\n";
  }

  result.metrics_csv = opts.out_dir / "metrics.csv";
  std::ofstream mcsv(result.metrics_csv, std::ios::binary | std::ios::trunc);
  mcsv << csv.str();
  return result;
}

std::string merge_reports(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.empty()) throw ReportError("no run directories given");
  std::string header;
  std::ostringstream merged;
  for (const auto& dir : run_dirs) {
    std::ifstream in(dir / "metrics.csv");
    if (!in) throw ReportError("missing metrics.csv in " + dir.string());
    std::string line;
    if (!std::getline(in, line)) throw ReportError("empty metrics.csv in " + dir.string());
    if (header.empty()) {
      header = line;
      merged << header << "\n";
    } else if (line != header) {
      throw ReportError("inconsistent class sets: " + dir.string());
    }
    while (std::getline(in, line))
      if (!line.empty()) merged << line << "\n";
  }
  return merged.str();
}

}  // namespace kdseg
