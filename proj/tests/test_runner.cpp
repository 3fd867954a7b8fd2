#include <fstream>
#include <sstream>

#include "doctest.h"
#include "kdseg/error.hpp"
#include "kdseg/runner.hpp"
#include "test_util.hpp"

using namespace kdseg;

namespace {

SyntheticSpec tiny_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = 5;
  spec.images = 60;
  spec.size = 32;
  spec.seed = seed;
  return spec;
}

RunOptions tiny_opts(const std::filesystem::path& manifest, const std::filesystem::path& out) {
  RunOptions opts;
  opts.data_manifest = manifest;
  opts.out_dir = out;
  opts.scenario = "add-last-1";
  opts.lr_start = 1e-3f;
  opts.lr_inc_start = 5e-4f;
  opts.train.steps_per_class = 2;
  opts.train.batch_size = 2;
  opts.train.crop = 32;
  opts.train.seed = 3;
  return opts;
}

}  // namespace

TEST_CASE("id-hash split is deterministic and roughly 80/20") {
  int val = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    const std::string id = "img_" + std::to_string(i);
    if (is_validation_id(id)) ++val;
    CHECK(is_validation_id(id) == is_validation_id(id));
  }
  CHECK(val > n / 10);
  CHECK(val < n * 3 / 10);
}

TEST_CASE("method labels derive from the configuration") {
  RunOptions opts;
  CHECK(default_method_label(opts) == "fine-tuning");
  opts.train.distill.variant = DistillVariant::ClsT;
  opts.train.distill.lambda_d = 0.0f;  // lambda 0 is still fine-tuning
  CHECK(default_method_label(opts) == "fine-tuning");
  opts.train.distill.lambda_d = 1.0f;
  CHECK(default_method_label(opts) == "cls-t");
  opts.train.freeze = FreezePolicy::EncoderFrozen;
  CHECK(default_method_label(opts) == "ef+cls-t");
  opts.train.distill.variant = DistillVariant::None;
  CHECK(default_method_label(opts) == "ef");
}

TEST_CASE("run_experiment fails fast without creating the output directory") {
  TempDir dir("runner_failfast");
  auto manifest = generate(tiny_spec(19), dir.path() / "data");

  auto opts = tiny_opts(dir.path() / "data" / "manifest.tsv", dir.path() / "out");
  opts.scenario = "add-last-10";  // needs 12+ classes, dataset has 5
  CHECK_THROWS_AS(run_experiment(opts), ParamError);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "out"));

  opts.scenario = "add-last-1";
  opts.train.crop = 30;  // not divisible by 4
  CHECK_THROWS_AS(run_experiment(opts), ParamError);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "out"));
}

TEST_CASE("run_experiment writes a self-describing run directory") {
  TempDir dir("runner_run");
  generate(tiny_spec(23), dir.path() / "data");
  auto opts = tiny_opts(dir.path() / "data" / "manifest.tsv", dir.path() / "out");
  opts.train.distill.variant = DistillVariant::SPKDAvg;
  opts.train.distill.lambda_d = 0.5f;
  auto result = run_experiment(opts);

  REQUIRE(result.checkpoints.size() == 2);
  for (const auto& p : result.checkpoints) CHECK(std::filesystem::exists(p));
  CHECK(std::filesystem::exists(result.plan_file));
  CHECK(std::filesystem::exists(dir.path() / "out" / "config.json"));
  CHECK(std::filesystem::exists(dir.path() / "out" / "logs" / "M0.log"));
  CHECK(std::filesystem::exists(dir.path() / "out" / "logs" / "M1.log"));

  std::ifstream cfg(dir.path() / "out" / "config.json");
  std::stringstream buf;
  buf << cfg.rdbuf();
  const std::string text = buf.str();
  CHECK(text.find("\"distill\": \"spkd-avg\"") != std::string::npos);
  CHECK(text.find("\"scenario\": \"add-last-1\"") != std::string::npos);
  CHECK(text.find("\"seed\": 3") != std::string::npos);

  std::ifstream metrics(result.metrics_csv);
  std::string header, row0, row1;
  REQUIRE(std::getline(metrics, header));
  REQUIRE(std::getline(metrics, row0));
  REQUIRE(std::getline(metrics, row1));
  CHECK(header ==
        "method,step,background,circle,square,triangle,diamond,mIoU old,mIoU new,mIoU,mPA,mCA");
  CHECK(row0.rfind("spkd-avg,0,", 0) == 0);
  CHECK(row1.rfind("spkd-avg,1,", 0) == 0);
}

TEST_CASE("merge_reports joins runs and rejects inconsistent class sets") {
  TempDir dir("runner_report");
  generate(tiny_spec(29), dir.path() / "data");

  auto opts_a = tiny_opts(dir.path() / "data" / "manifest.tsv", dir.path() / "ft");
  run_experiment(opts_a);
  auto opts_b = opts_a;
  opts_b.out_dir = dir.path() / "kd";
  opts_b.train.distill.variant = DistillVariant::ClsT;
  opts_b.train.freeze = FreezePolicy::EncoderFrozen;
  run_experiment(opts_b);

  // Single run: pass-through.
  const std::string single = merge_reports({dir.path() / "ft"});
  std::istringstream sin(single);
  std::string line;
  int rows = 0;
  REQUIRE(std::getline(sin, line));
  CHECK(line.rfind("method,step,", 0) == 0);
  while (std::getline(sin, line)) ++rows;
  CHECK(rows == 2);

  // Two runs: one method row group per run, shared header.
  const std::string merged = merge_reports({dir.path() / "ft", dir.path() / "kd"});
  CHECK(merged.find("fine-tuning,0,") != std::string::npos);
  CHECK(merged.find("ef+cls-t,1,") != std::string::npos);

  // Different class universe: header mismatch is a report error.
  TempDir other("runner_other");
  generate([&] {
    auto s = tiny_spec(31);
    s.num_classes = 6;
    return s;
  }(), other.path() / "data");
  auto opts_c = tiny_opts(other.path() / "data" / "manifest.tsv", other.path() / "run");
  run_experiment(opts_c);
  CHECK_THROWS_AS(merge_reports({dir.path() / "ft", other.path() / "run"}), ReportError);
  CHECK_THROWS_AS(merge_reports({}), ReportError);
  CHECK_THROWS_AS(merge_reports({dir.path() / "nope"}), ReportError);
}

TEST_CASE("multi-variant distillation sums terms behind the config list") {
  TempDir dir("runner_multi");
  generate(tiny_spec(37), dir.path() / "data");

  // lambda 0 keeps every run on the identical CE-only trajectory, so the
  // logged distill values are comparable step by step across runs.
  auto distill_values = [&](DistillVariant primary, std::vector<DistillVariant> extras,
                            const std::filesystem::path& out) {
    auto opts = tiny_opts(dir.path() / "data" / "manifest.tsv", out);
    opts.train.steps_per_class = 3;
    opts.train.log_every = 1;
    opts.train.distill.variant = primary;
    opts.train.distill.extra_variants = std::move(extras);
    opts.train.distill.lambda_d = 0.0f;
    run_experiment(opts);
    std::ifstream log(out / "logs" / "M1.log");
    std::string word, line;
    std::vector<double> values;
    while (std::getline(log, line)) {
      std::istringstream ls(line);
      double value = -1.0;
      while (ls >> word)
        if (word == "distill") ls >> value;
      REQUIRE(value >= 0.0);
      values.push_back(value);
    }
    REQUIRE(values.size() == 3);
    return values;
  };

  const auto enc = distill_values(DistillVariant::Enc, {}, dir.path() / "enc");
  const auto avg = distill_values(DistillVariant::SPKDAvg, {}, dir.path() / "avg");
  const auto both =
      distill_values(DistillVariant::Enc, {DistillVariant::SPKDAvg}, dir.path() / "both");

  // Freshly extended student equals the teacher, so the feature-space term
  // vanishes on the first batch, then grows as CE updates pull them apart.
  CHECK(enc[0] == 0.0);
  CHECK(enc[2] > 0.0);
  for (std::size_t t = 0; t < 3; ++t)
    CHECK(both[t] == doctest::Approx(enc[t] + avg[t]).epsilon(1e-5));
  CHECK(both[2] > 0.0);
}
