#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kdseg {

inline constexpr int kIgnoreIndex = 255;

// C x C pixel counts, counts[gt][pred]. Accumulation is additive, so partial
// matrices from different workers or chunks merge by summing.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return c_; }

  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                  int ignore_index = kIgnoreIndex);

  void merge(const ConfusionMatrix& other);

  std::uint64_t at(int gt, int pred) const;
  std::uint64_t& at(int gt, int pred);

  std::uint64_t total() const;

  // IoU_c = tp / (gt_c + pred_c - tp); nullopt when that denominator is 0.
  std::vector<std::optional<double>> per_class_iou() const;

  // Per-class recall: tp / gt_c; nullopt when the class never occurs in gt.
  std::vector<std::optional<double>> per_class_pa() const;

 private:
  int c_;
  std::vector<std::uint64_t> counts_;
};

struct MetricsSummary {
  std::vector<std::optional<double>> per_class_pa;
  std::vector<std::optional<double>> per_class_iou;
  std::optional<double> mpa;       // global pixel accuracy: trace / total
  std::optional<double> mca;       // mean of defined per-class PA
  std::optional<double> miou;      // mean of defined per-class IoU
  std::optional<double> miou_old;  // mean IoU over the old-class subset
  std::optional<double> miou_new;  // mean IoU over the new-class subset
};

MetricsSummary summarize(const ConfusionMatrix& cm, std::span<const int> old_classes,
                         std::span<const int> new_classes);

// Table-style CSV: one header with class names and the aggregate columns, one
// row per evaluated (method, step) pair carrying per-class IoU.
std::string metrics_csv_header(const std::vector<std::string>& class_names);
std::string metrics_csv_row(const std::string& method, int step, const MetricsSummary& s);

}  // namespace kdseg
