#include "kdseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "kdseg/error.hpp"

namespace kdseg {

ConfusionMatrix::ConfusionMatrix(int num_classes) : c_(num_classes) {
  if (num_classes < 1) throw ParamError("confusion matrix needs at least 1 class");
  counts_.assign(static_cast<std::size_t>(c_) * static_cast<std::size_t>(c_), 0);
}

void ConfusionMatrix::accumulate(std::span<const std::uint8_t> pred,
                                 std::span<const std::uint8_t> gt, int ignore_index) {
  if (pred.size() != gt.size()) throw ParamError("pred/gt size mismatch in accumulate");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int g = gt[i];
    if (g == ignore_index) continue;
    const int p = pred[i];
    if (g >= c_) throw DataError("ground-truth class " + std::to_string(g) + " out of range");
    if (p >= c_ || p == ignore_index)
      throw DataError("predicted class " + std::to_string(p) + " out of range");
    counts_[static_cast<std::size_t>(g) * c_ + p]++;
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.c_ != c_) throw ParamError("confusion matrix class count mismatch in merge");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::at(int gt, int pred) const {
  return counts_[static_cast<std::size_t>(gt) * c_ + pred];
}

std::uint64_t& ConfusionMatrix::at(int gt, int pred) {
  return counts_[static_cast<std::size_t>(gt) * c_ + pred];
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::vector<std::optional<double>> ConfusionMatrix::per_class_iou() const {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(c_));
  for (int c = 0; c < c_; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < c_; ++j) {
      row += at(c, j);
      col += at(j, c);
    }
    const std::uint64_t tp = at(c, c);
    const std::uint64_t denom = row + col - tp;
    if (denom > 0) out[static_cast<std::size_t>(c)] = double(tp) / double(denom);
  }
  return out;
}

std::vector<std::optional<double>> ConfusionMatrix::per_class_pa() const {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(c_));
  for (int c = 0; c < c_; ++c) {
    std::uint64_t row = 0;
    for (int j = 0; j < c_; ++j) row += at(c, j);
    if (row > 0) out[static_cast<std::size_t>(c)] = double(at(c, c)) / double(row);
  }
  return out;
}

namespace {

std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) {
      sum += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / double(n);
}

std::optional<double> mean_subset(const std::vector<std::optional<double>>& v,
                                  std::span<const int> classes) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int c : classes) {
    const auto& x = v[static_cast<std::size_t>(c)];
    if (x) {
      sum += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / double(n);
}

}  // namespace

MetricsSummary summarize(const ConfusionMatrix& cm, std::span<const int> old_classes,
                         std::span<const int> new_classes) {
  MetricsSummary s;
  s.per_class_pa = cm.per_class_pa();
  s.per_class_iou = cm.per_class_iou();
  s.mca = mean_defined(s.per_class_pa);
  s.miou = mean_defined(s.per_class_iou);
  const std::uint64_t total = cm.total();
  if (total > 0) {
    std::uint64_t trace = 0;
    for (int c = 0; c < cm.num_classes(); ++c) trace += cm.at(c, c);
    s.mpa = double(trace) / double(total);
  }
  s.miou_old = mean_subset(s.per_class_iou, old_classes);
  s.miou_new = mean_subset(s.per_class_iou, new_classes);
  return s;
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

}  // namespace

std::string metrics_csv_header(const std::vector<std::string>& class_names) {
  std::string s = "method,step";
  for (const auto& n : class_names) s += "," + n;
  s += ",mIoU old,mIoU new,mIoU,mPA,mCA";
  return s;
}

std::string metrics_csv_row(const std::string& method, int step, const MetricsSummary& s) {
  std::string row = method + "," + std::to_string(step);
  for (const auto& v : s.per_class_iou) row += "," + fmt_opt(v);
  row += "," + fmt_opt(s.miou_old);
  row += "," + fmt_opt(s.miou_new);
  row += "," + fmt_opt(s.miou);
  row += "," + fmt_opt(s.mpa);
  row += "," + fmt_opt(s.mca);
  return row;
}

}  // namespace kdseg
