#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdseg/data.hpp"

namespace kdseg {

enum class Ordering { Given, Alphabetical, FrequencyDescending };
enum class ScenarioMode { Learning, Labeling };

const char* ordering_name(Ordering o);
std::optional<Ordering> parse_ordering(std::string_view name);
const char* scenario_mode_name(ScenarioMode m);
std::optional<ScenarioMode> parse_scenario_mode(std::string_view name);

// The class schedule: S_0 plus the per-step additions U_1..U_K. Classes are
// dataset label ids; background (id 0) always opens S_0. Model channel i

// holds the i-th class in introduction order.
struct ClassSchedule {
  std::vector<int> all_classes;         // full ordering, background first
  std::vector<std::string> names;       // indexed by dataset class id
  std::vector<int> initial;             // S_0
  std::vector<std::vector<int>> steps;  // U_1..U_K
  Ordering ordering = Ordering::Given;

  int num_steps() const { return static_cast<int>(steps.size()); }

  // S_k in channel order (S_0 then U_1..U_k).
  std::vector<int> seen_after(int k) const;
  std::vector<int> channel_order() const { return seen_after(num_steps()); }
  int channels_after(int k) const;

  // channel index by dataset class id after step k; -1 for unseen classes.
  std::vector<int> channel_of_class(int k) const;

  void validate() const;

  // Line-oriented plan text: "step <k>: <class names comma-separated>".
  std::string serialize() const;
  static ClassSchedule parse(const std::string& text, const std::vector<std::string>& names,
                             Ordering ordering);
};

// Dataset ids ordered for schedule construction. Background stays first;
// Alphabetical sorts the rest by name, FrequencyDescending by total pixels
// (descending), ties broken by original index.
std::vector<int> order_classes(const std::vector<std::string>& names,
                               std::span<const std::uint64_t> pixel_counts, Ordering ordering);

struct StepDataset {
  int k = 0;
  std::vector<std::string> sample_ids;
  ScenarioMode mode = ScenarioMode::Learning;
};

// Greedy assignment in step order. A sample joins D_0 iff its classes all lie
// in S_0; it joins D_k (k>=1) iff still unassigned, it contains some class of
// U_k, and it contains nothing outside S_{k-1} u U_k (images with
// not-yet-introduced classes are dropped until their class arrives).
std::vector<StepDataset> build_splits(const DatasetManifest& manifest,
                                      const ClassSchedule& schedule, ScenarioMode mode);

// Incremental-labeling relabel: old classes (S_prev minus background) become
// background; Learning mode returns the map unchanged.
LabelMap relabel(const LabelMap& labels, ScenarioMode mode, std::span<const int> s_prev,
                 std::span<const int> u_k);

// Dataset class ids -> model channels for step k. Unseen classes become the
// ignore label when unseen_to_ignore is set (evaluation), otherwise they are
// a data error (training sets never contain them).
LabelMap remap_to_channels(const LabelMap& labels, const ClassSchedule& schedule, int k,
                           bool unseen_to_ignore);

// Catalog of the experiment plans: add-last-1, add-last-5, add-last-10,
// add-5-then-5, add-5-sequentially, add-10-sequentially.
std::vector<std::string> scenario_names();
ClassSchedule make_scenario(const std::string& name, std::span<const int> ordered_classes,
                            const std::vector<std::string>& class_names, Ordering ordering);

}  // namespace kdseg
