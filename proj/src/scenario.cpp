#include "kdseg/scenario.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "kdseg/error.hpp"

namespace kdseg {

const char* ordering_name(Ordering o) {
  switch (o) {
    case Ordering::Alphabetical: return "alphabetical";
    case Ordering::FrequencyDescending: return "frequency";
    default: return "given";
  }
}

std::optional<Ordering> parse_ordering(std::string_view name) {
  if (name == "given") return Ordering::Given;
  if (name == "alphabetical") return Ordering::Alphabetical;
  if (name == "frequency") return Ordering::FrequencyDescending;
  return std::nullopt;
}

const char* scenario_mode_name(ScenarioMode m) {
  return m == ScenarioMode::Labeling ? "labeling" : "learning";
}

std::optional<ScenarioMode> parse_scenario_mode(std::string_view name) {
  if (name == "learning") return ScenarioMode::Learning;
  if (name == "labeling") return ScenarioMode::Labeling;
  return std::nullopt;
}

std::vector<int> ClassSchedule::seen_after(int k) const {
  if (k < 0 || k > num_steps()) throw ParamError("step index " + std::to_string(k) + " out of range");
  std::vector<int> seen = initial;
  for (int i = 0; i < k; ++i)
    seen.insert(seen.end(), steps[static_cast<std::size_t>(i)].begin(),
                steps[static_cast<std::size_t>(i)].end());
  return seen;
}

int ClassSchedule::channels_after(int k) const {
  return static_cast<int>(seen_after(k).size());
}

std::vector<int> ClassSchedule::channel_of_class(int k) const {
  std::vector<int> map(names.size(), -1);
  const auto seen = seen_after(k);
  for (std::size_t ch = 0; ch < seen.size(); ++ch)
    map[static_cast<std::size_t>(seen[ch])] = static_cast<int>(ch);
  return map;
}

void ClassSchedule::validate() const {
  if (all_classes.empty()) throw ScenarioError("schedule has no classes");
  if (initial.empty()) throw ScenarioError("S_0 is empty");
  if (std::find(initial.begin(), initial.end(), 0) == initial.end())
    throw ScenarioError("background class must belong to S_0");

  std::set<int> seen;
  auto add_disjoint = [&](std::span<const int> group, const char* what) {
    for (int c : group) {
      if (c < 0 || c >= static_cast<int>(names.size()))
        throw ScenarioError(std::string(what) + " contains unknown class id " + std::to_string(c));
      if (!seen.insert(c).second)
        throw ScenarioError("class " + names[static_cast<std::size_t>(c)] + " appears twice");
    }
  };
  add_disjoint(initial, "S_0");
  for (const auto& u : steps) {
    if (u.empty()) throw ScenarioError("an incremental step adds no classes");
    add_disjoint(u, "U_k");
  }
  const std::set<int> all(all_classes.begin(), all_classes.end());
  for (int c : seen)
    if (!all.count(c)) throw ScenarioError("scheduled class id " + std::to_string(c) +
                                           " missing from the class ordering");
}

std::string ClassSchedule::serialize() const {
  std::ostringstream out;
  auto emit = [&](int k, std::span<const int> group) {
    out << "step " << k << ":";
    for (std::size_t i = 0; i < group.size(); ++i)
      out << (i ? "," : " ") << names[static_cast<std::size_t>(group[i])];
    out << "\n";
  };
  emit(0, initial);
  for (int k = 0; k < num_steps(); ++k) emit(k + 1, steps[static_cast<std::size_t>(k)]);
  return out.str();
}

ClassSchedule ClassSchedule::parse(const std::string& text, const std::vector<std::string>& names,
                                   Ordering ordering) {
  auto id_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw DataError("unknown class name in plan: " + name);
  };

  ClassSchedule s;
  s.names = names;
  s.ordering = ordering;
  std::istringstream in(text);
  std::string line;
  int expected_k = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string word;
    int k = -1;
    char colon = 0;
    if (!(ls >> word >> k >> colon) || word != "step" || colon != ':' || k != expected_k)
      throw DataError("malformed plan line: " + line);
    std::string rest;
    std::getline(ls, rest);
    std::vector<int> group;
    std::istringstream cs(rest);
    std::string cls;
    while (std::getline(cs, cls, ',')) {
      while (!cls.empty() && cls.front() == ' ') cls.erase(cls.begin());
      if (!cls.empty()) group.push_back(id_of(cls));
    }
    if (expected_k == 0)
      s.initial = std::move(group);
    else
      s.steps.push_back(std::move(group));
    ++expected_k;
  }

  // Full ordering: scheduled classes first, any remaining ids afterwards.
  s.all_classes = s.seen_after(s.num_steps());
  std::set<int> used(s.all_classes.begin(), s.all_classes.end());
  for (std::size_t i = 0; i < names.size(); ++i)
    if (!used.count(static_cast<int>(i))) s.all_classes.push_back(static_cast<int>(i));
  s.validate();
  return s;
}

std::vector<int> order_classes(const std::vector<std::string>& names,
                               std::span<const std::uint64_t> pixel_counts, Ordering ordering) {
  if (names.empty()) throw DataError("no classes to order");
  if (ordering == Ordering::FrequencyDescending && pixel_counts.size() != names.size())
    throw ParamError("pixel count vector does not match class count");

  std::vector<int> ids(names.size() - 1);
  std::iota(ids.begin(), ids.end(), 1);
  switch (ordering) {
    case Ordering::Given:
      break;
    case Ordering::Alphabetical:
      std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        return names[static_cast<std::size_t>(a)] < names[static_cast<std::size_t>(b)];
      });
      break;
    case Ordering::FrequencyDescending:
      std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
        return pixel_counts[static_cast<std::size_t>(a)] > pixel_counts[static_cast<std::size_t>(b)];
      });
      break;
  }
  std::vector<int> out;
  out.reserve(names.size());
  out.push_back(0);  // background stays first
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

std::vector<StepDataset> build_splits(const DatasetManifest& manifest,
                                      const ClassSchedule& schedule, ScenarioMode mode) {
  schedule.validate();
  const int num_steps = schedule.num_steps();
  std::vector<StepDataset> out(static_cast<std::size_t>(num_steps) + 1);
  for (int k = 0; k <= num_steps; ++k) {
    out[static_cast<std::size_t>(k)].k = k;
    out[static_cast<std::size_t>(k)].mode = mode;
  }

  auto bits_of = [](std::span<const int> classes) {
    std::uint64_t b = 0;
    for (int c : classes) b |= std::uint64_t{1} << c;
    return b;
  };

  std::vector<bool> assigned(manifest.records.size(), false);
  const std::uint64_t s0_bits = bits_of(schedule.initial);
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    if ((manifest.records[i].class_bits & ~s0_bits) == 0) {
      out[0].sample_ids.push_back(manifest.records[i].id);
      assigned[i] = true;
    }
  }

  for (int k = 1; k <= num_steps; ++k) {
    const auto& u_k = schedule.steps[static_cast<std::size_t>(k - 1)];
    const std::uint64_t u_bits = bits_of(u_k);
    const std::uint64_t allowed = bits_of(schedule.seen_after(k));
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      if (assigned[i]) continue;
      const std::uint64_t bits = manifest.records[i].class_bits;
      if ((bits & u_bits) == 0) continue;
      if ((bits & ~allowed) != 0) continue;  // contains future classes
      out[static_cast<std::size_t>(k)].sample_ids.push_back(manifest.records[i].id);
      assigned[i] = true;
    }
    if (out[static_cast<std::size_t>(k)].sample_ids.empty()) {
      std::string names;
      for (int c : u_k) names += (names.empty() ? "" : ",") + schedule.names[static_cast<std::size_t>(c)];
      throw ScenarioError("no eligible samples for step " + std::to_string(k) + " classes " + names);
    }
  }
  return out;
}

LabelMap relabel(const LabelMap& labels, ScenarioMode mode, std::span<const int> s_prev,
                 std::span<const int> u_k) {
  if (mode == ScenarioMode::Learning) return labels;

  std::uint64_t prev_bits = 0, new_bits = 0;
  for (int c : s_prev) prev_bits |= std::uint64_t{1} << c;
  for (int c : u_k) new_bits |= std::uint64_t{1} << c;

  LabelMap out = labels;
  for (auto& v : out.v) {
    if (v == 255) continue;
    if (v >= 64 || (((prev_bits | new_bits) >> v) & 1) == 0)
      throw DataError("label value " + std::to_string(v) + " outside S_prev and U_k");
    if (v != 0 && ((prev_bits >> v) & 1)) v = 0;
  }
  return out;
}

LabelMap remap_to_channels(const LabelMap& labels, const ClassSchedule& schedule, int k,
                           bool unseen_to_ignore) {
  const auto channel_of = schedule.channel_of_class(k);
  LabelMap out = labels;
  for (auto& v : out.v) {
    if (v == 255) continue;
    if (v >= channel_of.size())
      throw DataError("label value " + std::to_string(v) + " unknown to the schedule");
    const int ch = channel_of[v];
    if (ch < 0) {
      if (!unseen_to_ignore)
        throw DataError("class " + schedule.names[v] + " not yet introduced at step " +
                        std::to_string(k));
      v = 255;
    } else {
      v = static_cast<std::uint8_t>(ch);
    }
  }
  return out;
}

std::vector<std::string> scenario_names() {
  return {"add-last-1", "add-last-5",        "add-last-10",
          "add-5-then-5", "add-5-sequentially", "add-10-sequentially"};
}

ClassSchedule make_scenario(const std::string& name, std::span<const int> ordered_classes,
                            const std::vector<std::string>& class_names, Ordering ordering) {
  std::vector<int> step_sizes;
  if (name == "add-last-1") step_sizes = {1};
  else if (name == "add-last-5") step_sizes = {5};
  else if (name == "add-last-10") step_sizes = {10};
  else if (name == "add-5-then-5") step_sizes = {5, 5};
  else if (name == "add-5-sequentially") step_sizes = std::vector<int>(5, 1);
  else if (name == "add-10-sequentially") step_sizes = std::vector<int>(10, 1);
  else throw ParamError("unknown scenario: " + name);

  const int total_added = std::accumulate(step_sizes.begin(), step_sizes.end(), 0);
  const int c = static_cast<int>(ordered_classes.size());
  if (c - total_added < 2)
    throw ParamError("scenario " + name + " needs at least " + std::to_string(total_added + 2) +
                     " classes, dataset has " + std::to_string(c));

  ClassSchedule s;
  s.all_classes.assign(ordered_classes.begin(), ordered_classes.end());
  s.names = class_names;
  s.ordering = ordering;
  int cursor = c - total_added;
  s.initial.assign(ordered_classes.begin(), ordered_classes.begin() + cursor);
  for (int size : step_sizes) {
    s.steps.emplace_back(ordered_classes.begin() + cursor, ordered_classes.begin() + cursor + size);
    cursor += size;
  }
  s.validate();
  return s;
}

}  // namespace kdseg
