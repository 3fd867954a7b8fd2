#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "kdseg/tensor.hpp"

namespace kdseg {

// Per-pixel class ids; 255 is the ignore value throughout.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;

  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width), v(static_cast<std::size_t>(height) * width, fill) {}

  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  std::size_t size() const { return v.size(); }
};

// Deterministic shapes-on-noise dataset. Classes beyond background are
// distinct shape x texture combinations; the geometric skew makes lower class
// ids more frequent so frequency-based orderings have something to order.
struct SyntheticSpec {
  int num_classes = 6;  // background + (num_classes - 1) shape classes
  int images = 200;
  int size = 64;  // H == W, divisible by 4
  int shapes_min = 2;
  int shapes_max = 4;
  std::uint64_t seed = 1;
  double class_frequency_skew = 0.5;  // P(class c) proportional to skew^(c-1)
};

struct ManifestRecord {
  std::string id;
  std::string image_path;  // relative to the manifest directory
  std::string label_path;
  std::uint64_t class_bits = 0;  // bit c set iff class c occurs in the label map

  bool has_class(int c) const { return (class_bits >> c) & 1u; }
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  const ManifestRecord& by_id(const std::string& id) const;
  int num_classes() const;  // highest class bit + 1 across records
};

// Writes images/, labels/ and manifest.tsv under out_dir. Bytewise
// deterministic for a fixed spec; re-rolls the whole set from a derived seed
// until every non-background class occurs at least once.
DatasetManifest generate(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& manifest_file, bool strict = false);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& manifest_file);

// Image as [H,W,3] floats in [0,1] plus raw class ids.
std::pair<Tensor, LabelMap> load_sample(const DatasetManifest& m, const std::string& id);

std::vector<std::string> synthetic_class_names(int num_classes);

std::uint64_t bitmask_of(const LabelMap& labels);

// Total pixels per class over the dataset's label files (ignore excluded).
std::vector<std::uint64_t> class_pixel_counts(const DatasetManifest& m);

}  // namespace kdseg
