#include "kdseg/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kdseg/error.hpp"
#include "kdseg/log.hpp"
#include "kdseg/pnm.hpp"
#include "kdseg/rng.hpp"

namespace kdseg {

namespace {

constexpr int kNumShapeKinds = 5;
const char* kShapeNames[kNumShapeKinds] = {"circle", "square", "triangle", "diamond", "cross"};
const char* kTextureNames[4] = {"", "-striped", "-checker", "-dotted"};

// Distinct-ish base colors, indexed by (class - 1) modulo table size.
constexpr std::uint8_t kPalette[][3] = {
    {200, 60, 60},  {60, 160, 220}, {70, 190, 90},  {230, 200, 60}, {170, 80, 200},
    {240, 140, 50}, {90, 210, 200}, {220, 100, 160}, {130, 130, 240}, {150, 200, 60},
};
constexpr int kPaletteSize = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));

struct ShapeInstance {
  int cls;      // class id >= 1
  int kind;     // shape geometry
  int texture;  // fill pattern
  int cx, cy, r;
};

bool covers(const ShapeInstance& s, int x, int y) {
  const int dx = x - s.cx;
  const int dy = y - s.cy;
  switch (s.kind) {
    case 0:  // circle
      return dx * dx + dy * dy <= s.r * s.r;
    case 1:  // square, inscribed in circle of radius r
      return std::abs(dx) * 10 <= s.r * 7 && std::abs(dy) * 10 <= s.r * 7;
    case 2: {  // upward triangle
      if (dy < -s.r || dy > s.r) return false;
      const int half_width = (dy + s.r) / 2;
      return std::abs(dx) <= half_width;
    }
    case 3:  // diamond
      return std::abs(dx) + std::abs(dy) <= s.r;
    default:  // cross
      return (std::abs(dx) * 3 <= s.r && std::abs(dy) <= s.r) ||
             (std::abs(dy) * 3 <= s.r && std::abs(dx) <= s.r);
  }
}

bool texture_bright(int texture, int x, int y) {
  switch (texture) {
    case 1: return ((x + y) / 3) % 2 == 0;                        // stripes
    case 2: return ((x / 4) + (y / 4)) % 2 == 0;                  // checker
    case 3: {                                                     // dots
      const int mx = x % 6 - 3, my = y % 6 - 3;
      return mx * mx + my * my > 2;
    }
    default: return true;  // solid
  }
}

std::uint8_t clamp_u8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

int sample_class(Rng& rng, int num_classes, double skew) {
  // P(c) proportional to skew^(c-1) over c = 1..num_classes-1.
  double total = 0.0;
  double w = 1.0;
  for (int c = 1; c < num_classes; ++c) {
    total += w;
    w *= skew;
  }
  double u = rng.uniform() * total;
  w = 1.0;
  for (int c = 1; c < num_classes; ++c) {
    if (u < w) return c;
    u -= w;
    w *= skew;
  }
  return num_classes - 1;
}

void render_image(const SyntheticSpec& spec, Rng& rng, std::vector<std::uint8_t>& rgb,
                  LabelMap& labels) {
  const int n = spec.size;
  rgb.assign(static_cast<std::size_t>(n) * n * 3, 0);
  labels = LabelMap(n, n, 0);

  const int base = 110 + rng.uniform_int(-20, 20);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int ch = 0; ch < 3; ++ch)
        rgb[(static_cast<std::size_t>(y) * n + x) * 3 + ch] =
            clamp_u8(base + rng.uniform_int(-18, 18));

  const int count = rng.uniform_int(spec.shapes_min, spec.shapes_max);
  for (int i = 0; i < count; ++i) {
    ShapeInstance s;
    s.cls = sample_class(rng, spec.num_classes, spec.class_frequency_skew);
    s.kind = (s.cls - 1) % kNumShapeKinds;
    s.texture = (s.cls - 1) / kNumShapeKinds;
    s.r = rng.uniform_int(n / 8, n / 4);
    s.cx = rng.uniform_int(s.r / 2, n - 1 - s.r / 2);
    s.cy = rng.uniform_int(s.r / 2, n - 1 - s.r / 2);
    const auto& color = kPalette[(s.cls - 1) % kPaletteSize];
    for (int y = std::max(0, s.cy - s.r); y <= std::min(n - 1, s.cy + s.r); ++y) {
      for (int x = std::max(0, s.cx - s.r); x <= std::min(n - 1, s.cx + s.r); ++x) {
        if (!covers(s, x, y)) continue;
        labels.at(y, x) = static_cast<std::uint8_t>(s.cls);
        const bool bright = texture_bright(s.texture, x, y);
        for (int ch = 0; ch < 3; ++ch) {
          const int c = bright ? color[ch] : color[ch] * 2 / 3;
          rgb[(static_cast<std::size_t>(y) * n + x) * 3 + ch] =
              clamp_u8(c + rng.uniform_int(-10, 10));
        }
      }
    }
  }
}

void validate_spec(const SyntheticSpec& spec) {
  if (spec.num_classes < 3) throw ParamError("synthetic dataset needs >= 3 classes");
  if (spec.num_classes > 64) throw ParamError("synthetic dataset supports <= 64 classes");
  if (spec.size < 8 || spec.size % 4 != 0) throw ParamError("image size must be >= 8 and divisible by 4");
  if (spec.images < 0) throw ParamError("image count must be >= 0");
  if (spec.shapes_min < 1 || spec.shapes_max < spec.shapes_min)
    throw ParamError("invalid shapes_per_image range");
  if (spec.class_frequency_skew <= 0.0 || spec.class_frequency_skew > 1.0)
    throw ParamError("class_frequency_skew must be in (0, 1]");
}

}  // namespace

std::vector<std::string> synthetic_class_names(int num_classes) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(num_classes));
  names.emplace_back("background");
  for (int c = 1; c < num_classes; ++c) {
    const int kind = (c - 1) % kNumShapeKinds;
    const int texture = ((c - 1) / kNumShapeKinds) % 4;
    names.push_back(std::string(kShapeNames[kind]) + kTextureNames[texture]);
  }
  return names;
}

std::uint64_t bitmask_of(const LabelMap& labels) {
  std::uint64_t bits = 0;
  for (std::uint8_t v : labels.v)
    if (v != 255) bits |= std::uint64_t{1} << (v & 63);
  return bits;
}

const ManifestRecord& DatasetManifest::by_id(const std::string& id) const {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw DataError("sample id not in manifest: " + id);
}

int DatasetManifest::num_classes() const {
  std::uint64_t all = 0;
  for (const auto& r : records) all |= r.class_bits;
  int c = 0;
  while (all) {
    ++c;
    all >>= 1;
  }
  return c;
}

DatasetManifest generate(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  validate_spec(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "labels", ec);
  if (!std::filesystem::is_directory(out_dir / "images") ||
      !std::filesystem::is_directory(out_dir / "labels"))
    throw IoError("cannot create output directory " + out_dir.string());

  constexpr int kMaxAttempts = 1000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    DatasetManifest m;
    m.root = out_dir;
    std::uint64_t seen = 0;
    std::vector<std::uint8_t> rgb;
    LabelMap labels;
    for (int i = 0; i < spec.images; ++i) {
      Rng rng(stream_seed(spec.seed, "image",
                          (static_cast<std::uint64_t>(attempt) << 32) | static_cast<std::uint64_t>(i)));
      render_image(spec, rng, rgb, labels);

      char id[32];
      std::snprintf(id, sizeof(id), "img_%05d", i);
      ManifestRecord rec;
      rec.id = id;
      rec.image_path = std::string("images/") + id + ".ppm";
      rec.label_path = std::string("labels/") + id + ".pgm";
      rec.class_bits = bitmask_of(labels);
      seen |= rec.class_bits;
      write_ppm(out_dir / rec.image_path, spec.size, spec.size, rgb);
      write_pgm(out_dir / rec.label_path, spec.size, spec.size, labels.v);
      m.records.push_back(std::move(rec));
    }

    const std::uint64_t wanted = (spec.num_classes >= 64)
                                     ? ~std::uint64_t{0}
                                     : (std::uint64_t{1} << spec.num_classes) - 1;
    if (spec.images == 0 || (seen & wanted) == wanted) {
      save_manifest(m, out_dir / "manifest.tsv");
      if (attempt > 0) log_debug("dataset generation needed ", attempt + 1, " attempts");
      return m;
    }
    log_debug("dataset attempt ", attempt, " missed a class, re-rolling");
  }
  throw DataError("could not produce every class in " + std::to_string(kMaxAttempts) + " attempts");
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& manifest_file) {
  std::ofstream out(manifest_file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest_file.string());
  char buf[32];
  for (const auto& r : m.records) {
    std::snprintf(buf, sizeof(buf), "%llx", static_cast<unsigned long long>(r.class_bits));
    out << r.id << '\t' << r.image_path << '\t' << r.label_path << '\t' << buf << '\n';
  }
  if (!out) throw IoError("short write to " + manifest_file.string());
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_file, bool strict) {
  std::ifstream in(manifest_file, std::ios::binary);
  if (!in) throw IoError("cannot open " + manifest_file.string());
  DatasetManifest m;
  m.root = manifest_file.parent_path();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestRecord rec;
    std::string hex;
    if (!std::getline(ls, rec.id, '\t') || !std::getline(ls, rec.image_path, '\t') ||
        !std::getline(ls, rec.label_path, '\t') || !std::getline(ls, hex))
      throw DataError("malformed manifest line " + std::to_string(line_no) + " in " +
                      manifest_file.string());
    rec.class_bits = std::stoull(hex, nullptr, 16);
    m.records.push_back(std::move(rec));
  }
  if (strict) {
    for (const auto& r : m.records) {
      PnmImage img = read_pnm(m.root / r.label_path);
      LabelMap lm(img.height, img.width);
      lm.v = img.pixels;
      if (bitmask_of(lm) != r.class_bits)
        throw DataError("bitmask mismatch for sample " + r.id);
    }
  }
  return m;
}

std::pair<Tensor, LabelMap> load_sample(const DatasetManifest& m, const std::string& id) {
  const ManifestRecord& rec = m.by_id(id);
  PnmImage img = read_pnm(m.root / rec.image_path);
  if (img.channels != 3) throw DataError("image is not RGB: " + rec.image_path);
  PnmImage lab = read_pnm(m.root / rec.label_path);
  if (lab.channels != 1) throw DataError("label map is not grayscale: " + rec.label_path);
  if (lab.width != img.width || lab.height != img.height)
    throw DataError("image/label size mismatch for sample " + id);

  Tensor t = Tensor::zeros(Shape{img.height, img.width, 3});
  auto tv = t.data();
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    tv[i] = static_cast<float>(img.pixels[i]) / 255.0f;

  LabelMap lm(lab.height, lab.width);
  lm.v = std::move(lab.pixels);
  return {std::move(t), std::move(lm)};
}

std::vector<std::uint64_t> class_pixel_counts(const DatasetManifest& m) {
  if (m.records.empty()) throw DataError("empty dataset manifest");
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(m.num_classes()), 0);
  for (const auto& r : m.records) {
    PnmImage lab = read_pnm(m.root / r.label_path);
    for (std::uint8_t v : lab.pixels) {
      if (v == 255) continue;
      if (v >= counts.size()) throw DataError("label value " + std::to_string(v) +
                                              " exceeds manifest class count in " + r.label_path);
      counts[v]++;
    }
  }
  return counts;
}

}  // namespace kdseg
