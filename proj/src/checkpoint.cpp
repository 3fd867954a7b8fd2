#include "kdseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "kdseg/error.hpp"

namespace kdseg {

namespace {

constexpr char kMagic[4] = {'K', 'D', 'S', 'G'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& out, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    throw CheckpointError(CheckpointError::Kind::Truncated, "truncated header in " + path.string());
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

std::uint16_t get_u16(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  if (in.gcount() != 2)
    throw CheckpointError(CheckpointError::Kind::Truncated, "truncated record in " + path.string());
  return static_cast<std::uint16_t>(std::uint16_t(b[0]) | (std::uint16_t(b[1]) << 8));
}

}  // namespace

void save_checkpoint(const SegModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(model.num_classes()));
  const auto params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& sh = p.tensor.shape();
    out.put(static_cast<char>(sh.ndim()));
    for (int d = 0; d < sh.ndim(); ++d) put_u32(out, static_cast<std::uint32_t>(sh[d]));
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(p.tensor.numel() * 4));
  }
  if (!out) throw IoError("short write to " + path.string());
}

SegModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError(CheckpointError::Kind::BadMagic, "bad magic in " + path.string());
  const std::uint32_t version = get_u32(in, path);
  if (version != kVersion)
    throw CheckpointError(CheckpointError::Kind::BadVersion,
                          "unsupported version " + std::to_string(version) + " in " + path.string());
  const std::uint32_t num_classes = get_u32(in, path);
  const std::uint32_t count = get_u32(in, path);

  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = get_u16(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != name_len)
      throw CheckpointError(CheckpointError::Kind::Truncated, "truncated name in " + path.string());
    const int ndim = in.get();
    if (ndim < 0 || ndim > 4)
      throw CheckpointError(CheckpointError::Kind::Layout,
                            "bad rank for tensor " + name + " in " + path.string());
    std::vector<int> dims(static_cast<std::size_t>(ndim));
    std::size_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      dims[static_cast<std::size_t>(d)] = static_cast<int>(get_u32(in, path));
      numel *= static_cast<std::size_t>(dims[static_cast<std::size_t>(d)]);
    }
    std::vector<float> data(numel);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * 4));
    if (static_cast<std::size_t>(in.gcount()) != numel * 4)
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "truncated tensor " + name + " in " + path.string());
    Shape sh;
    switch (ndim) {
      case 0: sh = Shape{}; break;
      case 1: sh = Shape{dims[0]}; break;
      case 2: sh = Shape{dims[0], dims[1]}; break;
      case 3: sh = Shape{dims[0], dims[1], dims[2]}; break;
      default: sh = Shape{dims[0], dims[1], dims[2], dims[3]}; break;
    }
    tensors.emplace(std::move(name), std::make_pair(sh, std::move(data)));
  }

  SegModel model(static_cast<int>(num_classes), /*seed=*/0);
  auto params = model.parameters();
  if (params.size() != tensors.size())
    throw CheckpointError(CheckpointError::Kind::Layout,
                          "tensor count mismatch in " + path.string());
  for (auto& p : params) {
    auto it = tensors.find(p.name);
    if (it == tensors.end())
      throw CheckpointError(CheckpointError::Kind::Layout,
                            "missing tensor " + p.name + " in " + path.string());
    if (it->second.first != p.tensor.shape())
      throw CheckpointError(CheckpointError::Kind::Layout,
                            "shape mismatch for tensor " + p.name + " in " + path.string());
    auto dst = p.tensor.data();
    std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
  }
  return model;
}

}  // namespace kdseg
