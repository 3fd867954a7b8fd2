#include "kdseg/pnm.hpp"

#include <cctype>
#include <fstream>

#include "kdseg/error.hpp"

namespace kdseg {

namespace {

// Reads the next header token, skipping whitespace and '#' comment lines.
int next_header_int(std::istream& in, const std::filesystem::path& path) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw IoError("malformed pnm header in " + path.string());
  long v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 24) throw IoError("pnm header value out of range in " + path.string());
    c = in.get();
  }
  if (c != EOF) in.unget();
  return static_cast<int>(v);
}

}  // namespace

PnmImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw IoError("not a binary P5/P6 file: " + path.string());
  PnmImage img;
  img.channels = (m1 == '6') ? 3 : 1;
  img.width = next_header_int(in, path);
  img.height = next_header_int(in, path);
  const int maxval = next_header_int(in, path);
  if (maxval != 255) throw IoError("unsupported maxval " + std::to_string(maxval) + " in " + path.string());
  in.get();  // single whitespace byte separating header and raster
  if (img.width <= 0 || img.height <= 0) throw IoError("empty raster in " + path.string());
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.pixels.resize(n);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw IoError("truncated raster in " + path.string());
  return img;
}

namespace {

void write_pnm(const std::filesystem::path& path, const char* magic, int width, int height,
               int channels, std::span<const std::uint8_t> data) {
  if (width <= 0 || height <= 0) throw ParamError("pnm dimensions must be positive");
  const std::size_t n = static_cast<std::size_t>(width) * height * channels;
  if (data.size() != n) throw ParamError("pnm payload size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << magic << "\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(n));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

void write_ppm(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> rgb) {
  write_pnm(path, "P6", width, height, 3, rgb);
}

void write_pgm(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> gray) {
  write_pnm(path, "P5", width, height, 1, gray);
}

}  // namespace kdseg
