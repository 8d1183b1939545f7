#include "relush/pngio.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "relush/common.hpp"

namespace relush {

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t read_u32_be(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  out.insert(out.end(), body.begin(), body.end());
  const auto crc = crc32(0L, body.data(), static_cast<uInt>(body.size()));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

std::vector<std::uint8_t> deflate_bytes(const std::vector<std::uint8_t>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> out(bound);
  if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                Z_DEFAULT_COMPRESSION) != Z_OK) {
    throw Error("zlib compression failed");
  }
  out.resize(bound);
  return out;
}

void write_png(const std::string& path, int width, int height, int color_type,
               const std::vector<std::uint8_t>& scanline_data,
               const std::vector<Rgb>* palette) {
  std::vector<std::uint8_t> file = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(width));
  put_u32_be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(static_cast<std::uint8_t>(color_type));
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter
  ihdr.push_back(0);  // interlace
  append_chunk(file, "IHDR", ihdr);
  if (palette) {
    std::vector<std::uint8_t> plte;
    for (const Rgb& c : *palette) {
      plte.push_back(c[0]);
      plte.push_back(c[1]);
      plte.push_back(c[2]);
    }
    append_chunk(file, "PLTE", plte);
  }
  append_chunk(file, "IDAT", deflate_bytes(scanline_data));
  append_chunk(file, "IEND", {});
  write_file_atomic(path, std::string(reinterpret_cast<const char*>(file.data()),
                                      file.size()));
}

}  // namespace

Rgb palette_color(int index) {
  // golden-ratio hue walk; saturation/value fixed
  const double hue = std::fmod(0.13 + 0.61803398874989485 * index, 1.0);
  const double sat = 0.62, val = 0.95;
  const double h6 = hue * 6.0;
  const int sector = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = val * (1.0 - sat);
  const double q = val * (1.0 - sat * f);
  const double t = val * (1.0 - sat * (1.0 - f));
  double r = 0, g = 0, b = 0;
  switch (sector) {
    case 0: r = val; g = t; b = p; break;
    case 1: r = q; g = val; b = p; break;
    case 2: r = p; g = val; b = t; break;
    case 3: r = p; g = q; b = val; break;
    case 4: r = t; g = p; b = val; break;
    default: r = val; g = p; b = q; break;
  }
  auto to8 = [](double x) {
    return static_cast<std::uint8_t>(std::lround(x * 255.0));
  };
  return {to8(r), to8(g), to8(b)};
}

void write_indexed_png(const std::string& path, int width, int height,
                       const std::vector<std::uint8_t>& pixels,
                       const std::vector<Rgb>& palette) {
  if (palette.empty() || palette.size() > 256) {
    throw Error("indexed PNG palette must have 1..256 entries");
  }
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw DimensionError("pixel buffer does not match image size");
  }
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (width + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter type none
    const std::uint8_t* row = pixels.data() + static_cast<std::size_t>(y) * width;
    raw.insert(raw.end(), row, row + width);
  }
  write_png(path, width, height, 3, raw, &palette);
}

void write_rgb_png(const std::string& path, int width, int height,
                   const std::vector<Rgb>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw DimensionError("pixel buffer does not match image size");
  }
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (width * 3 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    for (int x = 0; x < width; ++x) {
      const Rgb& c = pixels[static_cast<std::size_t>(y) * width + x];
      raw.push_back(c[0]);
      raw.push_back(c[1]);
      raw.push_back(c[2]);
    }
  }
  write_png(path, width, height, 2, raw, nullptr);
}

DecodedPng read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (file.size() < 8 || file[1] != 'P' || file[2] != 'N' || file[3] != 'G') {
    throw FormatError(path + " is not a PNG file");
  }
  DecodedPng png;
  int color_type = -1;
  std::vector<Rgb> palette;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 8 <= file.size()) {
    const std::uint32_t len = read_u32_be(file.data() + pos);
    const char* type = reinterpret_cast<const char*>(file.data() + pos + 4);
    const std::uint8_t* payload = file.data() + pos + 8;
    if (pos + 12 + len > file.size()) throw FormatError("truncated PNG chunk");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      png.width = static_cast<int>(read_u32_be(payload));
      png.height = static_cast<int>(read_u32_be(payload + 4));
      color_type = payload[9];
    } else if (std::memcmp(type, "PLTE", 4) == 0) {
      for (std::uint32_t i = 0; i + 2 < len; i += 3) {
        palette.push_back({payload[i], payload[i + 1], payload[i + 2]});
      }
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    }
    pos += 12 + len;
  }
  const int bpp = color_type == 3 ? 1 : 3;
  uLongf raw_size =
      static_cast<uLongf>(png.height) * (static_cast<uLongf>(png.width) * bpp + 1);
  std::vector<std::uint8_t> raw(raw_size);
  if (uncompress(raw.data(), &raw_size, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK) {
    throw FormatError("PNG inflate failed for " + path);
  }
  png.pixels.resize(static_cast<std::size_t>(png.width) * png.height);
  for (int y = 0; y < png.height; ++y) {
    const std::uint8_t* row =
        raw.data() + static_cast<std::size_t>(y) * (png.width * bpp + 1);
    if (row[0] != 0) throw FormatError("unsupported PNG filter");
    for (int x = 0; x < png.width; ++x) {
      if (color_type == 3) {
        const std::uint8_t idx = row[1 + x];
        if (idx >= palette.size()) throw FormatError("palette index out of range");
        png.pixels[static_cast<std::size_t>(y) * png.width + x] = palette[idx];
      } else {
        png.pixels[static_cast<std::size_t>(y) * png.width + x] = {
            row[1 + 3 * x], row[2 + 3 * x], row[3 + 3 * x]};
      }
    }
  }
  png.palette_entries = color_type == 3 ? static_cast<int>(palette.size()) : -1;
  return png;
}

}  // namespace relush
