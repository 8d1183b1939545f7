#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace relush {

using Rgb = std::array<std::uint8_t, 3>;

/// Deterministic categorical palette: golden-ratio hue spiral, stable across
/// runs and platforms.
Rgb palette_color(int index);

/// 8-bit indexed PNG; requires every pixel < palette.size() <= 256.
void write_indexed_png(const std::string& path, int width, int height,
                       const std::vector<std::uint8_t>& pixels,
                       const std::vector<Rgb>& palette);

/// 8-bit truecolor PNG from row-major RGB triples.
void write_rgb_png(const std::string& path, int width, int height,
                   const std::vector<Rgb>& pixels);

/// Minimal decoder for the files this library writes (filter 0, no
/// interlacing); returns row-major RGB. Used by tests and palette audits.
struct DecodedPng {
  int width = 0;
  int height = 0;
  std::vector<Rgb> pixels;
  int palette_entries = -1;  // -1 for truecolor
};
DecodedPng read_png(const std::string& path);

}  // namespace relush
