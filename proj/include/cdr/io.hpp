#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cdr {

namespace fs = std::filesystem;

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);
/// Fixed-point text with `decimals` digits after the point.
std::string format_fixed(double value, int decimals);
/// Strict parse of a complete decimal field; throws DataError otherwise.
double parse_double(std::string_view text, std::string_view what);

std::vector<std::string> split_csv_line(std::string_view line);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const fs::path& path);

std::vector<std::uint8_t> read_file(const fs::path& path);
std::string read_text(const fs::path& path);
/// Writes through a temporary sibling then renames it into place.
void write_file(const fs::path& path, std::span<const std::uint8_t> bytes);
void write_text(const fs::path& path, std::string_view text);

/// Decoded raster, planar channel-major (c, y, x), values in [0, 1].
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> pixels;
};

/// Reads 8- or 16-bit PNGs, grayscale or RGB (alpha dropped, palettes
/// expanded). Integer samples are divided by 2^depth - 1.
Raster read_png(const fs::path& path);
/// Writes a grayscale or RGB PNG, values rounded to the nearest level.
void write_png(const fs::path& path, const Raster& raster, int bit_depth = 16);

}  // namespace cdr
