#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "guideseg/volume.hpp"

namespace guideseg {

/// 8-bit raster, interleaved channels, row-major.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

class ImageDecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_png(const Raster& raster);
/// Throws ImageDecodeError for anything that is not a decodable PNG.
/// Gray+alpha and RGBA inputs are reduced to gray / RGB.
Raster decode_png(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const Raster& raster);
Raster read_png(const std::filesystem::path& path);

/// RGB raster <-> [0,1] float image (value / 255).
Image raster_to_image(const Raster& raster);
Raster image_to_raster(const Image& image);
/// Class indices stored directly in a single gray channel.
Raster labels_to_raster(const LabelMap& labels);
LabelMap raster_to_labels(const Raster& raster);

/// Bilinear resize of an RGB image (used to fit uploads to the model input).
Image resize_image(const Image& image, int height, int width);

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws std::invalid_argument on characters outside the standard alphabet.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace guideseg
