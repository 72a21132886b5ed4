#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deepfuse/image.hpp"

namespace deepfuse::datapipe {

/**
 * Decodes a binary NetPBM P6 (maxval 255) or PNG file into a 3-channel
 * image. PNG input is converted to 8-bit RGB by libpng (palette and gray
 * expanded, alpha dropped); untagged PNGs decode byte-exactly.
 */
Image8 decode_image(const std::filesystem::path& path);
Image8 decode_image_bytes(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>");

std::vector<std::uint8_t> encode_ppm(const Image8& img);
void write_ppm(const std::filesystem::path& path, const Image8& img);
void write_png(const std::filesystem::path& path, const Image8& img);

}  // namespace deepfuse::datapipe
