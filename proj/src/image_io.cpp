#include "deepfuse/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>

namespace deepfuse::datapipe {

namespace {

constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::size_t ppm_token(std::span<const std::uint8_t> bytes, std::size_t& pos, const std::string& name) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::size_t value = 0;
  std::size_t digits = 0;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    value = value * 10 + (bytes[pos] - '0');
    if (value > (1u << 24)) throw DataError(name + ": P6 header value too large");
    ++pos;
    ++digits;
  }
  if (digits == 0) throw DataError(name + ": malformed P6 header");
  return value;
}

Image8 decode_ppm(std::span<const std::uint8_t> bytes, const std::string& name) {
  std::size_t pos = 2;
  const std::size_t width = ppm_token(bytes, pos, name);
  const std::size_t height = ppm_token(bytes, pos, name);
  const std::size_t maxval = ppm_token(bytes, pos, name);
  if (width == 0 || height == 0) throw DataError(name + ": P6 image has zero extent");
  if (maxval != 255) throw DataError(name + ": P6 maxval must be 255, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError(name + ": malformed P6 header");
  ++pos;  // exactly one whitespace byte before the raster
  const std::size_t need = width * height * 3;
  if (bytes.size() - pos < need) {
    throw DataError(name + ": truncated P6 payload (" + std::to_string(bytes.size() - pos) + " of " +
                    std::to_string(need) + " bytes)");
  }
  Image8 img(3, height, width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = bytes[pos + (y * width + x) * 3 + c];
    }
  }
  return img;
}

Image8 decode_png(std::span<const std::uint8_t> bytes, const std::string& name) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DataError(name + ": invalid PNG (" + image.message + ")");
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> raster(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raster.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(name + ": corrupt PNG (" + msg + ")");
  }
  const std::size_t width = image.width, height = image.height;
  Image8 img(3, height, width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = raster[(y * width + x) * 3 + c];
    }
  }
  return img;
}

std::vector<std::uint8_t> interleave(const Image8& img) {
  if (img.channels != 3) throw DimensionError("image writers need 3 channels, got " + std::to_string(img.channels));
  std::vector<std::uint8_t> out(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out[(y * img.width + x) * 3 + c] = img.at(c, y, x);
    }
  }
  return out;
}

}  // namespace

Image8 decode_image_bytes(std::span<const std::uint8_t> bytes, const std::string& name) {
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, name);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSignature, 8) == 0) return decode_png(bytes, name);
  throw DataError(name + ": unsupported image format (expected binary P6 or PNG)");
}

Image8 decode_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_image_bytes(bytes, path.string());
}

std::vector<std::uint8_t> encode_ppm(const Image8& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto raster = interleave(img);
  out.insert(out.end(), raster.begin(), raster.end());
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image8& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

void write_png(const std::filesystem::path& path, const Image8& img) {
  const auto raster = interleave(img);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, raster.data(), 0, nullptr)) {
    throw DataError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

}  // namespace deepfuse::datapipe
