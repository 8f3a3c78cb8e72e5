#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace updiff {

/// 8-bit interleaved raster (row-major, channels innermost).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  ///< 1 (gray) or 3 (RGB)
  std::vector<uint8_t> pixels;
};

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Decodes any 8/16-bit PNG into gray or RGB (alpha dropped, palettes expanded).
Image8 decode_png(std::span<const uint8_t> bytes);
/// Deterministic encoding (fixed compression level and filters).
std::vector<uint8_t> encode_png(const Image8& image);

Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);

std::string base64_encode(std::span<const uint8_t> bytes);
/// Throws ImageError on malformed input.
std::vector<uint8_t> base64_decode(const std::string& text);

/// RGB raster -> (3, H, W) float in [-1, 1]. Gray input is replicated.
torch::Tensor image_to_tensor(const Image8& image);
/// (3, H, W) in [-1, 1] -> RGB raster (rounded, clamped).
Image8 tensor_to_image(const torch::Tensor& image);

/// Gray/RGB raster -> (1, H, W) float mask in {0, 1}, thresholded at 128.
/// Every pixel must lie within `tolerance` of 0 or 255, else ImageError.
torch::Tensor image_to_mask(const Image8& image, int tolerance = 8);
/// (1, H, W) {0, 1} -> gray raster with values 0 / 255.
Image8 mask_to_image(const torch::Tensor& mask);

}  // namespace updiff
