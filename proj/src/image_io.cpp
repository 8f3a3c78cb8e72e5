#include "updiff/image_io.hpp"

#include <png.h>
#include <sodium.h>

#include <cstring>
#include <fstream>
#include <memory>

namespace updiff {

namespace {

struct ReadCursor {
  std::span<const uint8_t> data;
  std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t length) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->offset + length > cur->data.size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->data.data() + cur->offset, length);
  cur->offset += length;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

[[noreturn]] void png_throw(png_structp, png_const_charp msg) { throw ImageError(std::string("PNG: ") + msg); }

void png_warn_silent(png_structp, png_const_charp) {}

}  // namespace

Image8 decode_png(std::span<const uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ImageError("not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_warn_silent);
  if (!png) throw ImageError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_read_struct(&p, &i, nullptr); }
  } guard{png, info};

  ReadCursor cursor{bytes, 0};
  png_set_read_fn(png, &cursor, png_read_from_span);
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image8 img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = static_cast<int>(png_get_channels(png, info));
  if (img.channels != 1 && img.channels != 3) throw ImageError("unsupported PNG channel layout");
  const auto row_bytes = png_get_rowbytes(png, info);
  img.pixels.resize(row_bytes * static_cast<std::size_t>(img.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = img.pixels.data() + row_bytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return img;
}

std::vector<uint8_t> encode_png(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("encode_png supports gray or RGB only");
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw ImageError("pixel buffer size does not match image dimensions");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_warn_silent);
  if (!png) throw ImageError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_write_struct(&p, &i); }
  } guard{png, info};

  std::vector<uint8_t> out;
  png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + stride * static_cast<std::size_t>(y)));
  png_write_end(png, nullptr);
  return out;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image8 read_png(const std::filesystem::path& path) {
  try {
    return decode_png(read_file(path));
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

void write_png(const std::filesystem::path& path, const Image8& image) { write_file(path, encode_png(image)); }

std::string base64_encode(std::span<const uint8_t> bytes) {
  const auto variant = sodium_base64_VARIANT_ORIGINAL;
  std::string out(sodium_base64_ENCODED_LEN(bytes.size(), variant), '\0');
  sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), variant);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  std::vector<uint8_t> out(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), " \r\n", &len, nullptr,
                        sodium_base64_VARIANT_ORIGINAL) != 0)
    throw ImageError("malformed base64 payload");
  out.resize(len);
  return out;
}

torch::Tensor image_to_tensor(const Image8& img) {
  auto hwc = torch::from_blob(const_cast<uint8_t*>(img.pixels.data()), {img.height, img.width, img.channels},
                              torch::kUInt8)
                 .to(torch::kFloat32);
  if (img.channels == 1) hwc = hwc.expand({img.height, img.width, 3});
  return (hwc.permute({2, 0, 1}) / 127.5 - 1.0).contiguous();
}

Image8 tensor_to_image(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw ImageError("expected a (3, H, W) image tensor");
  auto hwc = ((image.detach().to(torch::kFloat32).clamp(-1.0, 1.0) + 1.0) * 127.5)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  Image8 img{static_cast<int>(image.size(2)), static_cast<int>(image.size(1)), 3, {}};
  img.pixels.assign(hwc.data_ptr<uint8_t>(), hwc.data_ptr<uint8_t>() + hwc.numel());
  return img;
}

torch::Tensor image_to_mask(const Image8& img, int tolerance) {
  torch::Tensor out = torch::empty({1, img.height, img.width}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  for (std::size_t i = 0; i < n; ++i) {
    const int v = img.pixels[i * static_cast<std::size_t>(img.channels)];
    if (v > tolerance && v < 255 - tolerance)
      throw ImageError("change map is not binary: pixel value " + std::to_string(v) + " at (" +
                       std::to_string(i % static_cast<std::size_t>(img.width)) + ", " +
                       std::to_string(i / static_cast<std::size_t>(img.width)) + ")");
    dst[i] = v >= 128 ? 1.0f : 0.0f;
  }
  return out;
}

Image8 mask_to_image(const torch::Tensor& mask) {
  if (mask.dim() != 3 || mask.size(0) != 1) throw ImageError("expected a (1, H, W) mask tensor");
  auto m = (mask.detach().to(torch::kFloat32) > 0.5).to(torch::kUInt8).mul(255).contiguous();
  Image8 img{static_cast<int>(mask.size(2)), static_cast<int>(mask.size(1)), 1, {}};
  img.pixels.assign(m.data_ptr<uint8_t>(), m.data_ptr<uint8_t>() + m.numel());
  return img;
}

}  // namespace updiff
