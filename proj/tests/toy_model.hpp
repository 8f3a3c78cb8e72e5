#pragma once

#include <filesystem>
#include <string>

#include "updiff/image_io.hpp"
#include "updiff/pipeline.hpp"

namespace updiff::testing {

/// Small 64 px model used by the service tests; untrained weights with the gates opened.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.resolution = 64;
  c.autoencoder.base_channels = 8;
  c.autoencoder.max_channels = 16;
  c.unet.channels = {8, 16};
  c.unet.res_blocks = 1;
  c.unet.attention_levels = 1;
  c.unet.layout_dim = 8;
  c.unet.text_dim = 8;
  c.layout_base_channels = 8;
  c.layout_max_channels = 8;
  c.steps = 8;
  return c;
}

inline std::filesystem::path write_toy_checkpoint(const std::filesystem::path& dir) {
  torch::manual_seed(17);
  UpDiffModel model(toy_config());
  {
    torch::NoGradGuard guard;
    for (auto& g : model.denoiser->unet->gated_layers()) g->gamma.fill_(0.5);
    for (auto& p : model.denoiser->unet->injection_layers()) p->weight.normal_(0, 0.1);
    model.denoiser->unet->conv_out->weight.normal_(0, 0.05);
  }
  std::filesystem::remove_all(dir);
  save_model(dir, model, {{"seed", 17}, {"step", 0}});
  return dir;
}

inline std::string png_base64(const Image8& image) { return base64_encode(encode_png(image)); }

inline Image8 solid_rgb(int size, uint8_t value) {
  return Image8{size, size, 3, std::vector<uint8_t>(static_cast<std::size_t>(size * size * 3), value)};
}

inline Image8 square_mask(int size, int lo, int hi) {
  Image8 m{size, size, 1, std::vector<uint8_t>(static_cast<std::size_t>(size * size), 0)};
  for (int y = lo; y < hi; ++y)
    for (int x = lo; x < hi; ++x) m.pixels[static_cast<std::size_t>(y * size + x)] = 255;
  return m;
}

}  // namespace updiff::testing
