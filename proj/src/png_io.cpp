#include "defeat/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstring>
#include <vector>

namespace defeat {

void write_png(const std::filesystem::path& path, const Tensor& rgb) {
  require(rgb.c == 3, "write_png expects 3 channels");
  std::vector<png_byte> bytes(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(rgb.data[i], 0.0, 1.0) * 255.0));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(rgb.w);
  img.height = static_cast<png_uint_32>(rgb.h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Tensor read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Tensor out(static_cast<int>(img.height), static_cast<int>(img.width), 3);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = bytes[i] / 255.0;
  return out;
}

}  // namespace defeat
