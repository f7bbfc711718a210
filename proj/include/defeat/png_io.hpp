#pragma once

#include <filesystem>

#include "defeat/tensor.hpp"

namespace defeat {

// 8-bit RGB PNG <-> Tensor (H x W x 3, values in [0,1]).
void write_png(const std::filesystem::path& path, const Tensor& rgb);
Tensor read_png(const std::filesystem::path& path);

}  // namespace defeat
