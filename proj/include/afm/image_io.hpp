#pragma once

#include <filesystem>

#include "afm/tensor.hpp"

namespace afm {

// Writes a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG.
void write_png(const Tensor& image, const std::filesystem::path& path);

}  // namespace afm
