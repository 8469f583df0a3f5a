#pragma once

#include <string>

#include "hadmst/array.hpp"

namespace hadmst {
namespace png_io {

// Writes an RGB image; input [3, H, W] with values in [0,1] (clamped).
void write_png_rgb(const std::string& path, const Array& rgb);

// Reads an image back as [3, H, W] in [0,1] (for round-trip tests).
Array read_png_rgb(const std::string& path);

}  // namespace png_io
}  // namespace hadmst
