#pragma once

// Raw video files and PPM frame export.
//
// Video layout (little-endian): u32 T, u32 H, u32 W, u32 C, then float32 values
// in (t, c, row, col) order. In memory videos are (T, H, W, C).

#include <string>
#include <vector>

#include "snapdiff/tensor.hpp"

namespace snapdiff {

std::vector<std::uint8_t> encode_video(const Tensor32& video);
Tensor32 decode_video(const std::vector<std::uint8_t>& bytes);

void write_video(const std::string& path, const Tensor32& video);
Tensor32 read_video(const std::string& path);

// Binary P6 image of one (H, W, C) frame, C in {1, 3}; values in [-1, 1] map
// to [0, 255] and are clamped.
std::string encode_ppm(const Tensor32& frame);

// Writes <prefix>_<t>.ppm for every frame; returns the paths.
std::vector<std::string> write_frames_ppm(const std::string& prefix, const Tensor32& video);

}  // namespace snapdiff
