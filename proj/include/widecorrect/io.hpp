#pragma once

#include <filesystem>

#include "widecorrect/geometry.hpp"

namespace widecorrect::io {

inline constexpr float kFloMagic = 202021.25f;

/// Middlebury .flo: float magic, int32 width, int32 height, interleaved (dx, dy) float32.
void write_flo(const std::filesystem::path& path, const FlowMap& flow);
FlowMap read_flo(const std::filesystem::path& path);

/// 8-bit PNG, gray or RGB. Values are rounded to the nearest 1/255 step.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Single-channel 8-bit PNG holding raw integer labels.
void write_label_png(const std::filesystem::path& path, const Planes<std::uint8_t>& labels,
                     int scale = 1);
Planes<std::uint8_t> read_label_png(const std::filesystem::path& path);

/// Seg masks are stored as one label image of height 2H: horizontal-component
/// classes on top, vertical-component classes below.
void write_seg_mask(const std::filesystem::path& path, const SegMask& mask);
SegMask read_seg_mask(const std::filesystem::path& path);

}  // namespace widecorrect::io
