#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ramseg/data_model.hpp"
#include "ramseg/tensor.hpp"

namespace ramseg {

// Lossless 2D raster storage. `.png` holds 8/16-bit integer data, `.npy`
// holds float32 or integer arrays. Reading accepts any supported type.
Grid<float> read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Grid<float>& image);

Grid<std::int32_t> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const Grid<std::int32_t>& labels);

// In-memory variants used on the wire. Format is sniffed from the bytes.
Grid<float> decode_image(std::span<const std::uint8_t> bytes);
Grid<std::int32_t> decode_labels(std::span<const std::uint8_t> bytes);
// 16-bit PNG when all values are integers in [0, 65535], float32 NPY otherwise.
std::vector<std::uint8_t> encode_image(const Grid<float>& image);
std::vector<std::uint8_t> encode_labels_png(const Grid<std::int32_t>& labels);
// 8-bit grayscale PNG, min-max scaled; for viewing only.
std::vector<std::uint8_t> encode_display_png(const Grid<float>& image);

// 3D NPY volumes for the slice-by-slice loader.
Volume<float> read_volume(const std::filesystem::path& path);
Volume<std::int32_t> read_label_volume(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const Volume<float>& volume);
void write_label_volume(const std::filesystem::path& path, const Volume<std::int32_t>& volume);

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws BadImage on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace ramseg
