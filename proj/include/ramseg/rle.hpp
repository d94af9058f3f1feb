#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "ramseg/tensor.hpp"

namespace ramseg {

// Row-major run lengths of a binary mask, alternating background and
// foreground and starting with background (a leading run may be 0).
struct RleMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;
  std::uint64_t pixel_count = 0;  // foreground pixels
  std::uint32_t checksum = 0;     // CRC-32 of the 0/1 mask bytes

  friend bool operator==(const RleMask&, const RleMask&) = default;
};

RleMask rle_encode(const BinaryMask& mask);
// Verifies run total, pixel count and checksum; SchemaViolation on mismatch.
BinaryMask rle_decode(const RleMask& rle);

// {"size": [h, w], "counts": [...], "pixel_count": n, "checksum": "crc32 hex"}
nlohmann::json rle_to_json(const RleMask& rle);
RleMask rle_from_json(const nlohmann::json& doc);

}  // namespace ramseg
