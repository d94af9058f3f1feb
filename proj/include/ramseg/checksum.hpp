#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace ramseg {

// zlib CRC-32.
std::uint32_t crc32_checksum(std::span<const std::uint8_t> bytes);
std::string hex32(std::uint32_t value);

}  // namespace ramseg
