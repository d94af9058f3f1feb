#include "ramseg/rle.hpp"

#include "ramseg/checksum.hpp"

namespace ramseg {

RleMask rle_encode(const BinaryMask& mask) {
  RleMask out{mask.height(), mask.width(), {}, 0, 0};
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (auto v : mask.values()) {
    if (v > 1) fail(ErrorCode::NonBinaryMask, "run-length encoding needs a binary mask");
    if (v != current) {
      out.counts.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
    out.pixel_count += v;
  }
  if (run > 0 || out.counts.empty()) out.counts.push_back(run);
  out.checksum = crc32_checksum(mask.values());
  return out;
}

BinaryMask rle_decode(const RleMask& rle) {
  if (rle.height < 0 || rle.width < 0) fail(ErrorCode::SchemaViolation, "RLE size must be non-negative");
  const auto total = static_cast<std::uint64_t>(rle.height) * static_cast<std::uint64_t>(rle.width);
  std::uint64_t sum = 0;
  for (auto c : rle.counts) sum += c;
  if (sum != total)
    fail(ErrorCode::SchemaViolation, "RLE runs cover " + std::to_string(sum) + " pixels, mask has " + std::to_string(total));
  BinaryMask mask(rle.height, rle.width);
  std::size_t pos = 0;
  std::uint64_t fg = 0;
  for (std::size_t i = 0; i < rle.counts.size(); ++i) {
    const std::uint8_t v = i % 2;
    for (std::uint32_t j = 0; j < rle.counts[i]; ++j) mask.values()[pos++] = v;
    if (v) fg += rle.counts[i];
  }
  if (fg != rle.pixel_count)
    fail(ErrorCode::SchemaViolation, "RLE pixel_count " + std::to_string(rle.pixel_count) + " does not match decoded " +
                                         std::to_string(fg));
  if (crc32_checksum(mask.values()) != rle.checksum) fail(ErrorCode::SchemaViolation, "RLE checksum mismatch");
  return mask;
}

nlohmann::json rle_to_json(const RleMask& rle) {
  return {{"size", {rle.height, rle.width}},
          {"counts", rle.counts},
          {"pixel_count", rle.pixel_count},
          {"checksum", hex32(rle.checksum)}};
}

RleMask rle_from_json(const nlohmann::json& doc) {
  try {
    RleMask rle;
    const auto& size = doc.at("size");
    if (!size.is_array() || size.size() != 2) fail(ErrorCode::SchemaViolation, "RLE size must be [height, width]");
    rle.height = size[0].get<int>();
    rle.width = size[1].get<int>();
    rle.counts = doc.at("counts").get<std::vector<std::uint32_t>>();
    rle.pixel_count = doc.at("pixel_count").get<std::uint64_t>();
    const auto text = doc.at("checksum").get<std::string>();
    std::size_t used = 0;
    const auto value = std::stoul(text, &used, 16);
    if (used != text.size() || text.size() > 8) fail(ErrorCode::SchemaViolation, "RLE checksum must be 8 hex digits");
    rle.checksum = static_cast<std::uint32_t>(value);
    return rle;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaViolation, std::string("malformed RLE mask: ") + e.what());
  } catch (const std::logic_error&) {
    fail(ErrorCode::SchemaViolation, "RLE checksum must be 8 hex digits");
  }
}

}  // namespace ramseg
