#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace repcmp {

/// RFC 4648 base64 with padding; used to wrap CLTS blobs in JSON bodies.
std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws FormatError on characters outside the alphabet or bad padding.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace repcmp
