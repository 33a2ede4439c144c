#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fpq {

// Hex-encoded SHA-256 over the concatenation of the given byte ranges.
std::string sha256_hex(const std::vector<std::span<const std::uint8_t>>& parts);
std::string sha256_hex(const std::string& text);

}  // namespace fpq
