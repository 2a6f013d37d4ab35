#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace bfx {

using Digest = std::array<std::uint8_t, 32>;

/// SHA-256 of a byte range.
Digest sha256(std::span<const std::byte> bytes);
Digest sha256(std::string_view text);
Digest sha256_file(const std::filesystem::path& path);

std::string to_hex(const Digest& digest);
/// Parses 64 lowercase or uppercase hex characters; throws InvalidArgument otherwise.
Digest digest_from_hex(std::string_view hex);

}  // namespace bfx
