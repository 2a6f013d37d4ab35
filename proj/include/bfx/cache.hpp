#pragma once

// On-disk cache of preprocessed (image, mask) samples.
//
// Layout: <root>/<format_version>/<key[0:2]>/<key>.bin. Each file carries a
// fixed header followed by the payload:
//
//   16 bytes  magic "BFX-SAMPLECACHE\n"
//    4 bytes  format version (little endian)
//    4 bytes  reserved (zero)
//   32 bytes  key digest
//   32 bytes  SHA-256 of the payload
//    8 bytes  payload length (little endian)
//    N bytes  payload
//
// Writers publish through a temp file and an atomic rename, so concurrent
// readers never observe a partial entry. A file whose header, length or
// payload hash does not check out is evicted and reported as absent.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bfx/dataset.hpp"
#include "bfx/hashing.hpp"

namespace bfx {

inline constexpr std::uint32_t kCacheFormatVersion = 1;

/// Content-derived cache key.
struct CacheKey {
  Digest digest{};

  std::string hex() const { return to_hex(digest); }
  bool operator==(const CacheKey&) const = default;

  static CacheKey for_patch(const std::string& scene_id, const PatchSpec& spec, const Normalization& norm);
  static CacheKey for_tile(const std::string& scene_id, const TileGrid& grid, int tile_index,
                           const Normalization& norm);
};

struct CacheEntry {
  CacheKey key;
  std::vector<std::byte> payload;
  std::uint32_t format_version = kCacheFormatVersion;
};

class SampleCache {
 public:
  explicit SampleCache(std::filesystem::path root);

  /// Writes (or atomically replaces) an entry.
  void put(const CacheEntry& entry);
  /// Absent keys and corrupted entries both yield std::nullopt; corrupted
  /// files are removed.
  std::optional<std::vector<std::byte>> get(const CacheKey& key);
  bool contains(const CacheKey& key) const;

  void put_pair(const CacheKey& key, const PatchPair& pair);
  std::optional<PatchPair> get_pair(const CacheKey& key);

  std::filesystem::path path_for(const CacheKey& key) const;
  const std::filesystem::path& root() const { return root_; }
  std::size_t evictions() const { return evictions_; }

 private:
  std::filesystem::path root_;
  std::size_t evictions_ = 0;
};

/// Bit-exact serialization of a PatchPair (CV_32FC3 image, optional CV_8UC1 mask).
std::vector<std::byte> serialize_pair(const PatchPair& pair);
PatchPair deserialize_pair(std::span<const std::byte> bytes);

}  // namespace bfx
