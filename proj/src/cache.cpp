#include "bfx/cache.hpp"

#include <spdlog/spdlog.h>

#include <array>
#include <atomic>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "bfx/error.hpp"

namespace fs = std::filesystem;

namespace bfx {
namespace {

constexpr std::array<char, 16> kMagic = {'B', 'F', 'X', '-', 'S', 'A', 'M', 'P',
                                         'L', 'E', 'C', 'A', 'C', 'H', 'E', '\n'};
constexpr std::size_t kHeaderSize = 16 + 4 + 4 + 32 + 32 + 8;

template <typename T>
void append_le(std::vector<std::byte>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T read_le(std::span<const std::byte> bytes, std::size_t& offset) {
  if (offset + sizeof(T) > bytes.size()) throw IoError("truncated buffer");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(bytes[offset + i])) << (8 * i);
  }
  offset += sizeof(T);
  return static_cast<T>(v);
}

void append_raw(std::vector<std::byte>& out, const void* data, std::size_t n) {
  const auto* p = static_cast<const std::byte*>(data);
  out.insert(out.end(), p, p + n);
}

std::string norm_material(const Normalization& norm) {
  std::ostringstream os;
  os.precision(9);
  os << "norm:" << norm.mean[0] << ',' << norm.mean[1] << ',' << norm.mean[2] << ';' << norm.std[0] << ','
     << norm.std[1] << ',' << norm.std[2];
  return os.str();
}

void append_mat(std::vector<std::byte>& out, const cv::Mat& m) {
  append_le<std::int32_t>(out, m.empty() ? 0 : m.rows);
  append_le<std::int32_t>(out, m.empty() ? 0 : m.cols);
  append_le<std::int32_t>(out, m.empty() ? 0 : m.type());
  if (m.empty()) return;
  const cv::Mat c = m.isContinuous() ? m : m.clone();
  append_raw(out, c.data, c.total() * c.elemSize());
}

cv::Mat read_mat(std::span<const std::byte> bytes, std::size_t& offset) {
  const auto rows = read_le<std::int32_t>(bytes, offset);
  const auto cols = read_le<std::int32_t>(bytes, offset);
  const auto type = read_le<std::int32_t>(bytes, offset);
  if (rows == 0 || cols == 0) return {};
  if (rows < 0 || cols < 0) throw IoError("negative matrix dimensions");
  cv::Mat m(rows, cols, type);
  const std::size_t n = m.total() * m.elemSize();
  if (offset + n > bytes.size()) throw IoError("truncated matrix payload");
  std::memcpy(m.data, bytes.data() + offset, n);
  offset += n;
  return m;
}

std::string temp_suffix() {
  static std::atomic<std::uint64_t> counter{0};
  std::ostringstream os;
  os << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id()) << '.' << counter++;
  return os.str();
}

}  // namespace

CacheKey CacheKey::for_patch(const std::string& scene_id, const PatchSpec& s, const Normalization& norm) {
  std::ostringstream os;
  os << "scene:" << scene_id << "|patch:" << s.row << ',' << s.col << ',' << s.crop_width << ','
     << s.crop_height << ',' << s.hflip << ',' << s.vflip << ',' << s.output_size << '|' << norm_material(norm);
  return {sha256(os.str())};
}

CacheKey CacheKey::for_tile(const std::string& scene_id, const TileGrid& grid, int tile_index,
                            const Normalization& norm) {
  std::ostringstream os;
  os << "scene:" << scene_id << "|tile:" << grid.tile_size << ','
     << (grid.pad_policy == PadPolicy::reflect ? "reflect" : "zero") << ',' << grid.rows << ',' << grid.cols
     << ',' << grid.resize_to << ',' << tile_index << '|' << norm_material(norm);
  return {sha256(os.str())};
}

SampleCache::SampleCache(fs::path root) : root_(std::move(root)) {}

fs::path SampleCache::path_for(const CacheKey& key) const {
  const auto hex = key.hex();
  return root_ / std::to_string(kCacheFormatVersion) / hex.substr(0, 2) / (hex + ".bin");
}

bool SampleCache::contains(const CacheKey& key) const { return fs::exists(path_for(key)); }

void SampleCache::put(const CacheEntry& entry) {
  if (entry.format_version != kCacheFormatVersion) {
    throw InvalidArgument("cache entry format version " + std::to_string(entry.format_version) +
                          " is not supported");
  }
  std::vector<std::byte> file;
  file.reserve(kHeaderSize + entry.payload.size());
  append_raw(file, kMagic.data(), kMagic.size());
  append_le<std::uint32_t>(file, entry.format_version);
  append_le<std::uint32_t>(file, 0);
  append_raw(file, entry.key.digest.data(), entry.key.digest.size());
  const auto payload_hash = sha256(entry.payload);
  append_raw(file, payload_hash.data(), payload_hash.size());
  append_le<std::uint64_t>(file, entry.payload.size());
  file.insert(file.end(), entry.payload.begin(), entry.payload.end());

  const auto target = path_for(entry.key);
  fs::create_directories(target.parent_path());
  auto tmp = target;
  tmp += temp_suffix();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write cache file " + tmp.string());
    out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
    if (!out) throw IoError("short write to cache file " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::optional<std::vector<std::byte>> SampleCache::get(const CacheKey& key) {
  const auto path = path_for(key);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const auto bytes = std::as_bytes(std::span{raw.data(), raw.size()});

  auto evict = [&](const char* why) -> std::optional<std::vector<std::byte>> {
    spdlog::warn("cache entry {} corrupted ({}); evicting", path.string(), why);
    std::error_code ec;
    fs::remove(path, ec);
    ++evictions_;
    return std::nullopt;
  };

  if (bytes.size() < kHeaderSize) return evict("short header");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) return evict("bad magic");
  std::size_t offset = kMagic.size();
  if (read_le<std::uint32_t>(bytes, offset) != kCacheFormatVersion) return evict("format version");
  offset += 4;
  if (std::memcmp(bytes.data() + offset, key.digest.data(), key.digest.size()) != 0) {
    return evict("key mismatch");
  }
  offset += 32;
  Digest stored{};
  std::memcpy(stored.data(), bytes.data() + offset, stored.size());
  offset += 32;
  const auto length = read_le<std::uint64_t>(bytes, offset);
  if (length != bytes.size() - kHeaderSize) return evict("length mismatch");
  auto payload = bytes.subspan(kHeaderSize);
  if (sha256(payload) != stored) return evict("payload hash mismatch");
  return std::vector<std::byte>(payload.begin(), payload.end());
}

void SampleCache::put_pair(const CacheKey& key, const PatchPair& pair) {
  put(CacheEntry{key, serialize_pair(pair), kCacheFormatVersion});
}

std::optional<PatchPair> SampleCache::get_pair(const CacheKey& key) {
  auto payload = get(key);
  if (!payload) return std::nullopt;
  return deserialize_pair(*payload);
}

std::vector<std::byte> serialize_pair(const PatchPair& pair) {
  std::vector<std::byte> out;
  append_mat(out, pair.image);
  append_mat(out, pair.mask);
  return out;
}

PatchPair deserialize_pair(std::span<const std::byte> bytes) {
  std::size_t offset = 0;
  PatchPair p;
  p.image = read_mat(bytes, offset);
  p.mask = read_mat(bytes, offset);
  if (offset != bytes.size()) throw IoError("trailing bytes after cached pair");
  return p;
}

}  // namespace bfx
