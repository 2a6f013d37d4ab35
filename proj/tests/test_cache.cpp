#include <doctest.h>

#include <cstring>
#include <fstream>
#include <thread>

#include "bfx/cache.hpp"
#include "bfx/hashing.hpp"
#include "support.hpp"

using namespace bfx;
namespace fs = std::filesystem;

namespace {

PatchPair random_pair(std::uint64_t seed, bool with_mask = true) {
  PatchPair p;
  p.image = cv::Mat(16, 24, CV_32FC3);
  cv::RNG rng(seed);
  rng.fill(p.image, cv::RNG::NORMAL, 0.0, 3.0);
  p.image.at<cv::Vec3f>(0, 0) = {-0.0F, std::numeric_limits<float>::denorm_min(), 1e30F};
  if (with_mask) p.mask = test::random_binary(16, 24, seed + 1);
  return p;
}

bool bytes_equal(const cv::Mat& a, const cv::Mat& b) {
  if (a.size() != b.size() || a.type() != b.type()) return false;
  const cv::Mat ac = a.isContinuous() ? a : a.clone();
  const cv::Mat bc = b.isContinuous() ? b : b.clone();
  return std::memcmp(ac.data, bc.data, ac.total() * ac.elemSize()) == 0;
}

CacheKey key_of(const std::string& scene, int row) {
  PatchSpec spec;
  spec.row = row;
  return CacheKey::for_patch(scene, spec, Normalization{});
}

}  // namespace

TEST_CASE("cache round trip is bit exact") {
  test::TempDir dir;
  SampleCache cache(dir.path());
  CacheEntry entry;
  entry.key = key_of("austin1", 3);
  for (int i = 0; i < 1000; ++i) entry.payload.push_back(static_cast<std::byte>((i * 37) & 0xFF));
  cache.put(entry);
  const auto got = cache.get(entry.key);
  REQUIRE(got.has_value());
  CHECK(*got == entry.payload);
  CHECK(cache.contains(entry.key));
  CHECK(cache.path_for(entry.key).parent_path().filename() == entry.key.hex().substr(0, 2));
}

TEST_CASE("patch pairs survive the cache bit for bit") {
  test::TempDir dir;
  SampleCache cache(dir.path());
  for (bool with_mask : {true, false}) {
    const auto pair = random_pair(with_mask ? 1 : 2, with_mask);
    const auto key = key_of(with_mask ? "a" : "b", 1);
    cache.put_pair(key, pair);
    const auto back = cache.get_pair(key);
    REQUIRE(back.has_value());
    CHECK(bytes_equal(back->image, pair.image));
    CHECK(back->mask.empty() == pair.mask.empty());
    if (with_mask) CHECK(bytes_equal(back->mask, pair.mask));
  }
  const auto pair = random_pair(9);
  const auto again = deserialize_pair(serialize_pair(pair));
  CHECK(bytes_equal(again.image, pair.image));
}

TEST_CASE("unknown keys are absent, not errors") {
  test::TempDir dir;
  SampleCache cache(dir.path());
  CHECK_FALSE(cache.get(key_of("nowhere", 0)).has_value());
  CHECK_FALSE(cache.get_pair(key_of("nowhere", 0)).has_value());
  CHECK(cache.evictions() == 0);
}

TEST_CASE("truncated and corrupted entries are evicted") {
  test::TempDir dir;
  SampleCache cache(dir.path());
  const auto k1 = key_of("s", 1);
  const auto k2 = key_of("s", 2);
  cache.put_pair(k1, random_pair(3));
  cache.put_pair(k2, random_pair(4));

  const auto p1 = cache.path_for(k1);
  fs::resize_file(p1, fs::file_size(p1) / 2);
  CHECK_FALSE(cache.get(k1).has_value());
  CHECK_FALSE(fs::exists(p1));
  CHECK(cache.evictions() == 1);

  const auto p2 = cache.path_for(k2);
  {
    std::fstream f(p2, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    f.put('\x7f');
  }
  CHECK_FALSE(cache.get(k2).has_value());
  CHECK_FALSE(fs::exists(p2));
  CHECK(cache.evictions() == 2);
}

TEST_CASE("an entry stored under another key is not returned") {
  test::TempDir dir;
  SampleCache cache(dir.path());
  const auto k1 = key_of("s", 1);
  const auto k2 = key_of("s", 2);
  cache.put_pair(k1, random_pair(5));
  fs::create_directories(cache.path_for(k2).parent_path());
  fs::copy_file(cache.path_for(k1), cache.path_for(k2));
  CHECK_FALSE(cache.get(k2).has_value());
  CHECK(cache.get(k1).has_value());
}

TEST_CASE("cache keys depend on scene, spec and normalization") {
  PatchSpec spec;
  const auto base = CacheKey::for_patch("austin1", spec, Normalization{});
  CHECK(base == CacheKey::for_patch("austin1", spec, Normalization{}));
  CHECK_FALSE(base == CacheKey::for_patch("austin2", spec, Normalization{}));
  CHECK_FALSE(base == CacheKey::for_patch("austin1", spec, Normalization::unit()));
  auto flipped = spec;
  flipped.hflip = true;
  CHECK_FALSE(base == CacheKey::for_patch("austin1", flipped, Normalization{}));
  const auto grid = TileGrid::cover(1000, 1000, 512);
  CHECK_FALSE(CacheKey::for_tile("austin1", grid, 0, Normalization{}) ==
              CacheKey::for_tile("austin1", grid, 1, Normalization{}));
}

TEST_CASE("concurrent writers and readers never observe partial entries") {
  test::TempDir dir;
  const auto key = key_of("shared", 0);
  const auto pair = random_pair(6);
  std::atomic<int> bad{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      SampleCache cache(dir.path());
      for (int i = 0; i < 25; ++i) {
        if (t % 2 == 0) {
          cache.put_pair(key, pair);
        } else if (auto got = cache.get_pair(key)) {
          if (!bytes_equal(got->image, pair.image)) ++bad;
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK(bad == 0);
}
