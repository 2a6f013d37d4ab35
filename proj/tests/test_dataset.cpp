#include <doctest.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "bfx/dataset.hpp"
#include "bfx/error.hpp"
#include "support.hpp"

using namespace bfx;
namespace fs = std::filesystem;

namespace {

void write_scene(const fs::path& root, const std::string& id, cv::Size image_size, cv::Size mask_size) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "gt");
  cv::imwrite((root / "images" / (id + ".png")).string(), test::random_rgb(image_size.height, image_size.width, 1));
  if (mask_size.area() > 0) {
    cv::imwrite((root / "gt" / (id + ".png")).string(), test::random_binary(mask_size.height, mask_size.width, 2) * 255);
  }
}

// Independent sum of beta^k for k < n.
double effective_number_by_summation(int n, double beta) {
  double sum = 0;
  double term = 1;
  for (int k = 0; k < n; ++k) {
    sum += term;
    term *= beta;
  }
  return sum;
}

std::vector<SampleDescriptor> descriptors(int n, const std::vector<std::string>& cities) {
  std::vector<SampleDescriptor> out;
  for (int i = 0; i < n; ++i) {
    SampleDescriptor d;
    d.city = cities[static_cast<std::size_t>(i) % cities.size()];
    d.scene_id = d.city + std::to_string(i);
    out.push_back(d);
  }
  return out;
}

}  // namespace

TEST_CASE("dataset index pairs images with masks by stem") {
  test::TempDir dir;
  write_scene(dir.path(), "austin1", {40, 30}, {40, 30});
  write_scene(dir.path(), "austin2", {40, 30}, {40, 30});
  write_scene(dir.path(), "tyrol1", {40, 30}, {0, 0});
  const auto index = load_dataset_index(dir.path());
  REQUIRE(index.samples.size() == 3);
  CHECK(index.rejected.empty());
  int test_only = 0;
  for (const auto& s : index.samples) {
    test_only += s.test_only ? 1 : 0;
    CHECK(s.rows == 30);
    CHECK(s.cols == 40);
  }
  CHECK(test_only == 1);
  CHECK(index.samples[0].city == "austin");
}

TEST_CASE("dataset index rejects a pair whose mask is one row short") {
  test::TempDir dir;
  write_scene(dir.path(), "vienna7", {50, 50}, {50, 49});
  const auto index = load_dataset_index(dir.path());
  CHECK(index.samples.empty());
  REQUIRE(index.rejected.size() == 1);
  CHECK(index.rejected[0].scene_id == "vienna7");
}

TEST_CASE("dataset index on an empty root warns and returns nothing") {
  test::TempDir dir;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "gt");
  const auto index = load_dataset_index(dir.path());
  CHECK(index.samples.empty());
  CHECK_FALSE(index.warnings.empty());
}

TEST_CASE("dataset index without the images directory is fatal") {
  test::TempDir dir;
  CHECK_THROWS_AS(load_dataset_index(dir / "nowhere"), IoError);
}

TEST_CASE("city label strips trailing digits") {
  CHECK(city_from_scene_id("austin12") == "austin");
  CHECK(city_from_scene_id("kitsap3") == "kitsap");
  CHECK(city_from_scene_id("vienna") == "vienna");
}

TEST_CASE("loaded masks are binarized") {
  test::TempDir dir;
  write_scene(dir.path(), "chicago1", {20, 20}, {20, 20});
  const auto index = load_dataset_index(dir.path());
  const auto s = load_sample(index.samples.at(0));
  double lo = 0, hi = 0;
  cv::minMaxLoc(s.mask, &lo, &hi);
  CHECK(lo == 0);
  CHECK(hi == 1);
  CHECK(s.image.type() == CV_8UC3);
}

// ---------------------------------------------------------------------------
// Patches

TEST_CASE("identity patch spec reproduces the top-left sub-image") {
  ImageSample s;
  s.image = test::random_rgb(300, 300, 11);
  s.mask = test::random_binary(300, 300, 12);
  PatchSpec spec;
  spec.crop_width = 224;
  spec.crop_height = 224;
  const auto p = sample_patch(s, spec, Normalization::unit());
  cv::Mat expected(224, 224, CV_32FC3);
  for (int r = 0; r < 224; ++r) {
    for (int c = 0; c < 224; ++c) {
      const auto v = s.image.at<cv::Vec3b>(r, c);
      for (int k = 0; k < 3; ++k) expected.at<cv::Vec3f>(r, c)[k] = static_cast<float>(v[k]) / 255.0F;
    }
  }
  CHECK(test::mats_equal(p.image, expected));
  CHECK(test::mats_equal(p.mask, s.mask(cv::Rect(0, 0, 224, 224))));
}

TEST_CASE("flipping the output of a flipped patch restores the unflipped patch") {
  ImageSample s;
  s.image = test::random_rgb(400, 400, 3);
  s.mask = test::random_binary(400, 400, 4);
  PatchSpec spec{17, 29, 180, 190, false, false, 224};
  const auto plain = sample_patch(s, spec, Normalization{});
  for (int mode : {0, 1}) {
    auto flipped_spec = spec;
    (mode == 1 ? flipped_spec.hflip : flipped_spec.vflip) = true;
    const auto flipped = sample_patch(s, flipped_spec, Normalization{});
    cv::Mat back_image, back_mask;
    cv::flip(flipped.image, back_image, mode);
    cv::flip(flipped.mask, back_mask, mode);
    CHECK(test::mats_equal(back_image, plain.image));
    CHECK(test::mats_equal(back_mask, plain.mask));
  }
}

TEST_CASE("a planted marker lands at the same output position in image and mask") {
  // The expected position is computed from the spec alone: marker centre in
  // crop coordinates, scaled to the output, mirrored by the flips.
  constexpr int kSize = 600;
  constexpr int kMarker = 24;
  const auto specs = generate_patchset(kSize, kSize, 100, 77);
  std::mt19937_64 rng(5);
  for (const auto& spec : specs) {
    std::uniform_int_distribution<int> rpos(spec.row, spec.row + spec.crop_height - kMarker);
    std::uniform_int_distribution<int> cpos(spec.col, spec.col + spec.crop_width - kMarker);
    const int mr = rpos(rng);
    const int mc = cpos(rng);
    ImageSample s;
    s.image = cv::Mat::zeros(kSize, kSize, CV_8UC3);
    s.mask = cv::Mat::zeros(kSize, kSize, CV_8UC1);
    s.image(cv::Rect(mc, mr, kMarker, kMarker)).setTo(cv::Scalar::all(255));
    s.mask(cv::Rect(mc, mr, kMarker, kMarker)).setTo(1);
    const auto p = sample_patch(s, spec, Normalization::unit());

    const double sy = static_cast<double>(spec.output_size) / spec.crop_height;
    const double sx = static_cast<double>(spec.output_size) / spec.crop_width;
    double ey = (mr - spec.row + kMarker / 2.0) * sy;
    double ex = (mc - spec.col + kMarker / 2.0) * sx;
    if (spec.vflip) ey = spec.output_size - ey;
    if (spec.hflip) ex = spec.output_size - ex;

    std::vector<cv::Mat> ch;
    cv::split(p.image, ch);
    const auto mi = cv::moments(ch[0], false);
    cv::Mat mask_f;
    p.mask.convertTo(mask_f, CV_32F);
    const auto mm = cv::moments(mask_f, false);
    REQUIRE(mi.m00 > 0);
    REQUIRE(mm.m00 > 0);
    // Moments use pixel indices; the pixel centre sits at index + 0.5.
    CHECK(std::abs(mi.m01 / mi.m00 + 0.5 - ey) < 1.0);
    CHECK(std::abs(mi.m10 / mi.m00 + 0.5 - ex) < 1.0);
    CHECK(std::abs(mm.m01 / mm.m00 + 0.5 - ey) < 1.0);
    CHECK(std::abs(mm.m10 / mm.m00 + 0.5 - ex) < 1.0);
    double lo = 0, hi = 0;
    cv::minMaxLoc(p.mask, &lo, &hi);
    CHECK(hi == 1);
  }
}

TEST_CASE("out-of-bounds patch specs name the violated bound") {
  PatchSpec spec{450, 0, 100, 100, false, false, 224};
  CHECK_THROWS_WITH_AS(validate_patch_spec(spec, 500, 500), doctest::Contains("row"), std::out_of_range);
  spec = {0, 0, 90, 90, false, false, 224};
  CHECK_THROWS_AS(validate_patch_spec(spec, 500, 500), std::out_of_range);
  spec = {0, 0, 200, 250, false, false, 224};
  CHECK_THROWS_AS(validate_patch_spec(spec, 500, 500), std::out_of_range);
}

TEST_CASE("patchset draws valid specs deterministically") {
  const auto a = generate_patchset(5000, 5000, 350, 42);
  REQUIRE(a.size() == 350);
  int hflips = 0;
  for (const auto& s : a) {
    CHECK_NOTHROW(validate_patch_spec(s, 5000, 5000));
    CHECK(s.crop_width >= 100);
    CHECK(s.crop_width <= 500);
    CHECK(s.crop_height >= 0.9 * s.crop_width - 1e-9);
    CHECK(s.crop_height <= 1.1 * s.crop_width + 1e-9);
    CHECK(s.output_size == 224);
    hflips += s.hflip ? 1 : 0;
  }
  CHECK(hflips > 100);
  CHECK(hflips < 250);
  const auto b = generate_patchset(5000, 5000, 350, 42);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].row == b[i].row);
    CHECK(a[i].col == b[i].col);
    CHECK(a[i].crop_width == b[i].crop_width);
    CHECK(a[i].crop_height == b[i].crop_height);
    CHECK(a[i].hflip == b[i].hflip);
    CHECK(a[i].vflip == b[i].vflip);
  }
  CHECK(generate_patchset(5000, 5000, 0, 42).empty());
}

TEST_CASE("patchset on a small image truncates widths and warns") {
  std::vector<std::string> warnings;
  const auto specs = generate_patchset(256, 256, 50, 1, 64, &warnings);
  CHECK_FALSE(warnings.empty());
  for (const auto& s : specs) CHECK_NOTHROW(validate_patch_spec(s, 256, 256));
}

// ---------------------------------------------------------------------------
// Tiles

TEST_CASE("tile footprints cover the padded scene exactly once") {
  const auto grid = TileGrid::cover(5000, 5000, 512);
  CHECK(grid.rows == 10);
  CHECK(grid.cols == 10);
  REQUIRE(grid.count() == 100);
  cv::Mat coverage = cv::Mat::zeros(grid.padded_rows(), grid.padded_cols(), CV_8UC1);
  for (int i = 0; i < grid.count(); ++i) coverage(grid.footprint(i)) += 1;
  double lo = 0, hi = 0;
  cv::minMaxLoc(coverage, &lo, &hi);
  CHECK(lo == 1);
  CHECK(hi == 1);
  CHECK(grid.padded_rows() >= 5000);
}

TEST_CASE("tiling a 1024 scene gives four unpadded tiles in row-major order") {
  ImageSample s;
  s.image = test::random_rgb(1024, 1024, 8);
  s.mask = test::random_binary(1024, 1024, 9);
  const auto grid = TileGrid::cover(1024, 1024, 512, PadPolicy::reflect, 512);
  const auto tiles = tile_image(s, grid);
  REQUIRE(tiles.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(tiles[static_cast<std::size_t>(i)].index == i);
    const cv::Rect r((i % 2) * 512, (i / 2) * 512, 512, 512);
    CHECK(test::mats_equal(tiles[static_cast<std::size_t>(i)].image, s.image(r)));
    CHECK(test::mats_equal(tiles[static_cast<std::size_t>(i)].mask, s.mask(r)));
  }
}

TEST_CASE("resized tiles keep masks binary") {
  ImageSample s;
  s.image = test::random_rgb(700, 600, 10);
  s.mask = test::random_binary(700, 600, 11);
  for (auto pad : {PadPolicy::reflect, PadPolicy::zero}) {
    const auto tiles = tile_image(s, TileGrid::cover(700, 600, 512, pad, 224));
    CHECK(tiles.size() == 4);
    for (const auto& t : tiles) {
      CHECK(t.image.size() == cv::Size(224, 224));
      CHECK(cv::countNonZero((t.mask != 0) & (t.mask != 1)) == 0);
    }
  }
}

TEST_CASE("a scene of exactly one tile is returned unchanged before resizing") {
  ImageSample s;
  s.image = test::random_rgb(512, 512, 12);
  const auto tiles = tile_image(s, TileGrid::cover(512, 512, 512, PadPolicy::reflect, 512));
  REQUIRE(tiles.size() == 1);
  CHECK(test::mats_equal(tiles[0].image, s.image));
  CHECK(tiles[0].mask.empty());
}

// ---------------------------------------------------------------------------
// Class statistics

TEST_CASE("effective number agrees with direct summation") {
  CHECK(effective_number(100, 0.99) == doctest::Approx(effective_number_by_summation(100, 0.99)).epsilon(1e-12));
  CHECK(effective_number(900, 0.99) == doctest::Approx(effective_number_by_summation(900, 0.99)).epsilon(1e-12));
  CHECK(effective_number(100, 0.99) == doctest::Approx(63.40).epsilon(1e-3));
  CHECK(effective_number(900, 0.99) == doctest::Approx(99.988).epsilon(1e-4));
  CHECK(effective_number(1, 0.3) == doctest::Approx(1.0));
  CHECK(effective_number(0, 0.5) == 0.0);
  CHECK_THROWS(effective_number(10, 1.0));
  CHECK_THROWS(effective_number(10, -0.1));
}

TEST_CASE("effective number is nondecreasing and bounded") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> beta_dist(0.0, 0.999999);
  for (int trial = 0; trial < 200; ++trial) {
    const double beta = beta_dist(rng);
    double prev = 0;
    for (double n : {0.0, 1.0, 2.0, 10.0, 1e3, 1e6, 1e9, 1e12}) {
      const double e = effective_number(n, beta);
      CHECK(e >= prev);
      CHECK(e <= n + 1e-9);
      CHECK(e <= 1.0 / (1.0 - beta) * (1 + 1e-12));
      prev = e;
    }
  }
}

TEST_CASE("class statistics on the published pixel counts") {
  const auto stats = class_stats_from_counts({44'000'000'000ULL, 710'000'000ULL}, 1.0 - 1e-9);
  CHECK(stats.effective_number[1] == doctest::Approx(5.08e8).epsilon(0.01));
  CHECK(stats.effective_number[0] == doctest::Approx(1.00e9).epsilon(0.01));
  CHECK(stats.fraction[0] + stats.fraction[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(stats.weight[0] + stats.weight[1] == doctest::Approx(2.0));
  CHECK(stats.weight[1] / stats.weight[0] == doctest::Approx(1.00e9 / 5.08e8).epsilon(0.01));
}

TEST_CASE("class statistics give an absent class zero weight") {
  const auto stats = class_stats_from_counts({1000, 0}, 0.99);
  CHECK(stats.weight[1] == 0.0);
  CHECK(stats.weight[0] == doctest::Approx(2.0));
}

TEST_CASE("class statistics over samples count mask pixels") {
  ImageSample a, b;
  a.image = test::random_rgb(4, 5, 1);
  a.mask = cv::Mat::zeros(4, 5, CV_8UC1);
  a.mask(cv::Rect(0, 0, 2, 2)).setTo(1);
  b.image = test::random_rgb(2, 2, 2);
  b.mask = cv::Mat::ones(2, 2, CV_8UC1);
  const std::vector<ImageSample> samples{a, b};
  const auto stats = compute_class_stats(samples, 0.5);
  CHECK(stats.pixel_count[0] == 16);
  CHECK(stats.pixel_count[1] == 8);
  CHECK_THROWS(compute_class_stats(samples, 1.0));
}

// ---------------------------------------------------------------------------
// Splits

TEST_CASE("random split of 180 scenes keeps 144 for training") {
  const auto d = descriptors(180, {"austin", "chicago", "kitsap", "tyrol", "vienna"});
  SplitSpec spec;
  spec.seed = 7;
  const auto a = split_dataset(d, spec);
  CHECK(a.train.size() == 144);
  CHECK(a.val.size() == 36);
  const auto b = split_dataset(d, spec);
  for (std::size_t i = 0; i < a.val.size(); ++i) CHECK(a.val[i].scene_id == b.val[i].scene_id);

  std::set<std::string> all;
  for (const auto& s : a.train) all.insert(s.scene_id);
  for (const auto& s : a.val) CHECK(all.insert(s.scene_id).second);
  CHECK(all.size() == 180);

  spec.seed = 8;
  const auto c = split_dataset(d, spec);
  CHECK(c.val.size() == 36);
  std::set<std::string> val_a, val_c;
  for (const auto& s : a.val) val_a.insert(s.scene_id);
  for (const auto& s : c.val) val_c.insert(s.scene_id);
  CHECK(val_a != val_c);
}

TEST_CASE("geographic split keeps validation cities out of training") {
  const auto d = descriptors(50, {"austin", "chicago", "kitsap", "tyrol", "vienna"});
  SplitSpec spec;
  spec.mode = SplitMode::geographic;
  spec.train_cities = {"austin", "chicago", "kitsap", "tyrol"};
  spec.val_cities = {"vienna"};
  const auto r = split_dataset(d, spec);
  CHECK(r.train.size() == 40);
  CHECK(r.val.size() == 10);
  for (const auto& s : r.train) CHECK(s.city != "vienna");
  for (const auto& s : r.val) CHECK(s.city == "vienna");

  spec.train_cities = {"austin", "chicago", "kitsap"};
  spec.val_cities = {"tyrol"};
  CHECK_THROWS_WITH(split_dataset(d, spec), doctest::Contains("vienna"));
  spec.val_cities = {"austin"};
  spec.train_cities = {"austin", "chicago", "kitsap", "tyrol", "vienna"};
  CHECK_THROWS(split_dataset(d, spec));
}
