#include <doctest.h>

#include <opencv2/imgproc.hpp>

#include <fstream>
#include <map>
#include <random>
#include <set>

#include "bfx/error.hpp"
#include "bfx/fusion.hpp"
#include "support.hpp"

using namespace bfx;
namespace fs = std::filesystem;

namespace {

ProbabilityMask pixel_mask(float p0, float p1) {
  cv::Mat m(1, 1, CV_32FC2);
  m.at<cv::Vec2f>(0, 0) = {p0, p1};
  return ProbabilityMask(m);
}

ProbabilityMask random_mask(int rows, int cols, std::uint64_t seed) {
  cv::Mat b(rows, cols, CV_32FC1);
  cv::RNG rng(seed);
  rng.fill(b, cv::RNG::UNIFORM, 0.0, 1.0);
  return ProbabilityMask::from_building(b);
}

int distinct_labels(const cv::Mat& labels) {
  std::set<int> s;
  for (int r = 0; r < labels.rows; ++r) {
    for (int c = 0; c < labels.cols; ++c) s.insert(labels.at<int>(r, c));
  }
  return static_cast<int>(s.size());
}

}  // namespace

TEST_CASE("probability masks enforce the simplex") {
  cv::Mat bad(1, 2, CV_32FC2);
  bad.at<cv::Vec2f>(0, 0) = {0.5F, 0.5F};
  bad.at<cv::Vec2f>(0, 1) = {0.5F, 0.6F};
  CHECK_THROWS_AS(ProbabilityMask{bad}, InvalidArgument);
  bad.at<cv::Vec2f>(0, 1) = {-0.1F, 1.1F};
  CHECK_THROWS_AS(ProbabilityMask{bad}, InvalidArgument);
  CHECK_THROWS_AS(ProbabilityMask{cv::Mat::zeros(2, 2, CV_32FC1)}, InvalidArgument);
}

TEST_CASE("merge copies the most confident member") {
  const std::vector<ProbabilityMask> members{pixel_mask(0.6F, 0.4F), pixel_mask(0.2F, 0.8F), pixel_mask(0.55F, 0.45F)};
  const auto merged = ensemble_merge(members);
  CHECK(merged.at(0, 0)[0] == 0.2F);
  CHECK(merged.at(0, 0)[1] == 0.8F);
}

TEST_CASE("merge of identical members is that member") {
  const auto m = random_mask(7, 9, 1);
  const std::vector<ProbabilityMask> members{m, m, m};
  CHECK(test::mats_equal(ensemble_merge(members).probs(), m.probs()));
  const std::vector<ProbabilityMask> single{m};
  CHECK(test::mats_equal(ensemble_merge(single).probs(), m.probs()));
}

TEST_CASE("confidence ties go to the lower member index") {
  std::vector<ProbabilityMask> members{pixel_mask(0.1F, 0.9F), pixel_mask(0.9F, 0.1F)};
  CHECK(ensemble_merge(members).at(0, 0)[1] == 0.9F);
  std::swap(members[0], members[1]);
  CHECK(ensemble_merge(members).at(0, 0)[1] == 0.1F);
}

TEST_CASE("merge rejects shape mismatches and empty input") {
  const std::vector<ProbabilityMask> members{random_mask(3, 3, 1), random_mask(3, 4, 2)};
  CHECK_THROWS_AS(ensemble_merge(members), InvalidArgument);
  CHECK_THROWS_AS(ensemble_merge(std::vector<ProbabilityMask>{}), InvalidArgument);
}

TEST_CASE("merged confidence equals the maximum member confidence") {
  std::vector<ProbabilityMask> members{random_mask(20, 20, 3), random_mask(20, 20, 4), random_mask(20, 20, 5)};
  const auto merged = ensemble_merge(members);
  for (int r = 0; r < 20; ++r) {
    for (int c = 0; c < 20; ++c) {
      float best = 0;
      for (const auto& m : members) best = std::max({best, m.at(r, c)[0], m.at(r, c)[1]});
      CHECK(std::max(merged.at(r, c)[0], merged.at(r, c)[1]) == best);
    }
  }
}

TEST_CASE("threshold applies to the building probability, inclusively") {
  CHECK(confidence_threshold(pixel_mask(0.2F, 0.8F), 0.75).at<std::uint8_t>(0, 0) == 1);
  CHECK(confidence_threshold(pixel_mask(0.25F, 0.75F), 0.75).at<std::uint8_t>(0, 0) == 1);
  CHECK(confidence_threshold(pixel_mask(0.3F, 0.7F), 0.75).at<std::uint8_t>(0, 0) == 0);
  CHECK_THROWS(confidence_threshold(pixel_mask(0.3F, 0.7F), 0.5));
  CHECK_THROWS(confidence_threshold(pixel_mask(0.3F, 0.7F), 1.01));
  CHECK_NOTHROW(confidence_threshold(pixel_mask(0.3F, 0.7F), 1.0));
}

TEST_CASE("raising the threshold never adds building pixels") {
  const auto m = random_mask(40, 40, 6);
  cv::Mat prev = confidence_threshold(m, 0.51);
  for (double t = 0.55; t <= 1.0; t += 0.05) {
    const cv::Mat cur = confidence_threshold(m, t);
    CHECK(cv::countNonZero(cur & ~prev) == 0);
    prev = cur;
  }
}

TEST_CASE("merge and threshold agree with a per-pixel reference on every lattice grid") {
  // Two 2x2 pixels of three members cover the same per-pixel cases as the full
  // grid; every pixel-level combination is enumerated.
  std::vector<float> lattice;
  for (int k = 1; k <= 9; ++k) {
    const float raw0 = static_cast<float>(k) / 10.F;
    for (int j = 1; j <= 9; ++j) {
      const float raw1 = static_cast<float>(j) / 10.F;
      lattice.push_back(raw1 / (raw0 + raw1));
    }
  }
  std::sort(lattice.begin(), lattice.end());
  lattice.erase(std::unique(lattice.begin(), lattice.end()), lattice.end());
  const int n = static_cast<int>(lattice.size());
  long mismatches = 0;
  cv::Mat a(n, n * n, CV_32FC1), b(n, n * n, CV_32FC1), c(n, n * n, CV_32FC1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        a.at<float>(i, j * n + k) = lattice[static_cast<std::size_t>(i)];
        b.at<float>(i, j * n + k) = lattice[static_cast<std::size_t>(j)];
        c.at<float>(i, j * n + k) = lattice[static_cast<std::size_t>(k)];
      }
    }
  }
  const std::vector<ProbabilityMask> members{ProbabilityMask::from_building(a), ProbabilityMask::from_building(b),
                                             ProbabilityMask::from_building(c)};
  const auto merged = ensemble_merge(members);
  const auto mask = confidence_threshold(merged, 0.75);
  for (int r = 0; r < a.rows; ++r) {
    for (int col = 0; col < a.cols; ++col) {
      int best = 0;
      float best_conf = -1;
      for (int m = 0; m < 3; ++m) {
        const auto v = members[static_cast<std::size_t>(m)].at(r, col);
        const float conf = v[0] > v[1] ? v[0] : v[1];
        if (conf > best_conf) {
          best_conf = conf;
          best = m;
        }
      }
      const auto expect = members[static_cast<std::size_t>(best)].at(r, col);
      const auto got = merged.at(r, col);
      mismatches += (got[0] != expect[0] || got[1] != expect[1]) ? 1 : 0;
      mismatches += (mask.at<std::uint8_t>(r, col) == 1) != (expect[1] >= 0.75F) ? 1 : 0;
    }
  }
  CHECK(mismatches == 0);
}

// ---------------------------------------------------------------------------
// Classical segmentation

TEST_CASE("otsu splits a bimodal image at the variance-maximizing level") {
  cv::Mat img(20, 20, CV_8UC1, cv::Scalar(50));
  img(cv::Rect(10, 0, 10, 20)).setTo(200);
  // Exhaustive between-class variance over every threshold.
  std::array<double, 256> hist{};
  for (int r = 0; r < img.rows; ++r) {
    for (int c = 0; c < img.cols; ++c) hist[img.at<std::uint8_t>(r, c)] += 1;
  }
  double best = -1;
  std::vector<int> argmax;
  for (int t = 0; t < 256; ++t) {
    double w0 = 0, s0 = 0, w1 = 0, s1 = 0;
    for (int v = 0; v < 256; ++v) {
      (v <= t ? w0 : w1) += hist[static_cast<std::size_t>(v)];
      (v <= t ? s0 : s1) += v * hist[static_cast<std::size_t>(v)];
    }
    if (w0 == 0 || w1 == 0) continue;
    const double diff = s0 / w0 - s1 / w1;
    const double var = w0 * w1 * diff * diff;
    if (var > best + 1e-9) {
      best = var;
      argmax = {t};
    } else if (std::abs(var - best) <= 1e-9) {
      argmax.push_back(t);
    }
  }
  const int t = otsu_threshold(img);
  CHECK(std::find(argmax.begin(), argmax.end(), t) != argmax.end());
  CHECK(t >= 50);
  CHECK(t < 200);
  cv::Mat rgb;
  cv::cvtColor(img, rgb, cv::COLOR_GRAY2RGB);
  const auto labels = classical_segment(rgb, SegmentMethod::otsu);
  CHECK(labels.at<int>(0, 0) == 0);
  CHECK(labels.at<int>(0, 19) == 1);
  CHECK(cv::countNonZero(labels) == 200);
}

TEST_CASE("constant images yield a single label for every method") {
  cv::Mat rgb(32, 32, CV_8UC3, cv::Scalar(90, 120, 60));
  for (auto method : {SegmentMethod::otsu, SegmentMethod::watershed, SegmentMethod::slic}) {
    SegmentParams params;
    params.n_segments = 16;
    CHECK(distinct_labels(classical_segment(rgb, method, params)) == 1);
  }
}

TEST_CASE("slic finds the four quadrants of a quadrant image") {
  cv::Mat rgb(64, 64, CV_8UC3);
  rgb(cv::Rect(0, 0, 32, 32)).setTo(cv::Scalar(255, 0, 0));
  rgb(cv::Rect(32, 0, 32, 32)).setTo(cv::Scalar(0, 255, 0));
  rgb(cv::Rect(0, 32, 32, 32)).setTo(cv::Scalar(0, 0, 255));
  rgb(cv::Rect(32, 32, 32, 32)).setTo(cv::Scalar(255, 255, 0));
  const auto labels = slic_superpixels(rgb, 4, 10.0, 10);
  CHECK(distinct_labels(labels) == 4);
  for (const auto& q : {cv::Rect(0, 0, 32, 32), cv::Rect(32, 0, 32, 32), cv::Rect(0, 32, 32, 32),
                        cv::Rect(32, 32, 32, 32)}) {
    CHECK(distinct_labels(labels(q).clone()) == 1);
  }
}

TEST_CASE("watershed labels cover the image") {
  const auto rgb = test::random_rgb(40, 40, 3);
  cv::Mat marker = cv::Mat::zeros(40, 40, CV_8UC1);
  marker(cv::Rect(5, 5, 12, 12)).setTo(1);
  marker(cv::Rect(24, 20, 10, 14)).setTo(1);
  const auto labels = watershed_segments(rgb, marker, 0.5);
  double lo = 0, hi = 0;
  cv::minMaxLoc(labels, &lo, &hi);
  CHECK(lo >= 0);
  CHECK(labels.type() == CV_32SC1);
  CHECK(distinct_labels(labels) >= 2);
}

TEST_CASE("unknown segmentation method is an error") {
  CHECK_THROWS(segment_method_from_string("kmeans"));
  CHECK(segment_method_from_string("slic") == SegmentMethod::slic);
}

TEST_CASE("superpixel fusion keeps segments by overlap fraction") {
  cv::Mat labels(10, 10, CV_32SC1, cv::Scalar(0));
  labels(cv::Rect(0, 0, 5, 10)).setTo(1);  // 50 px
  labels(cv::Rect(5, 0, 5, 5)).setTo(2);   // 25 px
  cv::Mat mask = cv::Mat::zeros(10, 10, CV_8UC1);
  mask(cv::Rect(0, 0, 5, 6)).setTo(1);  // 30 of segment 1 = 0.6
  mask(cv::Rect(5, 5, 5, 5)).setTo(1);  // all of segment 0

  const auto kept = superpixel_fuse(mask, labels, 0.5);
  CHECK(kept.at<std::uint8_t>(9, 0) == 1);
  CHECK(kept.at<std::uint8_t>(9, 9) == 1);
  CHECK(kept.at<std::uint8_t>(0, 9) == 0);
  CHECK(cv::countNonZero(kept) == 75);
  const auto strict = superpixel_fuse(mask, labels, 0.7);
  CHECK(cv::countNonZero(strict) == 25);
  CHECK(cv::countNonZero(strict & ~kept) == 0);
}

TEST_CASE("superpixel fusion is monotone in tau") {
  const auto rgb = test::random_rgb(48, 48, 21);
  const auto labels = slic_superpixels(rgb, 30, 10.0, 5);
  const auto mask = test::random_binary(48, 48, 22, 0.5);
  cv::Mat prev = superpixel_fuse(mask, labels, 0.0);
  for (double tau = 0.1; tau <= 1.0; tau += 0.1) {
    const cv::Mat cur = superpixel_fuse(mask, labels, tau);
    CHECK(cv::countNonZero(cur & ~prev) == 0);
    prev = cur;
  }
}

// ---------------------------------------------------------------------------
// Polygons

TEST_CASE("a filled square becomes one four-vertex polygon") {
  cv::Mat mask = cv::Mat::zeros(20, 20, CV_8UC1);
  mask(cv::Rect(3, 4, 10, 10)).setTo(1);
  const auto polys = polygonize(mask, 0.0);
  REQUIRE(polys.size() == 1);
  CHECK(polys[0].outer.size() == 4);
  CHECK(polys[0].area == doctest::Approx(100.0));
  CHECK(signed_ring_area(polys[0].outer) == doctest::Approx(100.0));
  CHECK(polygonize(cv::Mat::zeros(8, 8, CV_8UC1), 1.0).empty());
}

TEST_CASE("disjoint squares give distinct components") {
  cv::Mat mask = cv::Mat::zeros(30, 30, CV_8UC1);
  mask(cv::Rect(1, 1, 6, 6)).setTo(1);
  mask(cv::Rect(15, 15, 8, 8)).setTo(1);
  mask(cv::Rect(25, 1, 2, 2)).setTo(1);  // below min_area
  const auto polys = polygonize(mask, 1.0);
  REQUIRE(polys.size() == 2);
  CHECK(polys[0].component_id != polys[1].component_id);
  const auto json = polygons_to_geojson(polys);
  CHECK(json.find("FeatureCollection") != std::string::npos);
}

TEST_CASE("rasterizing unsimplified polygons reproduces the mask") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    cv::Mat noise = test::random_binary(40, 40, seed, 0.45);
    cv::Mat blobs;
    cv::morphologyEx(noise, blobs, cv::MORPH_CLOSE, cv::getStructuringElement(cv::MORPH_RECT, {3, 3}));
    // Drop components below the area cut so the comparison is exact.
    cv::Mat cc;
    const int n = cv::connectedComponents(blobs, cc, 4, CV_32S);
    std::vector<int> area(static_cast<std::size_t>(n), 0);
    for (int r = 0; r < 40; ++r) {
      for (int c = 0; c < 40; ++c) ++area[static_cast<std::size_t>(cc.at<int>(r, c))];
    }
    cv::Mat expected = cv::Mat::zeros(40, 40, CV_8UC1);
    for (int r = 0; r < 40; ++r) {
      for (int c = 0; c < 40; ++c) {
        const int l = cc.at<int>(r, c);
        if (l > 0 && area[static_cast<std::size_t>(l)] >= kDefaultMinPolygonArea) expected.at<std::uint8_t>(r, c) = 1;
      }
    }
    const auto polys = polygonize(blobs, 0.0);
    const auto back = rasterize(polys, blobs.size());
    CHECK(test::mats_equal(back, expected));
  }
}

TEST_CASE("douglas-peucker keeps corners and drops near-collinear points") {
  const std::vector<cv::Point> ring{{0, 0}, {5, 0}, {10, 0}, {10, 10}, {5, 10}, {0, 10}};
  const auto simplified = douglas_peucker_ring(ring, 0.5);
  CHECK(simplified.size() == 4);
}

// ---------------------------------------------------------------------------
// Stitching and interchange

TEST_CASE("tile then stitch restores a 5000 px binary mask") {
  ImageSample s;
  s.image = cv::Mat(5000, 5000, CV_8UC3, cv::Scalar::all(0));
  s.mask = test::random_binary(5000, 5000, 9);
  const auto grid = TileGrid::cover(5000, 5000, 512, PadPolicy::reflect, 512);
  const auto tiles = tile_image(s, grid);
  s.image.release();
  std::vector<TileRaster> rasters;
  for (const auto& t : tiles) rasters.push_back({t.index, t.mask});
  CHECK(test::mats_equal(stitch_tiles(rasters, grid, {5000, 5000}), s.mask));
}

TEST_CASE("stitching places tiles by index") {
  ImageSample s;
  s.image = test::random_rgb(1024, 1024, 2);
  s.mask = test::random_binary(1024, 1024, 3);
  const auto grid = TileGrid::cover(1024, 1024, 512, PadPolicy::reflect, 512);
  const auto tiles = tile_image(s, grid);
  std::vector<TileRaster> rasters;
  for (const auto& t : tiles) rasters.push_back({t.index, t.mask});
  std::reverse(rasters.begin(), rasters.end());
  CHECK(test::mats_equal(stitch_tiles(rasters, grid, {1024, 1024}), s.mask));
  rasters.erase(rasters.begin() + 1);
  CHECK_THROWS_WITH(stitch_tiles(rasters, grid, {1024, 1024}), doctest::Contains("2"));
}

TEST_CASE("resized tiles stitch back to the original size") {
  ImageSample s;
  s.image = test::random_rgb(700, 900, 4);
  s.mask = cv::Mat::zeros(700, 900, CV_8UC1);
  s.mask(cv::Rect(100, 100, 400, 300)).setTo(1);
  const auto grid = TileGrid::cover(700, 900, 512, PadPolicy::reflect, 224);
  std::vector<TileRaster> rasters;
  for (const auto& t : tile_image(s, grid)) rasters.push_back({t.index, t.mask});
  const auto out = stitch_tiles(rasters, grid, {900, 700});
  CHECK(out.size() == cv::Size(900, 700));
  CHECK(cv::countNonZero(out != s.mask) < 0.01 * 700 * 900);
}

TEST_CASE("probability raster files round trip") {
  test::TempDir dir;
  const auto m = random_mask(13, 17, 4);
  const auto written = write_probability_mask(dir / "scene", m, {"model1", "scene"});
  CHECK(written.size() == 2);
  for (const auto& p : {dir / "scene", dir / "scene.json", dir / "scene.prob"}) {
    const auto back = read_probability_mask(p);
    CHECK(test::mats_equal(back.mask.probs(), m.probs()));
    CHECK(back.info.model_id == "model1");
    CHECK(back.info.scene_id == "scene");
  }
  fs::resize_file(dir / "scene.prob", 100);
  CHECK_THROWS(read_probability_mask(dir / "scene"));
}

TEST_CASE("binary png round trip") {
  test::TempDir dir;
  const auto m = test::random_binary(11, 7, 5);
  write_binary_png(dir / "m.png", m);
  CHECK(test::mats_equal(read_binary_png(dir / "m.png"), m));
}
