#pragma once

// Ensemble fusion of per-model probability masks and classical
// post-processing (Otsu / watershed / SLIC fusion, polygon extraction).

#include <opencv2/core.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bfx/dataset.hpp"

namespace bfx {

/// Per-pixel two-class distribution, stored as CV_32FC2 with channel 0 =
/// background and channel 1 = building.
class ProbabilityMask {
 public:
  ProbabilityMask() = default;
  /// Takes ownership of a CV_32FC2 raster; throws InvalidArgument when any
  /// pixel falls outside [0, 1] or its channels do not sum to 1 within `tol`.
  explicit ProbabilityMask(cv::Mat probs, double tol = 1e-5);

  /// Builds (1 - p, p) from a CV_32FC1 building-probability raster.
  static ProbabilityMask from_building(const cv::Mat& building);

  int rows() const { return probs_.rows; }
  int cols() const { return probs_.cols; }
  cv::Size size() const { return probs_.size(); }
  bool empty() const { return probs_.empty(); }

  const cv::Mat& probs() const { return probs_; }
  cv::Vec2f at(int r, int c) const { return probs_.at<cv::Vec2f>(r, c); }
  /// CV_32FC1 building channel.
  cv::Mat building() const;

 private:
  cv::Mat probs_;
};

struct EnsembleConfig {
  double threshold = 0.75;
  std::vector<std::string> member_ids;
  /// Permits a single member (merge becomes the identity).
  bool allow_single = false;
};

/// For each pixel copies the full distribution of the member whose max-class
/// probability is largest; ties go to the lowest member index.
ProbabilityMask ensemble_merge(std::span<const ProbabilityMask> masks);

/// Building iff building probability >= threshold; threshold in (0.5, 1].
/// Returns CV_8UC1 with values {0, 1}.
cv::Mat confidence_threshold(const ProbabilityMask& merged, double threshold);

// ---------------------------------------------------------------------------
// Classical segmentation

enum class SegmentMethod { otsu, watershed, slic };

SegmentMethod segment_method_from_string(const std::string& name);

struct SegmentParams {
  // SLIC
  int n_segments = 100;
  double compactness = 10.0;
  int max_iterations = 10;
  // Watershed: optional binary mask (e.g. the network's) used to place
  // markers through its distance transform.
  cv::Mat marker_mask;
  double marker_fraction = 0.5;
};

/// Grayscale conversion shared by all methods (RGB input, BT.601 weights).
cv::Mat to_gray(const cv::Mat& image);

/// Threshold in [0, 255] maximizing between-class variance; pixels strictly
/// above it form the foreground.
int otsu_threshold(const cv::Mat& gray);

/// Superpixels by local k-means in (CIELAB, x, y). Returns CV_32SC1 labels
/// 0..k-1 with connectivity enforced.
cv::Mat slic_superpixels(const cv::Mat& image, int n_segments, double compactness, int max_iterations);

/// Marker-based watershed on the image gradient. Returns CV_32SC1 labels >= 0;
/// boundary pixels take the label of a neighbouring basin.
cv::Mat watershed_segments(const cv::Mat& image, const cv::Mat& marker_mask, double marker_fraction);

/// Dispatches to the methods above. Otsu yields labels {0, 1}.
cv::Mat classical_segment(const cv::Mat& image, SegmentMethod method, const SegmentParams& params = {});

/// Union of the label segments whose fraction of pixels inside `mask` is at
/// least `overlap_tau`. Returns CV_8UC1 {0, 1}.
cv::Mat superpixel_fuse(const cv::Mat& mask, const cv::Mat& labels, double overlap_tau = 0.5);

// ---------------------------------------------------------------------------
// Polygons

/// Vertices lie on pixel corners: pixel (r, c) spans [c, c+1] x [r, r+1].
struct Polygon {
  std::vector<cv::Point> outer;               // counter-clockwise in image axes
  std::vector<std::vector<cv::Point>> holes;  // clockwise
  double area = 0;                            // enclosed pixel area
  int component_id = 0;
};

using PolygonSet = std::vector<Polygon>;

inline constexpr int kDefaultMinPolygonArea = 20;

/// Traces 4-connected components along pixel edges and simplifies each ring
/// with Douglas-Peucker at `simplify_tol` pixels. Components with fewer than
/// `min_area` pixels are dropped.
PolygonSet polygonize(const cv::Mat& mask, double simplify_tol, int min_area = kDefaultMinPolygonArea);

/// Pixel (r, c) is set iff its centre lies inside a polygon (even-odd over
/// outer ring and holes).
cv::Mat rasterize(const PolygonSet& polygons, cv::Size size);

/// Shoelace area, positive for counter-clockwise rings in image axes.
double signed_ring_area(const std::vector<cv::Point>& ring);

std::vector<cv::Point> douglas_peucker_ring(const std::vector<cv::Point>& ring, double tolerance);

/// GeoJSON-style FeatureCollection in pixel coordinates.
std::string polygons_to_geojson(const PolygonSet& polygons);

// ---------------------------------------------------------------------------
// Tiles back to scenes

struct TileRaster {
  int index = 0;
  cv::Mat raster;
};

/// Places tiles row-major by index, resizing each to the grid's tile size if
/// needed (nearest for 8-bit rasters, bilinear otherwise), then crops the
/// padding. Throws InvalidArgument naming the first missing index.
cv::Mat stitch_tiles(std::span<const TileRaster> tiles, const TileGrid& grid, cv::Size original_size);

// ---------------------------------------------------------------------------
// Interchange

/// Metadata kept in the JSON sidecar next to a probability raster.
struct ProbabilityMaskInfo {
  std::string model_id;
  std::string scene_id;
};

/// Writes `<stem>.prob` (raw little-endian float32, 2 interleaved channels,
/// row-major) and `<stem>.json`. Returns the paths written.
std::vector<std::filesystem::path> write_probability_mask(const std::filesystem::path& stem,
                                                          const ProbabilityMask& mask,
                                                          const ProbabilityMaskInfo& info);

struct LoadedProbabilityMask {
  ProbabilityMask mask;
  ProbabilityMaskInfo info;
};

/// Accepts the sidecar path, the raster path, or the common stem.
LoadedProbabilityMask read_probability_mask(const std::filesystem::path& path);

/// Writes a {0,1} mask as an 8-bit PNG with 0/255 values.
void write_binary_png(const std::filesystem::path& path, const cv::Mat& mask);
cv::Mat read_binary_png(const std::filesystem::path& path);

}  // namespace bfx
