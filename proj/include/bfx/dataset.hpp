#pragma once

// Aerial-imagery dataset handling: INRIA-layout ingestion, paired image/mask
// augmentation, fixed tiling, class statistics and train/validation splits.

#include <opencv2/core.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bfx {

/// Per-channel normalization applied after scaling 8-bit values into [0, 1].
/// Values live in config; the defaults are the usual ImageNet statistics.
struct Normalization {
  std::array<float, 3> mean{0.485F, 0.456F, 0.406F};
  std::array<float, 3> std{0.229F, 0.224F, 0.225F};

  static Normalization unit() { return {{0.F, 0.F, 0.F}, {1.F, 1.F, 1.F}}; }
};

/// A full scene held in memory. `image` is CV_8UC3 in RGB order, `mask` is
/// CV_8UC1 with values in {0, 1}; an empty mask marks a test-only scene.
struct ImageSample {
  cv::Mat image;
  cv::Mat mask;
  std::string city;
  std::string scene_id;
  std::filesystem::path source_path;

  bool has_mask() const { return !mask.empty(); }
};

/// Lightweight record produced by indexing; pixels are loaded on demand.
struct SampleDescriptor {
  std::string scene_id;
  std::string city;
  std::filesystem::path image_path;
  std::filesystem::path mask_path;  // empty when test_only
  int rows = 0;
  int cols = 0;
  bool test_only = false;
};

struct RejectedScene {
  std::string scene_id;
  std::string reason;
};

struct DatasetIndex {
  std::vector<SampleDescriptor> samples;
  std::vector<RejectedScene> rejected;
  std::vector<std::string> warnings;
};

/// Scans `<root>/images` and `<root>/gt`, pairing files by stem. Images
/// without a mask are flagged test-only; pairs with mismatched dimensions are
/// rejected and reported. Throws IoError when either directory is missing.
DatasetIndex load_dataset_index(const std::filesystem::path& root);

/// City label from an INRIA-style scene id: trailing digits stripped
/// ("austin12" -> "austin").
std::string city_from_scene_id(const std::string& scene_id);

/// Loads pixels for a descriptor. Masks stored as 0/255 are binarized.
ImageSample load_sample(const SampleDescriptor& descriptor);

/// Validates image/mask pairing invariants; throws InvalidArgument.
void validate_sample(const ImageSample& sample);

// ---------------------------------------------------------------------------
// Random resized crops

/// All randomness of one augmentation draw, so the image and mask can be
/// transformed identically.
struct PatchSpec {
  int row = 0;
  int col = 0;
  int crop_width = 224;
  int crop_height = 224;
  bool hflip = false;
  bool vflip = false;
  int output_size = 224;
};

inline constexpr int kMinCropWidth = 100;
inline constexpr int kMaxCropWidth = 500;

/// Throws std::out_of_range naming the violated bound.
void validate_patch_spec(const PatchSpec& spec, int image_rows, int image_cols);

/// A normalized CV_32FC3 image patch with its CV_8UC1 mask patch.
struct PatchPair {
  cv::Mat image;
  cv::Mat mask;
};

/// Crop, resize (bilinear image, nearest mask), flip, then normalize.
PatchPair sample_patch(const ImageSample& sample, const PatchSpec& spec, const Normalization& norm);

/// Geometric part of sample_patch, shared by image and mask.
cv::Mat apply_patch_geometry(const cv::Mat& source, const PatchSpec& spec, int interpolation);

/// Scales an 8-bit RGB image to [0, 1] and applies `norm` per channel.
cv::Mat normalize_image(const cv::Mat& rgb8, const Normalization& norm);
/// Inverse of normalize_image, saturating back to 8 bits.
cv::Mat denormalize_image(const cv::Mat& normalized, const Normalization& norm);

/// Draws `count` specs from a seed. Each spec consumes the generator in the
/// order width, height, origin, flips. Widths are truncated (with a warning)
/// when the image is smaller than the maximum crop.
std::vector<PatchSpec> generate_patchset(int image_rows, int image_cols, int count,
                                         std::uint64_t seed, int output_size = 224,
                                         std::vector<std::string>* warnings = nullptr);

// ---------------------------------------------------------------------------
// Fixed tiling

enum class PadPolicy { reflect, zero };

struct TileGrid {
  int tile_size = 512;
  PadPolicy pad_policy = PadPolicy::reflect;
  int rows = 0;
  int cols = 0;
  int resize_to = 224;

  static TileGrid cover(int image_rows, int image_cols, int tile_size = 512,
                        PadPolicy pad = PadPolicy::reflect, int resize_to = 224);

  int count() const { return rows * cols; }
  int padded_rows() const { return rows * tile_size; }
  int padded_cols() const { return cols * tile_size; }
  cv::Rect footprint(int index) const;
};

struct Tile {
  cv::Mat image;  // CV_8UC3, resize_to x resize_to
  cv::Mat mask;   // CV_8UC1, empty when the sample has no mask
  int index = 0;
};

/// Pads `source` at the bottom/right edge up to the grid's padded size.
cv::Mat pad_to_grid(const cv::Mat& source, const TileGrid& grid);

/// Splits a scene into row-major tiles covering the padded image.
std::vector<Tile> tile_image(const ImageSample& sample, const TileGrid& grid);

// ---------------------------------------------------------------------------
// Class statistics

/// Effective number of samples (1 - beta^n) / (1 - beta); E(0) = 0.
double effective_number(double n, double beta);

struct ClassStats {
  std::array<std::uint64_t, 2> pixel_count{};  // {background, building}
  std::array<double, 2> fraction{};
  double beta = 0.0;
  std::array<double, 2> effective_number{};
  /// Proportional to 1 / effective number and scaled to sum to 2; a class with
  /// no pixels gets weight 0.
  std::array<double, 2> weight{};
};

ClassStats class_stats_from_counts(std::array<std::uint64_t, 2> counts, double beta);
ClassStats compute_class_stats(std::span<const ImageSample> samples, double beta);

/// Shared by per-dataset and per-batch weighting.
std::array<double, 2> class_weights_from_effective(std::array<double, 2> effective);

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { random_ratio, geographic };

struct SplitSpec {
  SplitMode mode = SplitMode::random_ratio;
  double ratio = 0.8;
  std::uint64_t seed = 0;
  std::vector<std::string> train_cities;
  std::vector<std::string> val_cities;
};

struct SplitResult {
  std::vector<SampleDescriptor> train;
  std::vector<SampleDescriptor> val;
};

/// Pure function of (input order, spec). Random mode keeps round(ratio * n)
/// scenes for training; output lists preserve input order.
SplitResult split_dataset(std::span<const SampleDescriptor> descriptors, const SplitSpec& spec);

}  // namespace bfx
