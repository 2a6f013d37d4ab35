#pragma once

// Glue shared by the command-line tool and the end-to-end tests: which cache
// entries a scene produces, how scenes are split, whole-scene prediction and
// the synthetic rectangles corpus.

#include <opencv2/core.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "bfx/cache.hpp"
#include "bfx/config.hpp"
#include "bfx/dataset.hpp"
#include "bfx/fusion.hpp"
#include "bfx/models.hpp"
#include "bfx/training.hpp"

namespace bfx {

/// Per-scene generator seed, independent of the order scenes are listed in.
std::uint64_t scene_seed(std::uint64_t seed, const std::string& scene_id);

/// Scene identity used in cache keys: the id plus a digest of the files, so
/// replacing a scene's pixels never hits a stale entry.
std::string scene_fingerprint(const SampleDescriptor& scene);

struct PlannedSample {
  CacheKey key;
  std::string id;  // "<scene>/p<k>" or "<scene>/t<k>"
  std::string scene_id;
  std::variant<PatchSpec, int> source;  // patch spec or tile index
};

/// Cache entries a scene yields under `data` without touching pixel data.
/// Patch-generation warnings are appended to `warnings` when given.
std::vector<PlannedSample> plan_scene(const DataConfig& data, const SampleDescriptor& scene,
                                      const std::string& fingerprint, std::vector<std::string>* warnings = nullptr);

struct PrepareCounts {
  std::size_t planned = 0;
  std::size_t written = 0;
  std::size_t existing = 0;
};

/// Writes every planned entry missing from the cache.
PrepareCounts prepare_scene(const DataConfig& data, SampleCache& cache, const SampleDescriptor& scene);

/// Labelled scenes split per data.split; test-only scenes are excluded.
SplitResult split_scenes(const DataConfig& data, const DatasetIndex& index);

/// Cache-backed source over the given scenes; throws IoError listing how many
/// entries are missing when the cache has not been prepared.
CachedDataSource make_source(const DataConfig& data, const std::vector<SampleDescriptor>& scenes);

/// Pixel counts {background, building} over the given scenes' masks.
std::array<std::uint64_t, 2> count_classes(const std::vector<SampleDescriptor>& scenes);

/// Tiles an RGB scene, runs the network on every tile and stitches the
/// probabilities back to the scene's size.
ProbabilityMask predict_scene(SegmentationNet& net, const cv::Mat& rgb, const PredictConfig& predict,
                              const Normalization& norm);

struct SynthConfig {
  int scenes = 20;
  int size = 256;
  std::uint64_t seed = 0;
  std::vector<std::string> cities{"alpha", "bravo", "charlie", "delta"};
  int min_buildings = 3;
  int max_buildings = 8;
  double noise_sigma = 12.0;
};

/// Writes `<root>/images/<id>.png` and `<root>/gt/<id>.png` (0/255) scenes of
/// random axis-aligned rectangles on a noisy background. Returns the ids.
std::vector<std::string> write_synthetic_corpus(const std::filesystem::path& root, const SynthConfig& config);

/// One synthetic (image, mask) pair, RGB CV_8UC3 and CV_8UC1 {0, 1}.
ImageSample synthetic_scene(int rows, int cols, std::uint64_t seed, const SynthConfig& config = {});

}  // namespace bfx
