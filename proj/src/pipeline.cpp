#include "bfx/pipeline.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstring>
#include <random>

#include "bfx/error.hpp"
#include "bfx/hashing.hpp"
#include "bfx/log.hpp"

namespace fs = std::filesystem;

namespace bfx {

std::uint64_t scene_seed(std::uint64_t seed, const std::string& scene_id) {
  const auto d = sha256("scene-seed:" + std::to_string(seed) + ":" + scene_id);
  std::uint64_t out = 0;
  std::memcpy(&out, d.data(), sizeof out);
  return out;
}

std::string scene_fingerprint(const SampleDescriptor& scene) {
  std::string material = to_hex(sha256_file(scene.image_path));
  if (!scene.mask_path.empty()) material += to_hex(sha256_file(scene.mask_path));
  return scene.scene_id + "@" + to_hex(sha256(material)).substr(0, 16);
}

std::vector<PlannedSample> plan_scene(const DataConfig& data, const SampleDescriptor& scene,
                                      const std::string& fingerprint, std::vector<std::string>* warnings) {
  std::vector<PlannedSample> out;
  if (data.sampling == SamplingMode::patches) {
    std::vector<std::string> local;
    const auto specs = generate_patchset(scene.rows, scene.cols, data.patch_count, scene_seed(data.seed, scene.scene_id),
                                         data.patch_size, &local);
    if (warnings != nullptr) {
      for (auto& w : local) warnings->push_back(scene.scene_id + ": " + w);
    }
    for (std::size_t k = 0; k < specs.size(); ++k) {
      out.push_back({CacheKey::for_patch(fingerprint, specs[k], data.normalization),
                     scene.scene_id + "/p" + std::to_string(k), scene.scene_id, specs[k]});
    }
  } else {
    const auto grid = TileGrid::cover(scene.rows, scene.cols, data.tile_size, data.pad_policy, data.resize_to);
    for (int i = 0; i < grid.count(); ++i) {
      out.push_back({CacheKey::for_tile(fingerprint, grid, i, data.normalization),
                     scene.scene_id + "/t" + std::to_string(i), scene.scene_id, i});
    }
  }
  return out;
}

PrepareCounts prepare_scene(const DataConfig& data, SampleCache& cache, const SampleDescriptor& scene) {
  PrepareCounts counts;
  std::vector<std::string> warnings;
  const auto planned = plan_scene(data, scene, scene_fingerprint(scene), &warnings);
  for (const auto& w : warnings) log_warn(w);
  counts.planned = planned.size();
  std::vector<const PlannedSample*> missing;
  for (const auto& p : planned) {
    if (cache.contains(p.key)) {
      ++counts.existing;
    } else {
      missing.push_back(&p);
    }
  }
  if (missing.empty()) return counts;

  const auto sample = load_sample(scene);
  std::vector<Tile> tiles;
  if (data.sampling == SamplingMode::tiles) {
    tiles = tile_image(sample, TileGrid::cover(scene.rows, scene.cols, data.tile_size, data.pad_policy, data.resize_to));
  }
  for (const auto* p : missing) {
    PatchPair pair;
    if (const auto* spec = std::get_if<PatchSpec>(&p->source)) {
      pair = sample_patch(sample, *spec, data.normalization);
    } else {
      const auto& tile = tiles.at(static_cast<std::size_t>(std::get<int>(p->source)));
      pair.image = normalize_image(tile.image, data.normalization);
      pair.mask = tile.mask;
    }
    cache.put_pair(p->key, pair);
    ++counts.written;
  }
  return counts;
}

SplitResult split_scenes(const DataConfig& data, const DatasetIndex& index) {
  std::vector<SampleDescriptor> labelled;
  for (const auto& s : index.samples) {
    if (!s.test_only) labelled.push_back(s);
  }
  return split_dataset(labelled, data.split);
}

CachedDataSource make_source(const DataConfig& data, const std::vector<SampleDescriptor>& scenes) {
  std::vector<std::pair<CacheKey, std::string>> entries;
  SampleCache cache(data.cache_dir);
  std::size_t missing = 0;
  for (const auto& scene : scenes) {
    for (auto& p : plan_scene(data, scene, scene_fingerprint(scene))) {
      if (!cache.contains(p.key)) ++missing;
      entries.emplace_back(p.key, std::move(p.id));
    }
  }
  if (missing > 0) {
    throw IoError(std::to_string(missing) + " of " + std::to_string(entries.size()) + " samples are not in cache " +
                  data.cache_dir.string() + "; run `bfx prepare` with the same config first");
  }
  return CachedDataSource(data.cache_dir, std::move(entries));
}

std::array<std::uint64_t, 2> count_classes(const std::vector<SampleDescriptor>& scenes) {
  std::array<std::uint64_t, 2> counts{0, 0};
  for (const auto& scene : scenes) {
    const auto sample = load_sample(scene);
    if (!sample.has_mask()) continue;
    const auto building = static_cast<std::uint64_t>(cv::countNonZero(sample.mask));
    counts[1] += building;
    counts[0] += sample.mask.total() - building;
  }
  return counts;
}

ProbabilityMask predict_scene(SegmentationNet& net, const cv::Mat& rgb, const PredictConfig& predict,
                              const Normalization& norm) {
  if (rgb.empty() || rgb.type() != CV_8UC3) throw InvalidArgument("predict_scene expects an RGB CV_8UC3 image");
  const auto grid = TileGrid::cover(rgb.rows, rgb.cols, predict.tile_size, PadPolicy::reflect, predict.resize_to);
  ImageSample sample;
  sample.image = rgb;
  const auto tiles = tile_image(sample, grid);

  const bool was_training = net.is_training();
  net.eval();
  torch::NoGradGuard no_grad;
  std::vector<TileRaster> rasters;
  const auto bs = static_cast<std::size_t>(std::max(1, predict.batch_size));
  for (std::size_t start = 0; start < tiles.size(); start += bs) {
    const auto count = std::min(bs, tiles.size() - start);
    std::vector<torch::Tensor> inputs;
    for (std::size_t i = 0; i < count; ++i) {
      inputs.push_back(image_to_tensor(normalize_image(tiles[start + i].image, norm)));
    }
    const auto probs = forward(net, torch::stack(inputs)).to(torch::kFloat32);
    for (std::size_t i = 0; i < count; ++i) {
      const auto hwc = probs[static_cast<int64_t>(i)].permute({1, 2, 0}).contiguous();
      cv::Mat m(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_32FC2);
      std::memcpy(m.data, hwc.data_ptr(), static_cast<std::size_t>(hwc.numel()) * sizeof(float));
      rasters.push_back({tiles[start + i].index, m});
    }
  }
  net.train(was_training);
  cv::Mat stitched = stitch_tiles(rasters, grid, rgb.size());
  // Bilinear resampling keeps each pixel's channels summing to one up to
  // rounding; renormalize so the invariant holds to float precision.
  std::vector<cv::Mat> ch;
  cv::split(stitched, ch);
  cv::Mat sum = ch[0] + ch[1];
  cv::divide(ch[1], sum, ch[1]);
  ch[1] = cv::min(cv::max(ch[1], 0.0), 1.0);
  return ProbabilityMask::from_building(ch[1]);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

ImageSample synthetic_scene(int rows, int cols, std::uint64_t seed, const SynthConfig& config) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  ImageSample s;
  // Low-frequency vegetation/asphalt background.
  cv::Mat coarse(4, 4, CV_32FC3);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      coarse.at<cv::Vec3f>(r, c) = {static_cast<float>(uniform(60, 100)), static_cast<float>(uniform(85, 125)),
                                    static_cast<float>(uniform(50, 80))};
    }
  }
  cv::Mat background;
  cv::resize(coarse, background, cv::Size(cols, rows), 0, 0, cv::INTER_CUBIC);
  s.mask = cv::Mat::zeros(rows, cols, CV_8UC1);

  static const std::array<cv::Vec3f, 4> roofs = {cv::Vec3f{205, 200, 195}, cv::Vec3f{185, 85, 60},
                                                 cv::Vec3f{225, 215, 160}, cv::Vec3f{160, 165, 190}};
  const int n = uniform_int(config.min_buildings, config.max_buildings);
  const int min_side = std::max(6, std::min(rows, cols) / 16);
  const int max_side = std::max(min_side + 1, std::min(rows, cols) / 5);
  for (int i = 0; i < n; ++i) {
    const int h = uniform_int(min_side, max_side);
    const int w = uniform_int(min_side, max_side);
    const int r0 = uniform_int(0, std::max(0, rows - h));
    const int c0 = uniform_int(0, std::max(0, cols - w));
    const cv::Rect rect(c0, r0, std::min(w, cols - c0), std::min(h, rows - r0));
    auto roof = roofs[static_cast<std::size_t>(uniform_int(0, static_cast<int>(roofs.size()) - 1))];
    const float shade = static_cast<float>(uniform(0.9, 1.1));
    background(rect).setTo(cv::Scalar(roof[0] * shade, roof[1] * shade, roof[2] * shade));
    s.mask(rect).setTo(1);
  }
  cv::Mat noise(rows, cols, CV_32FC3);
  cv::RNG noise_rng(seed | 1);
  noise_rng.fill(noise, cv::RNG::NORMAL, cv::Scalar::all(0), cv::Scalar::all(config.noise_sigma));
  background += noise;
  background.convertTo(s.image, CV_8UC3);
  return s;
}

std::vector<std::string> write_synthetic_corpus(const fs::path& root, const SynthConfig& config) {
  if (config.scenes < 1) throw InvalidArgument("synthetic corpus needs at least one scene");
  if (config.size < 16) throw InvalidArgument("synthetic scenes must be at least 16 px");
  if (config.cities.empty()) throw InvalidArgument("synthetic corpus needs at least one city");
  fs::create_directories(root / "images");
  fs::create_directories(root / "gt");
  std::vector<std::string> ids;
  for (int i = 0; i < config.scenes; ++i) {
    const auto& city = config.cities[static_cast<std::size_t>(i) % config.cities.size()];
    const auto id = city + std::to_string(i / static_cast<int>(config.cities.size()) + 1);
    const auto scene = synthetic_scene(config.size, config.size, scene_seed(config.seed, id), config);
    cv::Mat bgr;
    cv::cvtColor(scene.image, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite((root / "images" / (id + ".png")).string(), bgr) ||
        !cv::imwrite((root / "gt" / (id + ".png")).string(), scene.mask * 255)) {
      throw IoError("cannot write synthetic scene " + id + " under " + root.string());
    }
    ids.push_back(id);
  }
  return ids;
}

}  // namespace bfx
