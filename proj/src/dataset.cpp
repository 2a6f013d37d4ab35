#include "bfx/dataset.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "bfx/error.hpp"

namespace fs = std::filesystem;

namespace bfx {
namespace {

bool is_raster_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".tif" || ext == ".tiff" || ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::map<std::string, fs::path> rasters_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_raster_file(entry.path())) {
      out.emplace(entry.path().stem().string(), entry.path());
    }
  }
  return out;
}

cv::Mat read_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

cv::Mat read_binary_mask(const fs::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw IoError("cannot decode mask " + path.string());
  // Masks are stored either as {0,1} or {0,255}.
  double max_value = 0;
  cv::minMaxLoc(gray, nullptr, &max_value);
  cv::Mat out;
  cv::threshold(gray, out, max_value > 1 ? 127 : 0, 1, cv::THRESH_BINARY);
  return out;
}

}  // namespace

std::string city_from_scene_id(const std::string& scene_id) {
  auto end = scene_id.find_last_not_of("0123456789");
  if (end == std::string::npos) return scene_id;
  auto city = scene_id.substr(0, end + 1);
  while (!city.empty() && (city.back() == '_' || city.back() == '-')) city.pop_back();
  return city;
}

DatasetIndex load_dataset_index(const fs::path& root) {
  const auto images_dir = root / "images";
  const auto gt_dir = root / "gt";
  if (!fs::is_directory(images_dir)) throw IoError("missing directory " + images_dir.string());
  if (!fs::is_directory(gt_dir)) throw IoError("missing directory " + gt_dir.string());

  DatasetIndex index;
  const auto images = rasters_by_stem(images_dir);
  const auto masks = rasters_by_stem(gt_dir);

  for (const auto& [stem, image_path] : images) {
    SampleDescriptor d;
    d.scene_id = stem;
    d.city = city_from_scene_id(stem);
    d.image_path = image_path;
    cv::Mat image = cv::imread(image_path.string(), cv::IMREAD_UNCHANGED);
    if (image.empty()) {
      index.rejected.push_back({stem, "unreadable image " + image_path.string()});
      continue;
    }
    d.rows = image.rows;
    d.cols = image.cols;

    auto it = masks.find(stem);
    if (it == masks.end()) {
      d.test_only = true;
      index.samples.push_back(std::move(d));
      continue;
    }
    cv::Mat mask = cv::imread(it->second.string(), cv::IMREAD_UNCHANGED);
    if (mask.empty()) {
      index.rejected.push_back({stem, "unreadable mask " + it->second.string()});
      continue;
    }
    if (mask.rows != image.rows || mask.cols != image.cols) {
      index.rejected.push_back(
          {stem, "image is " + std::to_string(image.rows) + "x" + std::to_string(image.cols) +
                     " but mask is " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols)});
      continue;
    }
    d.mask_path = it->second;
    index.samples.push_back(std::move(d));
  }

  if (images.empty()) index.warnings.push_back("no images found under " + images_dir.string());
  for (const auto& w : index.warnings) spdlog::warn("{}", w);
  for (const auto& r : index.rejected) spdlog::warn("rejected {}: {}", r.scene_id, r.reason);
  return index;
}

ImageSample load_sample(const SampleDescriptor& descriptor) {
  ImageSample s;
  s.scene_id = descriptor.scene_id;
  s.city = descriptor.city;
  s.source_path = descriptor.image_path;
  s.image = read_rgb(descriptor.image_path);
  if (!descriptor.test_only && !descriptor.mask_path.empty()) {
    s.mask = read_binary_mask(descriptor.mask_path);
  }
  validate_sample(s);
  return s;
}

void validate_sample(const ImageSample& sample) {
  if (sample.image.empty() || sample.image.type() != CV_8UC3) {
    throw InvalidArgument("sample " + sample.scene_id + ": image must be a non-empty 8-bit 3-channel raster");
  }
  if (!sample.has_mask()) return;
  if (sample.mask.type() != CV_8UC1) {
    throw InvalidArgument("sample " + sample.scene_id + ": mask must be 8-bit single channel");
  }
  if (sample.mask.size() != sample.image.size()) {
    throw InvalidArgument("sample " + sample.scene_id + ": image and mask dimensions differ");
  }
  double max_value = 0;
  cv::minMaxLoc(sample.mask, nullptr, &max_value);
  if (max_value > 1) throw InvalidArgument("sample " + sample.scene_id + ": mask values must be 0 or 1");
}

// ---------------------------------------------------------------------------

void validate_patch_spec(const PatchSpec& spec, int image_rows, int image_cols) {
  auto fail = [](const std::string& what) { throw std::out_of_range("patch spec: " + what); };
  if (spec.crop_width < 1) fail("crop_width must be >= 1");
  if (spec.crop_height < 1) fail("crop_height must be >= 1");
  if (spec.output_size < 1) fail("output_size must be >= 1");
  // Scenes smaller than the widest crop shrink the lower bound with them.
  const int min_width = std::min({kMinCropWidth, image_cols, (image_rows * 10) / 9});
  if (spec.crop_width < min_width || spec.crop_width > kMaxCropWidth) {
    fail("crop_width " + std::to_string(spec.crop_width) + " outside [" + std::to_string(min_width) + ", " +
         std::to_string(kMaxCropWidth) + "]");
  }
  if (spec.row < 0) fail("origin row " + std::to_string(spec.row) + " < 0");
  if (spec.col < 0) fail("origin col " + std::to_string(spec.col) + " < 0");
  if (spec.row + spec.crop_height > image_rows) {
    fail("row + crop_height = " + std::to_string(spec.row + spec.crop_height) + " exceeds image rows " +
         std::to_string(image_rows));
  }
  if (spec.col + spec.crop_width > image_cols) {
    fail("col + crop_width = " + std::to_string(spec.col + spec.crop_width) + " exceeds image cols " +
         std::to_string(image_cols));
  }
  // 0.9 w <= h <= 1.1 w, in integers.
  if (10 * spec.crop_height < 9 * spec.crop_width) fail("crop_height below 0.9 * crop_width");
  if (10 * spec.crop_height > 11 * spec.crop_width) fail("crop_height above 1.1 * crop_width");
}

cv::Mat apply_patch_geometry(const cv::Mat& source, const PatchSpec& spec, int interpolation) {
  cv::Mat crop = source(cv::Rect(spec.col, spec.row, spec.crop_width, spec.crop_height));
  cv::Mat out;
  if (spec.crop_width == spec.output_size && spec.crop_height == spec.output_size) {
    out = crop.clone();
  } else {
    cv::resize(crop, out, cv::Size(spec.output_size, spec.output_size), 0, 0, interpolation);
  }
  if (spec.hflip && spec.vflip) {
    cv::flip(out, out, -1);
  } else if (spec.hflip) {
    cv::flip(out, out, 1);
  } else if (spec.vflip) {
    cv::flip(out, out, 0);
  }
  return out;
}

cv::Mat normalize_image(const cv::Mat& rgb8, const Normalization& norm) {
  CV_Assert(rgb8.type() == CV_8UC3);
  cv::Mat out(rgb8.size(), CV_32FC3);
  for (int r = 0; r < rgb8.rows; ++r) {
    const auto* src = rgb8.ptr<cv::Vec3b>(r);
    auto* dst = out.ptr<cv::Vec3f>(r);
    for (int c = 0; c < rgb8.cols; ++c) {
      for (int k = 0; k < 3; ++k) {
        dst[c][k] = (static_cast<float>(src[c][k]) / 255.0F - norm.mean[k]) / norm.std[k];
      }
    }
  }
  return out;
}

cv::Mat denormalize_image(const cv::Mat& normalized, const Normalization& norm) {
  CV_Assert(normalized.type() == CV_32FC3);
  cv::Mat out(normalized.size(), CV_8UC3);
  for (int r = 0; r < normalized.rows; ++r) {
    const auto* src = normalized.ptr<cv::Vec3f>(r);
    auto* dst = out.ptr<cv::Vec3b>(r);
    for (int c = 0; c < normalized.cols; ++c) {
      for (int k = 0; k < 3; ++k) {
        dst[c][k] = cv::saturate_cast<std::uint8_t>((src[c][k] * norm.std[k] + norm.mean[k]) * 255.0F);
      }
    }
  }
  return out;
}

PatchPair sample_patch(const ImageSample& sample, const PatchSpec& spec, const Normalization& norm) {
  validate_patch_spec(spec, sample.image.rows, sample.image.cols);
  PatchPair out;
  out.image = normalize_image(apply_patch_geometry(sample.image, spec, cv::INTER_LINEAR), norm);
  if (sample.has_mask()) {
    // Center-aligned nearest neighbour keeps the mask on the same sampling
    // grid as the bilinear image resize.
    out.mask = apply_patch_geometry(sample.mask, spec, cv::INTER_NEAREST_EXACT);
  }
  return out;
}

std::vector<PatchSpec> generate_patchset(int image_rows, int image_cols, int count, std::uint64_t seed,
                                         int output_size, std::vector<std::string>* warnings) {
  if (count < 0) throw InvalidArgument("generate_patchset: count must be >= 0");
  if (image_rows < 1 || image_cols < 1) throw InvalidArgument("generate_patchset: empty image");

  // The height band needs h >= ceil(0.9 w) rows available.
  int max_width = std::min({kMaxCropWidth, image_cols, (image_rows * 10) / 9});
  if (max_width < kMaxCropWidth) {
    std::string msg = "image " + std::to_string(image_rows) + "x" + std::to_string(image_cols) +
                      " smaller than maximum crop; widths truncated to " + std::to_string(max_width);
    if (warnings != nullptr) {
      warnings->push_back(std::move(msg));
    } else {
      spdlog::warn("{}", msg);
    }
  }
  const int min_width = std::min(kMinCropWidth, max_width);

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<PatchSpec> specs;
  specs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    PatchSpec s;
    s.output_size = output_size;
    s.crop_width = std::uniform_int_distribution<int>(min_width, max_width)(rng);
    const int h_lo = (9 * s.crop_width + 9) / 10;
    const int h_hi = std::min((11 * s.crop_width) / 10, image_rows);
    s.crop_height = std::uniform_int_distribution<int>(h_lo, h_hi)(rng);
    s.row = std::uniform_int_distribution<int>(0, image_rows - s.crop_height)(rng);
    s.col = std::uniform_int_distribution<int>(0, image_cols - s.crop_width)(rng);
    s.hflip = coin(rng);
    s.vflip = coin(rng);
    specs.push_back(s);
  }
  return specs;
}

// ---------------------------------------------------------------------------

TileGrid TileGrid::cover(int image_rows, int image_cols, int tile_size, PadPolicy pad, int resize_to) {
  if (tile_size < 1) throw InvalidArgument("tile_size must be >= 1");
  if (resize_to < 1) throw InvalidArgument("resize_to must be >= 1");
  TileGrid g;
  g.tile_size = tile_size;
  g.pad_policy = pad;
  g.rows = (image_rows + tile_size - 1) / tile_size;
  g.cols = (image_cols + tile_size - 1) / tile_size;
  g.resize_to = resize_to;
  return g;
}

cv::Rect TileGrid::footprint(int index) const {
  if (index < 0 || index >= count()) throw std::out_of_range("tile index " + std::to_string(index));
  return {(index % cols) * tile_size, (index / cols) * tile_size, tile_size, tile_size};
}

cv::Mat pad_to_grid(const cv::Mat& source, const TileGrid& grid) {
  const int bottom = grid.padded_rows() - source.rows;
  const int right = grid.padded_cols() - source.cols;
  if (bottom < 0 || right < 0) throw InvalidArgument("tile grid does not cover the image");
  if (bottom == 0 && right == 0) return source;
  cv::Mat out;
  // Reflection needs at least two pixels along an axis to be defined.
  const bool can_reflect = source.rows > 1 && source.cols > 1;
  if (grid.pad_policy == PadPolicy::reflect && can_reflect) {
    cv::copyMakeBorder(source, out, 0, bottom, 0, right, cv::BORDER_REFLECT_101);
  } else {
    cv::copyMakeBorder(source, out, 0, bottom, 0, right, cv::BORDER_CONSTANT, cv::Scalar::all(0));
  }
  return out;
}

std::vector<Tile> tile_image(const ImageSample& sample, const TileGrid& grid) {
  if (grid.tile_size < 1) throw InvalidArgument("tile_size must be >= 1");
  if (grid.padded_rows() < sample.image.rows || grid.padded_cols() < sample.image.cols) {
    throw InvalidArgument("tile grid does not cover the image");
  }
  const cv::Mat image = pad_to_grid(sample.image, grid);
  const cv::Mat mask = sample.has_mask() ? pad_to_grid(sample.mask, grid) : cv::Mat{};
  const bool resize = grid.resize_to != grid.tile_size;
  const cv::Size out_size(grid.resize_to, grid.resize_to);

  std::vector<Tile> tiles;
  tiles.reserve(static_cast<std::size_t>(grid.count()));
  for (int i = 0; i < grid.count(); ++i) {
    const auto rect = grid.footprint(i);
    Tile t;
    t.index = i;
    if (resize) {
      cv::resize(image(rect), t.image, out_size, 0, 0, cv::INTER_LINEAR);
      if (!mask.empty()) cv::resize(mask(rect), t.mask, out_size, 0, 0, cv::INTER_NEAREST_EXACT);
    } else {
      t.image = image(rect).clone();
      if (!mask.empty()) t.mask = mask(rect).clone();
    }
    tiles.push_back(std::move(t));
  }
  return tiles;
}

// ---------------------------------------------------------------------------

double effective_number(double n, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw InvalidArgument("beta must lie in [0, 1)");
  if (n < 0) throw InvalidArgument("effective_number: negative count");
  if (n == 0) return 0.0;
  if (beta == 0.0) return 1.0;
  // 1 - beta^n evaluated without cancellation for beta close to 1.
  const double one_minus_pow = -std::expm1(n * std::log(beta));
  const double e = one_minus_pow / (1.0 - beta);
  return std::min({e, n, 1.0 / (1.0 - beta)});
}

std::array<double, 2> class_weights_from_effective(std::array<double, 2> effective) {
  std::array<double, 2> inv{};
  double total = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    inv[c] = effective[c] > 0 ? 1.0 / effective[c] : 0.0;
    total += inv[c];
  }
  if (total <= 0) throw InvalidArgument("class weights: no class has any pixels");
  for (auto& w : inv) w = w / total * 2.0;
  return inv;
}

ClassStats class_stats_from_counts(std::array<std::uint64_t, 2> counts, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw InvalidArgument("beta must lie in [0, 1)");
  const auto total = counts[0] + counts[1];
  if (total == 0) throw InvalidArgument("class statistics need at least one pixel");
  ClassStats s;
  s.pixel_count = counts;
  s.beta = beta;
  for (std::size_t c = 0; c < 2; ++c) {
    s.fraction[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
    s.effective_number[c] = effective_number(static_cast<double>(counts[c]), beta);
  }
  s.weight = class_weights_from_effective(s.effective_number);
  return s;
}

ClassStats compute_class_stats(std::span<const ImageSample> samples, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw InvalidArgument("beta must lie in [0, 1)");
  std::array<std::uint64_t, 2> counts{};
  bool any = false;
  for (const auto& s : samples) {
    if (!s.has_mask()) continue;
    any = true;
    const auto building = static_cast<std::uint64_t>(cv::countNonZero(s.mask));
    counts[1] += building;
    counts[0] += static_cast<std::uint64_t>(s.mask.total()) - building;
  }
  if (!any) throw InvalidArgument("compute_class_stats: no sample carries a mask");
  return class_stats_from_counts(counts, beta);
}

// ---------------------------------------------------------------------------

SplitResult split_dataset(std::span<const SampleDescriptor> descriptors, const SplitSpec& spec) {
  SplitResult out;
  if (spec.mode == SplitMode::geographic) {
    const std::set<std::string> train(spec.train_cities.begin(), spec.train_cities.end());
    const std::set<std::string> val(spec.val_cities.begin(), spec.val_cities.end());
    for (const auto& c : train) {
      if (val.count(c) != 0) throw InvalidArgument("city " + c + " listed in both train and val");
    }
    for (const auto& d : descriptors) {
      if (d.city.empty()) throw InvalidArgument("scene " + d.scene_id + " has no city label");
      if (train.count(d.city) != 0) {
        out.train.push_back(d);
      } else if (val.count(d.city) != 0) {
        out.val.push_back(d);
      } else {
        throw InvalidArgument("city " + d.city + " (scene " + d.scene_id + ") is in neither split list");
      }
    }
    return out;
  }

  if (!(spec.ratio >= 0.0 && spec.ratio <= 1.0)) throw InvalidArgument("split ratio must lie in [0, 1]");
  const std::size_t n = descriptors.size();
  const auto n_train = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(n)));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<bool> in_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = true;
  for (std::size_t i = 0; i < n; ++i) {
    (in_train[i] ? out.train : out.val).push_back(descriptors[i]);
  }
  return out;
}

}  // namespace bfx
