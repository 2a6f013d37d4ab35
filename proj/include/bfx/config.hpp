#pragma once

// Run configuration: one JSON document fully determines a command. Parsing
// collects every problem before failing.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bfx/dataset.hpp"
#include "bfx/losses.hpp"
#include "bfx/models.hpp"
#include "bfx/training.hpp"

namespace bfx {

enum class SamplingMode { patches, tiles };

std::string to_string(SamplingMode mode);

struct DataConfig {
  std::filesystem::path root;
  std::filesystem::path cache_dir;
  SamplingMode sampling = SamplingMode::patches;
  /// Random patches per scene and their output size.
  int patch_count = 350;
  std::uint64_t seed = 0;
  int patch_size = 224;
  /// Fixed tiles and the size they are resized to.
  int tile_size = 512;
  int resize_to = 224;
  PadPolicy pad_policy = PadPolicy::reflect;
  Normalization normalization;
  SplitSpec split;
  double class_beta = 1.0 - 1e-9;
};

struct PredictConfig {
  int tile_size = 512;
  int resize_to = 224;
  int batch_size = 4;
};

struct RunConfig {
  std::string name = "run";
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  bool lr_find = false;
  LrFindConfig lr_find_config;
  PredictConfig predict;
  std::filesystem::path output_dir = "runs";
};

/// Relative paths inside the document resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Appends problems instead of throwing when `problems` is given.
ModelConfig model_config_from_json(const nlohmann::json& j, std::vector<std::string>* problems = nullptr);

}  // namespace bfx
