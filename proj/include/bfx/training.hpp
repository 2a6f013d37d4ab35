#pragma once

// Optimization loop: Adam with an optional one-cycle schedule, per-epoch
// validation, checkpoint-on-improvement, resumption, an LR-finder sweep and
// evaluation with sample triples.

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bfx/cache.hpp"
#include "bfx/dataset.hpp"
#include "bfx/losses.hpp"
#include "bfx/metrics.hpp"
#include "bfx/models.hpp"

namespace bfx {

// ---------------------------------------------------------------------------
// Schedule

struct OneCycleConfig {
  double max_lr = 1e-3;
  double pct_start = 0.25;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double momentum_high = 0.95;
  double momentum_low = 0.85;
};

struct ScheduleValue {
  double lr = 0;
  double momentum = 0;
};

/// Index of the step at which lr peaks: floor(pct_start * total), at least 1.
int64_t one_cycle_peak(int64_t total_steps, const OneCycleConfig& config);

/// Cosine warm-up from max_lr / div_factor to max_lr over [0, peak], then
/// cosine annealing to max_lr / final_div_factor at total_steps - 1. Momentum
/// moves the opposite way between momentum_high and momentum_low.
ScheduleValue one_cycle(int64_t step, int64_t total_steps, const OneCycleConfig& config);

// ---------------------------------------------------------------------------
// Configuration

enum class ScheduleKind { constant, one_cycle };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 20;
  double lr = 1e-3;
  std::array<double, 2> betas{0.9, 0.999};
  double weight_decay = 0.0;
  ScheduleKind schedule = ScheduleKind::constant;
  OneCycleConfig one_cycle;
  std::uint64_t seed = 0;
  LossConfig loss;
  /// accuracy | iou | f1 | dice (higher is better) or loss (lower is better).
  std::string monitor = "accuracy";
  bool freeze_encoder = false;
  /// When false every wall_time column is written as 0 so logs compare byte for byte.
  bool record_wall_time = true;
  int eval_batch_size = 8;
  int max_samples = 4;

  /// Throws ConfigError listing every violated invariant.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Event log

struct MetricEvent {
  int64_t step = 0;
  std::string split;
  std::string name;
  double value = 0;
  double wall_time = 0;

  bool operator==(const MetricEvent&) const = default;
};

/// Append-only CSV `step,split,name,value,wall_time`.
class EventLog {
 public:
  /// Creates (truncating) the file, writes the header and replays `prior`
  /// (used when resuming).
  EventLog(std::filesystem::path path, bool record_wall_time, std::vector<MetricEvent> prior = {});

  void add(int64_t step, const std::string& split, const std::string& name, double value);
  void flush();

  const std::vector<MetricEvent>& events() const { return events_; }
  const std::filesystem::path& path() const { return path_; }

  static std::vector<MetricEvent> read(const std::filesystem::path& path);

 private:
  void write_row(const MetricEvent& e);

  std::filesystem::path path_;
  bool record_wall_time_;
  std::ofstream out_;
  std::vector<MetricEvent> events_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Data

struct Example {
  torch::Tensor image;   // 3 x H x W float32, normalized
  torch::Tensor target;  // H x W uint8 {0, 1}
  std::string id;
};

struct Batch {
  torch::Tensor images;   // N x 3 x H x W
  torch::Tensor targets;  // N x H x W uint8
  std::vector<std::string> ids;
};

class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual std::size_t size() const = 0;
  virtual Example get(std::size_t index) const = 0;
};

/// CV_32FC3 HWC -> 3 x H x W float tensor (copy).
torch::Tensor image_to_tensor(const cv::Mat& image);
/// CV_8UC1 -> H x W uint8 tensor (copy).
torch::Tensor mask_to_tensor(const cv::Mat& mask);

class InMemoryDataSource : public DataSource {
 public:
  void add(Example example);
  void add(const PatchPair& pair, std::string id);
  std::size_t size() const override { return examples_.size(); }
  Example get(std::size_t index) const override;

 private:
  std::vector<Example> examples_;
};

/// Reads samples lazily from a SampleCache; a missing or corrupted entry
/// raises IoError naming the sample.
class CachedDataSource : public DataSource {
 public:
  CachedDataSource(std::filesystem::path cache_root, std::vector<std::pair<CacheKey, std::string>> entries);
  std::size_t size() const override { return entries_.size(); }
  Example get(std::size_t index) const override;

 private:
  mutable SampleCache cache_;
  std::vector<std::pair<CacheKey, std::string>> entries_;
};

Batch collate(const DataSource& source, std::span<const std::size_t> indices);

/// Deterministic per-epoch permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  int epoch = 0;
  int64_t global_step = 0;
  std::string metric_name;
  double metric_value = 0;
  std::string model_json;
  std::string config_json;
  std::vector<std::string> val_ids;
};

void save_checkpoint(const std::filesystem::path& path, SegmentationNet& net, torch::optim::Optimizer* optimizer,
                     const CheckpointMeta& meta);
/// Restores weights (and optimizer state when given) plus the torch RNG state.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, SegmentationNet& net,
                               torch::optim::Optimizer* optimizer);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Rebuilds the network described in the checkpoint and loads its weights.
std::shared_ptr<SegmentationNet> load_model_from_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Evaluation

struct SampleTriple {
  std::string id;
  cv::Mat input;       // CV_8UC3 RGB
  cv::Mat target;      // CV_8UC1 {0, 1}
  cv::Mat prediction;  // CV_8UC1 {0, 1}
};

struct EvalOptions {
  int batch_size = 8;
  int max_samples = 0;
  Normalization normalization;
  std::vector<double> pr_thresholds = default_pr_thresholds();
};

struct EvalResult {
  ConfusionCounts counts;
  MetricReport report;
  double mean_loss = 0;
  std::vector<PrPoint> pr;
  std::vector<SampleTriple> samples;
};

/// Runs the model in evaluation mode (restoring the previous mode after),
/// predicting building where p1 > p0. Metrics are micro-averaged over all pixels.
EvalResult evaluate(SegmentationNet& net, const DataSource& data, const LossConfig& loss, const EvalOptions& options);

/// Writes `<dir>/<id>_input.png`, `_target.png`, `_pred.png` for each triple.
std::vector<std::filesystem::path> write_sample_triples(const std::filesystem::path& dir,
                                                        std::span<const SampleTriple> samples);

// ---------------------------------------------------------------------------
// Fit

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, int epoch, int64_t batch, double lr)
      : std::runtime_error(what), epoch(epoch), batch(batch), lr(lr) {}
  int epoch;
  int64_t batch;
  double lr;
};

struct FitOptions {
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume_from;
  std::string config_json = "{}";
  std::vector<std::string> val_ids;
  Normalization normalization;
};

struct FitResult {
  std::filesystem::path best_checkpoint;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path event_log;
  std::string metric_name;
  double best_metric = 0;
  int best_epoch = 0;
  int epochs_run = 0;
  int64_t global_step = 0;
};

/// Higher-is-better view of a monitored metric.
double monitor_score(const std::string& monitor, const EvalResult& result);

/// Writes `events.csv`, `ckpt_epoch_<k>.pt` (only on strict improvement of the
/// monitored validation metric) and `samples/` under options.run_dir.
FitResult fit(SegmentationNet& net, const DataSource& train, const DataSource& val, const TrainConfig& config,
              const FitOptions& options);

// ---------------------------------------------------------------------------
// LR finder

struct LrFindConfig {
  double min_lr = 1e-7;
  double max_lr = 10.0;
  int steps = 100;
  double smoothing = 0.98;
  double divergence_factor = 4.0;
  /// Segments ignored at either end when picking the suggestion; the whole
  /// curve is used if nothing would remain.
  int skip_start = 0;
  int skip_end = 0;
};

struct LrFindResult {
  std::vector<double> lrs;
  std::vector<double> losses;
  std::vector<double> smoothed;
  double suggestion = 0;
  bool stopped_early = false;
};

/// Performs one optimization step at `lr` and returns the loss measured on
/// that step's batch.
using LrStep = std::function<double(double lr)>;

/// Log-uniform sweep from min_lr to max_lr. Stops (without recording the
/// offending step) once the smoothed loss exceeds divergence_factor times the
/// best seen or any loss is non-finite. The suggestion is the lr at the most
/// negative forward-difference slope of the smoothed loss against log lr.
LrFindResult lr_sweep(const LrFindConfig& config, const LrStep& step);

/// Sweeps on `net` with Adam and restores its parameters and buffers afterwards.
LrFindResult lr_find(SegmentationNet& net, const DataSource& data, const TrainConfig& train,
                     const LrFindConfig& config);

}  // namespace bfx
