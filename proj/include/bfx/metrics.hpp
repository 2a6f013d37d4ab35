#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace bfx {

/// Pixel confusion counts with building as the positive class. Counts from
/// disjoint shards combine by addition.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct PrPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
};

struct MetricReport {
  double accuracy = 0;
  double iou = 0;
  double f1 = 0;
  double dice_score = 0;  // same quantity as f1 on binary masks
  double precision = 0;
  double recall = 0;
  std::vector<PrPoint> pr_points;
};

/// Binary inputs only (0/1); throws InvalidArgument otherwise or on size mismatch.
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target);
ConfusionCounts confusion(const cv::Mat& pred, const cv::Mat& target);

/// Empty-union convention: iou = f1 = 1 when tp + fp + fn = 0.
MetricReport scores(const ConfusionCounts& counts);

/// 101 evenly spaced thresholds on [0, 1].
std::vector<double> default_pr_thresholds();

/// Accumulates per-threshold counts over many batches; p1 >= threshold is
/// predicted positive. Precision is 1 when nothing is predicted positive and
/// recall is 1 when the target has no positives.
class PrAccumulator {
 public:
  explicit PrAccumulator(std::vector<double> thresholds = default_pr_thresholds());

  void add(std::span<const float> building_prob, std::span<const std::uint8_t> target);
  std::vector<PrPoint> points() const;
  /// Confusion counts per threshold.
  std::vector<ConfusionCounts> counts() const;

 private:
  std::vector<double> thresholds_;
  // Histograms over "number of thresholds at or below p".
  std::vector<std::uint64_t> positive_hist_;
  std::vector<std::uint64_t> negative_hist_;
};

std::vector<PrPoint> pr_curve(std::span<const float> building_prob, std::span<const std::uint8_t> target,
                              std::span<const double> thresholds);

}  // namespace bfx
