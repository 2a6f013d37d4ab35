#include "bfx/metrics.hpp"

#include <algorithm>

#include "bfx/error.hpp"

namespace bfx {

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> target) {
  if (pred.size() != target.size()) throw InvalidArgument("confusion: prediction and target sizes differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i];
    const auto t = target[i];
    if (p > 1 || t > 1) throw InvalidArgument("confusion: inputs must be binary (0 or 1)");
    if (p != 0) {
      (t != 0 ? c.tp : c.fp) += 1;
    } else {
      (t != 0 ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

ConfusionCounts confusion(const cv::Mat& pred, const cv::Mat& target) {
  if (pred.type() != CV_8UC1 || target.type() != CV_8UC1) {
    throw InvalidArgument("confusion: masks must be CV_8UC1");
  }
  if (pred.size() != target.size()) throw InvalidArgument("confusion: mask shapes differ");
  const cv::Mat p = pred.isContinuous() ? pred : pred.clone();
  const cv::Mat t = target.isContinuous() ? target : target.clone();
  return confusion(std::span<const std::uint8_t>(p.data, p.total()),
                   std::span<const std::uint8_t>(t.data, t.total()));
}

MetricReport scores(const ConfusionCounts& c) {
  MetricReport r;
  const auto total = static_cast<double>(c.total());
  const auto tp = static_cast<double>(c.tp);
  const auto fp = static_cast<double>(c.fp);
  const auto fn = static_cast<double>(c.fn);
  r.accuracy = total > 0 ? (tp + static_cast<double>(c.tn)) / total : 0.0;
  const double union_ = tp + fp + fn;
  r.iou = union_ > 0 ? tp / union_ : 1.0;
  r.f1 = union_ > 0 ? 2 * tp / (2 * tp + fp + fn) : 1.0;
  r.dice_score = r.f1;
  r.precision = tp + fp > 0 ? tp / (tp + fp) : 1.0;
  r.recall = tp + fn > 0 ? tp / (tp + fn) : 1.0;
  return r;
}

std::vector<double> default_pr_thresholds() {
  std::vector<double> t(101);
  for (int i = 0; i <= 100; ++i) t[static_cast<std::size_t>(i)] = i / 100.0;
  return t;
}

PrAccumulator::PrAccumulator(std::vector<double> thresholds) : thresholds_(std::move(thresholds)) {
  if (thresholds_.empty()) throw InvalidArgument("pr_curve: threshold list is empty");
  if (!std::is_sorted(thresholds_.begin(), thresholds_.end())) {
    throw InvalidArgument("pr_curve: thresholds must be sorted ascending");
  }
  positive_hist_.assign(thresholds_.size() + 1, 0);
  negative_hist_.assign(thresholds_.size() + 1, 0);
}

void PrAccumulator::add(std::span<const float> building_prob, std::span<const std::uint8_t> target) {
  if (building_prob.size() != target.size()) throw InvalidArgument("pr_curve: probability and target sizes differ");
  // A pixel is predicted positive at threshold k iff k < above(p), where
  // above(p) counts the thresholds <= p.
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double p = building_prob[i];
    const auto above = static_cast<std::size_t>(
        std::upper_bound(thresholds_.begin(), thresholds_.end(), p) - thresholds_.begin());
    (target[i] != 0 ? positive_hist_ : negative_hist_)[above] += 1;
  }
}

std::vector<ConfusionCounts> PrAccumulator::counts() const {
  const std::size_t n = thresholds_.size();
  std::vector<ConfusionCounts> out(n);
  std::uint64_t pos_total = 0;
  std::uint64_t neg_total = 0;
  for (std::size_t a = 0; a <= n; ++a) {
    pos_total += positive_hist_[a];
    neg_total += negative_hist_[a];
  }
  // Walk thresholds upward; pixels with above == k stop being positive at k.
  std::uint64_t pos_below = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t k = 0; k < n; ++k) {
    pos_below += positive_hist_[k];
    neg_below += negative_hist_[k];
    out[k].tp = pos_total - pos_below;
    out[k].fn = pos_below;
    out[k].fp = neg_total - neg_below;
    out[k].tn = neg_below;
  }
  return out;
}

std::vector<PrPoint> PrAccumulator::points() const {
  const auto per_threshold = counts();
  std::vector<PrPoint> out;
  out.reserve(thresholds_.size());
  for (std::size_t k = 0; k < thresholds_.size(); ++k) {
    const auto r = scores(per_threshold[k]);
    out.push_back({thresholds_[k], r.precision, r.recall});
  }
  return out;
}

std::vector<PrPoint> pr_curve(std::span<const float> building_prob, std::span<const std::uint8_t> target,
                              std::span<const double> thresholds) {
  PrAccumulator acc(std::vector<double>(thresholds.begin(), thresholds.end()));
  acc.add(building_prob, target);
  return acc.points();
}

}  // namespace bfx
