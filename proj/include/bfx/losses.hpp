#pragma once

// Segmentation losses over softmax probabilities. Every loss is computed
// together with its analytic gradient with respect to the probabilities;
// the tensor-returning forms wrap that gradient in an autograd node so
// training backpropagates exactly what the tests check.
//
// Shapes: probs N x 2 x H x W (channel 1 = building), target N x H x W with
// values {0, 1} (any integer or floating dtype). weighted_mse takes a single
// channel score N x 1 x H x W or N x H x W.

#include <torch/torch.h>

#include <array>
#include <string>

namespace bfx {

enum class LossKind { dice, weighted_ce, focal, combined_dice_focal, weighted_mse };
enum class WeightSource { unit, per_batch, class_stats, fixed };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);
std::string to_string(WeightSource source);
WeightSource weight_source_from_string(const std::string& s);

inline constexpr double kProbClampMin = 1e-7;
inline constexpr double kProbClampMax = 1.0 - 1e-7;

struct LossConfig {
  LossKind kind = LossKind::dice;
  double gamma = 2.0;
  double smooth = 1.0;
  WeightSource weight_source = WeightSource::unit;
  /// Used when weight_source == fixed (and filled in for class_stats).
  std::array<double, 2> weights{1.0, 1.0};
  /// Effective-number beta for per_batch / class_stats weighting.
  double beta = 1.0 - 1e-9;
  double combine_alpha = 0.5;

  /// Throws ConfigError listing every violated invariant.
  void validate() const;
};

struct LossEvaluation {
  double value = 0;
  /// d value / d input, same shape and dtype as the input.
  torch::Tensor grad;
};

LossEvaluation dice_loss_eval(const torch::Tensor& probs, const torch::Tensor& target, double smooth);
LossEvaluation focal_loss_eval(const torch::Tensor& probs, const torch::Tensor& target, double gamma,
                               std::array<double, 2> weights);
LossEvaluation weighted_ce_eval(const torch::Tensor& probs, const torch::Tensor& target,
                                std::array<double, 2> weights);
LossEvaluation combined_dice_focal_eval(const torch::Tensor& probs, const torch::Tensor& target, double alpha,
                                        double gamma, double smooth, std::array<double, 2> weights = {1.0, 1.0});
LossEvaluation weighted_mse_eval(const torch::Tensor& pred, const torch::Tensor& target,
                                 std::array<double, 2> weights);

/// 1 - (2 sum p1 t + eps) / (sum p1 + sum t + eps) per sample, mean over the batch.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double smooth = 1.0);
/// Mean over pixels of -w(t) (1 - p_t)^gamma log p_t.
torch::Tensor focal_loss(const torch::Tensor& probs, const torch::Tensor& target, double gamma = 2.0,
                         std::array<double, 2> weights = {1.0, 1.0});
/// Mean over pixels of -w(t) log p_t.
torch::Tensor weighted_ce(const torch::Tensor& probs, const torch::Tensor& target,
                          std::array<double, 2> weights = {1.0, 1.0});
torch::Tensor combined_dice_focal(const torch::Tensor& probs, const torch::Tensor& target, double alpha = 0.5,
                                  double gamma = 2.0, double smooth = 1.0,
                                  std::array<double, 2> weights = {1.0, 1.0});
/// Mean of w(t) (pred - t)^2.
torch::Tensor weighted_mse(const torch::Tensor& pred, const torch::Tensor& target,
                           std::array<double, 2> weights = {1.0, 1.0});

/// Class weights from the effective numbers of the batch's pixel counts,
/// normalized to sum to 2; a class absent from the batch gets weight 0.
std::array<double, 2> per_batch_weights(const torch::Tensor& target, double beta);

/// Evaluates the configured loss on network output. `probs` is N x 2 x H x W;
/// for weighted_mse the building channel is used as the regression score.
/// `weights` are the already-resolved class weights.
torch::Tensor compute_loss(const LossConfig& config, const torch::Tensor& probs, const torch::Tensor& target,
                           std::array<double, 2> weights);

/// Resolves the class weights for one batch according to config.weight_source.
std::array<double, 2> resolve_weights(const LossConfig& config, const torch::Tensor& target);

}  // namespace bfx
