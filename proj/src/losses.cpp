#include "bfx/losses.hpp"

#include <cmath>
#include <vector>

#include "bfx/dataset.hpp"
#include "bfx/error.hpp"

namespace bfx {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::dice: return "dice";
    case LossKind::weighted_ce: return "weighted_ce";
    case LossKind::focal: return "focal";
    case LossKind::combined_dice_focal: return "combined_dice_focal";
    case LossKind::weighted_mse: return "weighted_mse";
  }
  return "unknown";
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "dice") return LossKind::dice;
  if (s == "weighted_ce") return LossKind::weighted_ce;
  if (s == "focal") return LossKind::focal;
  if (s == "combined_dice_focal") return LossKind::combined_dice_focal;
  if (s == "weighted_mse") return LossKind::weighted_mse;
  throw InvalidArgument("unknown loss kind '" + s + "'");
}

std::string to_string(WeightSource source) {
  switch (source) {
    case WeightSource::unit: return "unit";
    case WeightSource::per_batch: return "per_batch";
    case WeightSource::class_stats: return "class_stats";
    case WeightSource::fixed: return "fixed";
  }
  return "unknown";
}

WeightSource weight_source_from_string(const std::string& s) {
  if (s == "unit") return WeightSource::unit;
  if (s == "per_batch") return WeightSource::per_batch;
  if (s == "class_stats") return WeightSource::class_stats;
  if (s == "fixed") return WeightSource::fixed;
  throw InvalidArgument("unknown weight source '" + s + "'");
}

void LossConfig::validate() const {
  std::vector<std::string> problems;
  if (!(gamma >= 0)) problems.push_back("loss.gamma must be >= 0");
  if (!(smooth > 0)) problems.push_back("loss.smooth must be > 0");
  if (!(combine_alpha >= 0 && combine_alpha <= 1)) problems.push_back("loss.combine_alpha must lie in [0, 1]");
  if (weight_source == WeightSource::fixed && !(weights[0] > 0 && weights[1] > 0)) {
    problems.push_back("loss.weights must be > 0");
  }
  if ((weight_source == WeightSource::per_batch || weight_source == WeightSource::class_stats) &&
      !(beta >= 0 && beta < 1)) {
    problems.push_back("loss.beta must lie in [0, 1)");
  }
  if (!problems.empty()) throw ConfigError(problems);
}

namespace {

torch::Tensor binary_target(const torch::Tensor& target, const torch::Tensor& like) {
  auto t = target.to(like.dtype());
  if (!((t == 0) | (t == 1)).all().item<bool>()) throw InvalidArgument("loss target must be binary (0 or 1)");
  return t;
}

/// Validates N x 2 x H x W probabilities against an N x H x W target and
/// returns the target as a floating tensor.
torch::Tensor check_probs(const torch::Tensor& probs, const torch::Tensor& target) {
  if (probs.dim() != 4 || probs.size(1) != 2) throw InvalidArgument("loss expects N x 2 x H x W probabilities");
  if (target.dim() != 3 || target.size(0) != probs.size(0) || target.size(1) != probs.size(2) ||
      target.size(2) != probs.size(3)) {
    throw InvalidArgument("loss target shape does not match probabilities");
  }
  if (!probs.is_floating_point()) throw InvalidArgument("loss probabilities must be floating point");
  return binary_target(target, probs);
}

void check_weights(std::array<double, 2> w, const torch::Tensor& t) {
  for (int c = 0; c < 2; ++c) {
    if (!(w[static_cast<std::size_t>(c)] >= 0) || !std::isfinite(w[static_cast<std::size_t>(c)])) {
      throw InvalidArgument("class weights must be finite and nonnegative");
    }
  }
  // A zero weight is only meaningful for a class with no pixels present.
  if (w[1] == 0 && (t == 1).any().item<bool>()) throw InvalidArgument("building weight is 0 but building pixels exist");
  if (w[0] == 0 && (t == 0).any().item<bool>()) throw InvalidArgument("background weight is 0 but background pixels exist");
}

struct TrueClass {
  torch::Tensor index;    // N x 1 x H x W int64
  torch::Tensor p;        // clamped p_t, N x H x W
  torch::Tensor in_range; // 1 where clamping was inactive
  torch::Tensor w;        // per-pixel class weight
};

TrueClass true_class(const torch::Tensor& probs, const torch::Tensor& t, std::array<double, 2> weights) {
  TrueClass tc;
  tc.index = t.to(torch::kLong).unsqueeze(1);
  auto raw = probs.gather(1, tc.index).squeeze(1);
  tc.p = raw.clamp(kProbClampMin, kProbClampMax);
  tc.in_range = ((raw >= kProbClampMin) & (raw <= kProbClampMax)).to(probs.dtype());
  tc.w = t * weights[1] + (1 - t) * weights[0];
  return tc;
}

torch::Tensor scatter_true(const torch::Tensor& probs, const TrueClass& tc, const torch::Tensor& g) {
  auto grad = torch::zeros_like(probs);
  grad.scatter_(1, tc.index, (g * tc.in_range).unsqueeze(1));
  return grad;
}

struct AnalyticLoss : public torch::autograd::Function<AnalyticLoss> {
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& input,
                               const torch::Tensor& grad, double value) {
    ctx->save_for_backward({grad});
    return torch::scalar_tensor(value, input.options().requires_grad(false));
  }

  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grad_output) {
    auto grad = ctx->get_saved_variables()[0];
    return {grad * grad_output[0], torch::Tensor(), torch::Tensor()};
  }
};

torch::Tensor attach(const torch::Tensor& input, const LossEvaluation& e) {
  return AnalyticLoss::apply(input, e.grad.to(input.dtype()), e.value);
}

}  // namespace

LossEvaluation dice_loss_eval(const torch::Tensor& probs_in, const torch::Tensor& target, double smooth) {
  if (!(smooth >= 0)) throw InvalidArgument("dice smoothing must be >= 0");
  torch::NoGradGuard guard;
  const auto probs = probs_in.detach();
  const auto t = check_probs(probs, target);
  const auto n = probs.size(0);
  const auto p1 = probs.select(1, 1);
  const auto inter = (p1 * t).sum({1, 2});
  const auto denom = p1.sum({1, 2}) + t.sum({1, 2}) + smooth;
  const auto numer = 2 * inter + smooth;
  // An all-empty sample with no smoothing counts as a perfect match.
  const auto defined = denom > 0;
  const auto safe_denom = torch::where(defined, denom, torch::ones_like(denom));
  const auto per_sample = torch::where(defined, 1 - numer / safe_denom, torch::zeros_like(denom));

  LossEvaluation e;
  e.value = per_sample.mean().item<double>();
  auto d = -(2 * t * safe_denom.view({n, 1, 1}) - numer.view({n, 1, 1})) /
           safe_denom.pow(2).view({n, 1, 1}) / static_cast<double>(n);
  d = d * defined.to(probs.dtype()).view({n, 1, 1});
  e.grad = torch::zeros_like(probs);
  e.grad.select(1, 1).copy_(d);
  return e;
}

LossEvaluation focal_loss_eval(const torch::Tensor& probs_in, const torch::Tensor& target, double gamma,
                               std::array<double, 2> weights) {
  if (!(gamma >= 0)) throw InvalidArgument("focal gamma must be >= 0");
  torch::NoGradGuard guard;
  const auto probs = probs_in.detach();
  const auto t = check_probs(probs, target);
  check_weights(weights, t);
  const auto tc = true_class(probs, t, weights);
  const double m = static_cast<double>(t.numel());
  const auto q = 1 - tc.p;
  const auto logp = tc.p.log();
  const auto mod = gamma == 0 ? torch::ones_like(q) : q.pow(gamma);

  LossEvaluation e;
  e.value = (-tc.w * mod * logp).sum().item<double>() / m;
  auto dmod = gamma == 0 ? torch::zeros_like(q) : -gamma * q.pow(gamma - 1);
  auto g = -tc.w / m * (dmod * logp + mod / tc.p);
  e.grad = scatter_true(probs, tc, g);
  return e;
}

LossEvaluation weighted_ce_eval(const torch::Tensor& probs_in, const torch::Tensor& target,
                                std::array<double, 2> weights) {
  for (double w : weights) {
    if (!(w >= 0)) throw InvalidArgument("cross-entropy weights must be positive");
  }
  torch::NoGradGuard guard;
  const auto probs = probs_in.detach();
  const auto t = check_probs(probs, target);
  check_weights(weights, t);
  const auto tc = true_class(probs, t, weights);
  const double m = static_cast<double>(t.numel());
  LossEvaluation e;
  e.value = (-tc.w * tc.p.log()).sum().item<double>() / m;
  e.grad = scatter_true(probs, tc, -tc.w / (m * tc.p));
  return e;
}

LossEvaluation combined_dice_focal_eval(const torch::Tensor& probs, const torch::Tensor& target, double alpha,
                                        double gamma, double smooth, std::array<double, 2> weights) {
  if (!(alpha >= 0 && alpha <= 1)) throw InvalidArgument("combine alpha must lie in [0, 1]");
  const auto d = dice_loss_eval(probs, target, smooth);
  const auto f = focal_loss_eval(probs, target, gamma, weights);
  LossEvaluation e;
  e.value = alpha * d.value + (1 - alpha) * f.value;
  e.grad = alpha * d.grad + (1 - alpha) * f.grad;
  return e;
}

LossEvaluation weighted_mse_eval(const torch::Tensor& pred_in, const torch::Tensor& target,
                                 std::array<double, 2> weights) {
  torch::NoGradGuard guard;
  const auto pred = pred_in.detach();
  auto flat = pred;
  if (pred.dim() == 4) {
    if (pred.size(1) != 1) throw InvalidArgument("weighted_mse expects a single-channel score");
    flat = pred.squeeze(1);
  }
  if (flat.sizes() != target.sizes()) throw InvalidArgument("weighted_mse: score and target shapes differ");
  if (!pred.is_floating_point()) throw InvalidArgument("weighted_mse: scores must be floating point");
  if (((flat < 0) | (flat > 1)).any().item<bool>()) throw InvalidArgument("weighted_mse: scores must lie in [0, 1]");
  const auto t = binary_target(target, flat);
  check_weights(weights, t);
  const auto w = t * weights[1] + (1 - t) * weights[0];
  const double m = static_cast<double>(t.numel());
  const auto diff = flat - t;
  LossEvaluation e;
  e.value = (w * diff * diff).sum().item<double>() / m;
  e.grad = (2 * w * diff / m).view(pred.sizes());
  return e;
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double smooth) {
  return attach(probs, dice_loss_eval(probs, target, smooth));
}

torch::Tensor focal_loss(const torch::Tensor& probs, const torch::Tensor& target, double gamma,
                         std::array<double, 2> weights) {
  return attach(probs, focal_loss_eval(probs, target, gamma, weights));
}

torch::Tensor weighted_ce(const torch::Tensor& probs, const torch::Tensor& target, std::array<double, 2> weights) {
  return attach(probs, weighted_ce_eval(probs, target, weights));
}

torch::Tensor combined_dice_focal(const torch::Tensor& probs, const torch::Tensor& target, double alpha, double gamma,
                                  double smooth, std::array<double, 2> weights) {
  return attach(probs, combined_dice_focal_eval(probs, target, alpha, gamma, smooth, weights));
}

torch::Tensor weighted_mse(const torch::Tensor& pred, const torch::Tensor& target, std::array<double, 2> weights) {
  return attach(pred, weighted_mse_eval(pred, target, weights));
}

std::array<double, 2> per_batch_weights(const torch::Tensor& target, double beta) {
  if (target.numel() == 0) throw InvalidArgument("per_batch_weights: empty batch");
  const auto building = (target != 0).sum().item<int64_t>();
  const auto total = target.numel();
  const std::array<std::uint64_t, 2> counts{static_cast<std::uint64_t>(total - building),
                                            static_cast<std::uint64_t>(building)};
  return class_stats_from_counts(counts, beta).weight;
}

std::array<double, 2> resolve_weights(const LossConfig& config, const torch::Tensor& target) {
  switch (config.weight_source) {
    case WeightSource::unit:
      return {1.0, 1.0};
    case WeightSource::per_batch:
      return per_batch_weights(target, config.beta);
    case WeightSource::class_stats:
    case WeightSource::fixed:
      return config.weights;
  }
  return {1.0, 1.0};
}

torch::Tensor compute_loss(const LossConfig& config, const torch::Tensor& probs, const torch::Tensor& target,
                           std::array<double, 2> weights) {
  switch (config.kind) {
    case LossKind::dice:
      return dice_loss(probs, target, config.smooth);
    case LossKind::weighted_ce:
      return weighted_ce(probs, target, weights);
    case LossKind::focal:
      return focal_loss(probs, target, config.gamma, weights);
    case LossKind::combined_dice_focal:
      return combined_dice_focal(probs, target, config.combine_alpha, config.gamma, config.smooth, weights);
    case LossKind::weighted_mse:
      return weighted_mse(probs.select(1, 1), target, weights);
  }
  throw InvalidArgument("unknown loss kind");
}

}  // namespace bfx
