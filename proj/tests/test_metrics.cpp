#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "bfx/error.hpp"
#include "bfx/metrics.hpp"
#include "support.hpp"

using namespace bfx;

namespace {

std::vector<std::uint8_t> bits(std::initializer_list<int> v) {
  std::vector<std::uint8_t> out;
  for (int x : v) out.push_back(static_cast<std::uint8_t>(x));
  return out;
}

}  // namespace

TEST_CASE("confusion counts on crafted grids") {
  const auto ones = std::vector<std::uint8_t>(10, 1);
  const auto c1 = confusion(ones, ones);
  CHECK(c1 == ConfusionCounts{10, 0, 0, 0});

  const auto t = bits({1, 0, 1, 1, 0, 0, 1, 0, 0, 1});
  std::vector<std::uint8_t> inv(t.size());
  std::transform(t.begin(), t.end(), inv.begin(), [](std::uint8_t x) { return static_cast<std::uint8_t>(1 - x); });
  const auto c2 = confusion(inv, t);
  CHECK(c2.tp == 0);
  CHECK(c2.tn == 0);

  // Hand-built: tp=3, fp=1, fn=1, tn=5.
  const auto pred = bits({1, 1, 1, 1, 0, 0, 0, 0, 0, 0});
  const auto targ = bits({1, 1, 1, 0, 1, 0, 0, 0, 0, 0});
  CHECK(confusion(pred, targ) == ConfusionCounts{3, 1, 1, 5});
}

TEST_CASE("confusion rejects non-binary or mismatched input") {
  CHECK_THROWS_AS(confusion(bits({0, 2}), bits({0, 1})), InvalidArgument);
  CHECK_THROWS_AS(confusion(bits({0, 1, 1}), bits({0, 1})), InvalidArgument);
  CHECK_THROWS_AS(confusion(cv::Mat::zeros(2, 2, CV_8UC1), cv::Mat::zeros(2, 3, CV_8UC1)), InvalidArgument);
}

TEST_CASE("scores from counts") {
  const auto r = scores({3, 1, 1, 5});
  CHECK(r.accuracy == doctest::Approx(0.8));
  CHECK(r.iou == doctest::Approx(0.6));
  CHECK(r.f1 == doctest::Approx(0.75));
  CHECK(r.dice_score == r.f1);
  CHECK(r.precision == doctest::Approx(0.75));
  CHECK(r.recall == doctest::Approx(0.75));

  const auto empty = scores({0, 0, 0, 7});
  CHECK(empty.iou == 1.0);
  CHECK(empty.f1 == 1.0);
  CHECK(empty.accuracy == 1.0);
}

TEST_CASE("published iou and f1 pairs satisfy the identity") {
  const std::vector<std::pair<double, double>> pairs{{0.717, 0.836}, {0.726, 0.841}, {0.749, 0.856}, {0.702, 0.824}};
  for (const auto& [iou, f1] : pairs) CHECK(std::abs(2 * iou / (1 + iou) - f1) <= 1e-3);
}

TEST_CASE("f1-iou identity, symmetry and permutation invariance on random counts") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::uint64_t> d(0, 1000);
  for (int i = 0; i < 1000; ++i) {
    ConfusionCounts c{d(rng), d(rng), d(rng), d(rng) + 1};
    const auto r = scores(c);
    if (c.tp + c.fp + c.fn > 0) CHECK(r.f1 == doctest::Approx(2 * r.iou / (1 + r.iou)).epsilon(1e-12));
    const auto swapped = scores({c.tp, c.fn, c.fp, c.tn});
    CHECK(swapped.iou == doctest::Approx(r.iou).epsilon(1e-15));
    CHECK(swapped.f1 == doctest::Approx(r.f1).epsilon(1e-15));
  }
  auto pred = test::random_binary(9, 9, 2);
  auto targ = test::random_binary(9, 9, 3);
  const auto base = confusion(pred, targ);
  std::vector<int> perm(81);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  cv::Mat p2(9, 9, CV_8UC1), t2(9, 9, CV_8UC1);
  for (int i = 0; i < 81; ++i) {
    p2.data[i] = pred.data[perm[static_cast<std::size_t>(i)]];
    t2.data[i] = targ.data[perm[static_cast<std::size_t>(i)]];
  }
  CHECK(confusion(p2, t2) == base);
}

TEST_CASE("pr curve matches an exhaustive recount") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.F, 1.F);
  std::vector<float> prob(64);
  std::vector<std::uint8_t> target(64);
  for (int i = 0; i < 64; ++i) {
    prob[static_cast<std::size_t>(i)] = std::round(u(rng) * 20.F) / 20.F;  // lands on thresholds too
    target[static_cast<std::size_t>(i)] = u(rng) < 0.4F ? 1 : 0;
  }
  std::vector<double> thresholds;
  for (int k = 0; k <= 10; ++k) thresholds.push_back(k / 10.0);
  const auto pts = pr_curve(prob, target, thresholds);
  REQUIRE(pts.size() == 11);
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < 64; ++i) {
      const bool pos = prob[i] >= thresholds[k];
      tp += pos && target[i] == 1;
      fp += pos && target[i] == 0;
      fn += !pos && target[i] == 1;
    }
    CHECK(pts[k].threshold == thresholds[k]);
    CHECK(pts[k].precision == doctest::Approx(tp + fp > 0 ? tp / (tp + fp) : 1.0));
    CHECK(pts[k].recall == doctest::Approx(tp / (tp + fn)));
  }
  CHECK(pts.front().recall == 1.0);
  for (std::size_t k = 1; k < pts.size(); ++k) CHECK(pts[k].recall <= pts[k - 1].recall);
}

TEST_CASE("pr curve edge thresholds") {
  const std::vector<float> prob{0.2F, 0.9F, 0.4F};
  const auto target = bits({1, 0, 1});
  const std::vector<double> th{0.0, 1.0};
  const auto pts = pr_curve(prob, target, th);
  CHECK(pts[0].recall == 1.0);
  CHECK(pts[1].recall == 0.0);
  CHECK(pts[1].precision == 1.0);
  CHECK_THROWS(pr_curve(prob, target, std::vector<double>{}));
}

TEST_CASE("pr accumulator over shards equals one pass") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(0.F, 1.F);
  std::vector<float> prob(500);
  std::vector<std::uint8_t> target(500);
  for (std::size_t i = 0; i < 500; ++i) {
    prob[i] = u(rng);
    target[i] = u(rng) < prob[i] ? 1 : 0;
  }
  PrAccumulator whole, shards;
  whole.add(prob, target);
  for (std::size_t s = 0; s < 500; s += 125) {
    shards.add(std::span<const float>(prob).subspan(s, 125), std::span<const std::uint8_t>(target).subspan(s, 125));
  }
  const auto a = whole.counts();
  const auto b = shards.counts();
  REQUIRE(a.size() == 101);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k] == b[k]);
    if (k > 0) CHECK(a[k].tp + a[k].fp <= a[k - 1].tp + a[k - 1].fp);
  }
  const auto direct = pr_curve(prob, target, default_pr_thresholds());
  const auto acc = whole.points();
  for (std::size_t k = 0; k < acc.size(); ++k) {
    CHECK(acc[k].precision == doctest::Approx(direct[k].precision));
    CHECK(acc[k].recall == doctest::Approx(direct[k].recall));
  }
}

TEST_CASE("constant background on the published class balance") {
  const std::uint64_t building = 710'000'000ULL;
  const std::uint64_t background = 44'000'000'000ULL;
  const auto r = scores({0, 0, building, background});
  CHECK(std::abs(r.accuracy - 0.984) <= 0.001);
  CHECK(r.iou == 0.0);
}
