#include <doctest.h>

#include <torch/torch.h>

#include <fstream>
#include <sstream>

#include "bfx/error.hpp"
#include "bfx/pipeline.hpp"
#include "bfx/training.hpp"
#include "support.hpp"

using namespace bfx;
namespace fs = std::filesystem;

namespace {

InMemoryDataSource rectangles(int count, int size, std::uint64_t seed) {
  InMemoryDataSource source;
  for (int i = 0; i < count; ++i) {
    const auto scene = synthetic_scene(size, size, seed + static_cast<std::uint64_t>(i));
    PatchPair pair;
    pair.image = normalize_image(scene.image, Normalization::unit());
    pair.mask = scene.mask;
    source.add(pair, "s" + std::to_string(i));
  }
  return source;
}

ModelConfig tiny_unet(std::uint64_t seed = 0) {
  auto c = default_model_config(ModelVariant::unet_scratch);
  c.base_channels = 4;
  c.dropout_rate = 0.2;
  c.seed = seed;
  return c;
}

TrainConfig quick_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.lr = 1e-2;
  t.loss.kind = LossKind::dice;
  t.record_wall_time = false;
  t.max_samples = 1;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> checkpoints_in(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".pt") out.push_back(e.path());
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule

TEST_CASE("one-cycle endpoints and phase boundary") {
  const OneCycleConfig c;
  for (int64_t total : {10, 1000}) {
    CAPTURE(total);
    const auto first = one_cycle(0, total, c);
    CHECK(first.lr == c.max_lr / 25.0);
    CHECK(first.momentum == 0.95);
    const auto peak = one_cycle(static_cast<int64_t>(0.25 * static_cast<double>(total)), total, c);
    CHECK(peak.lr == c.max_lr);
    CHECK(peak.momentum == 0.85);
    const auto last = one_cycle(total - 1, total, c);
    CHECK(last.lr == c.max_lr / 1e4);
    CHECK(last.momentum == 0.95);
  }
  CHECK_THROWS(one_cycle(10, 10, c));
  CHECK_THROWS(one_cycle(0, 1, c));
}

TEST_CASE("lr and momentum always move in opposite directions") {
  const OneCycleConfig c;
  for (int64_t total : {10, 1000}) {
    auto prev = one_cycle(0, total, c);
    for (int64_t s = 1; s < total; ++s) {
      const auto cur = one_cycle(s, total, c);
      const double dl = cur.lr - prev.lr;
      const double dm = cur.momentum - prev.momentum;
      CHECK(dl * dm <= 0);
      CHECK(cur.lr > 0);
      CHECK(cur.lr <= c.max_lr);
      CHECK(cur.momentum >= 0.85);
      CHECK(cur.momentum <= 0.95);
      prev = cur;
    }
  }
}

// ---------------------------------------------------------------------------
// LR finder

TEST_CASE("lr sweep on a quadratic suggests a stable step size") {
  // f(x) = L/2 x^2 with plain gradient descent diverges for lr > 2/L.
  const double curvature = 4.0;
  double x = 1.0;
  LrFindConfig cfg;
  cfg.min_lr = 1e-4;
  cfg.max_lr = 10.0;
  cfg.steps = 60;
  cfg.smoothing = 0.0;
  const auto r = lr_sweep(cfg, [&](double lr) {
    const double loss = 0.5 * curvature * x * x;
    x -= lr * curvature * x;
    return loss;
  });
  CHECK(r.stopped_early);
  CHECK(r.suggestion < 2.0 / curvature);
  CHECK(r.suggestion >= cfg.min_lr);
}

TEST_CASE("lr sweep records exactly its steps") {
  LrFindConfig cfg;
  cfg.max_lr = 1.0;
  cfg.min_lr = 0.1;
  cfg.steps = 10;
  int calls = 0;
  const auto r = lr_sweep(cfg, [&](double) { return 1.0 / ++calls; });
  CHECK(r.lrs.size() == 10);
  CHECK(r.lrs.front() == 0.1);
  CHECK(r.lrs.back() == doctest::Approx(1.0));
  CHECK_FALSE(r.stopped_early);
  cfg.steps = 9;
  CHECK_THROWS(lr_sweep(cfg, [](double) { return 1.0; }));
}

TEST_CASE("planted divergence truncates the sweep") {
  for (int j : {3, 7, 15}) {
    LrFindConfig cfg;
    cfg.steps = 30;
    cfg.smoothing = 0.5;
    int i = 0;
    double last_lr = 0;
    const auto r = lr_sweep(cfg, [&](double lr) {
      const int k = i++;
      if (k < j) last_lr = lr;
      return k < j ? 10.0 / (k + 1) : std::numeric_limits<double>::infinity();
    });
    CHECK(r.lrs.size() == static_cast<std::size_t>(j));
    CHECK(r.stopped_early);
    CHECK(r.suggestion <= last_lr);
  }
}

TEST_CASE("skipped ends fall back to the whole curve when nothing remains") {
  LrFindConfig cfg;
  cfg.steps = 10;
  cfg.smoothing = 0.0;
  cfg.skip_start = 8;
  cfg.skip_end = 5;
  const std::vector<double> losses{5, 1, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2};
  std::size_t i = 0;
  const auto r = lr_sweep(cfg, [&](double) { return losses[i++]; });
  CHECK(r.suggestion == r.lrs[0]);
  cfg.skip_start = 1;
  cfg.skip_end = 0;
  i = 0;
  const auto s = lr_sweep(cfg, [&](double) { return losses[i++]; });
  CHECK(s.suggestion != s.lrs[0]);
}

TEST_CASE("lr_find leaves the network untouched") {
  auto net = build_model(tiny_unet());
  const auto data = rectangles(8, 32, 1);
  const auto before = weight_digest(*net);
  LrFindConfig cfg;
  cfg.steps = 12;
  cfg.min_lr = 1e-5;
  cfg.max_lr = 1.0;
  const auto r = lr_find(*net, data, quick_train(1), cfg);
  CHECK(weight_digest(*net) == before);
  CHECK(r.suggestion >= cfg.min_lr);
  CHECK(r.suggestion <= cfg.max_lr);
}

// ---------------------------------------------------------------------------
// Checkpoints and fit

TEST_CASE("checkpoints restore weights and optimizer state bit for bit") {
  test::TempDir dir;
  auto cfg = tiny_unet(3);
  cfg.dropout_rate = 0;
  auto net = build_model(cfg);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(1e-3));
  const auto data = rectangles(4, 32, 2);
  const auto batch = collate(data, std::vector<std::size_t>{0, 1, 2, 3});
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    dice_loss(net->forward(batch.images), batch.targets).backward();
    opt.step();
  }
  CheckpointMeta meta;
  meta.epoch = 3;
  meta.global_step = 12;
  meta.metric_name = "dice";
  meta.metric_value = 0.5;
  meta.model_json = model_config_to_json(cfg).dump();
  meta.config_json = R"({"a": 1})";
  meta.val_ids = {"x", "y"};
  save_checkpoint(dir / "c.pt", *net, &opt, meta);

  cfg.seed = 4;
  auto other = build_model(cfg);
  torch::optim::Adam other_opt(other->parameters(), torch::optim::AdamOptions(1e-3));
  const auto back = load_checkpoint(dir / "c.pt", *other, &other_opt);
  CHECK(weight_digest(*other) == weight_digest(*net));
  CHECK(back.epoch == 3);
  CHECK(back.global_step == 12);
  CHECK(back.metric_name == "dice");
  CHECK(back.config_json == meta.config_json);
  CHECK(back.val_ids == meta.val_ids);

  // One more identical step on both keeps them identical only if Adam's
  // moments were restored.
  for (auto* pair : {&opt, &other_opt}) {
    auto& n = pair == &opt ? net : other;
    pair->zero_grad();
    dice_loss(n->forward(batch.images), batch.targets).backward();
    pair->step();
  }
  CHECK(weight_digest(*other) == weight_digest(*net));
}

TEST_CASE("a model rebuilt from its checkpoint predicts identically") {
  test::TempDir dir;
  auto c = tiny_unet(5);
  auto net = build_model(c);
  CheckpointMeta meta;
  meta.model_json = model_config_to_json(c).dump();
  meta.metric_name = "dice";
  save_checkpoint(dir / "m.pt", *net, nullptr, meta);
  auto loaded = load_model_from_checkpoint(dir / "m.pt");
  net->eval();
  loaded->eval();
  torch::NoGradGuard no_grad;
  const auto x = torch::randn({1, 3, 32, 32});
  CHECK(torch::equal(forward(*net, x), forward(*loaded, x)));
  CHECK_THROWS(load_model_from_checkpoint(dir / "missing.pt"));
}

TEST_CASE("fit is deterministic and resumes to the same state") {
  test::TempDir dir;
  const auto train = rectangles(8, 32, 10);
  const auto val = rectangles(4, 32, 50);
  FitOptions a_opts;
  a_opts.run_dir = dir / "a";
  a_opts.val_ids = {"s0", "s1", "s2", "s3"};
  auto a = build_model(tiny_unet(9));
  const auto ra = fit(*a, train, val, quick_train(3), a_opts);
  CHECK(ra.epochs_run == 3);
  CHECK(ra.global_step == 6);

  FitOptions b_opts = a_opts;
  b_opts.run_dir = dir / "b";
  auto b = build_model(tiny_unet(9));
  fit(*b, train, val, quick_train(3), b_opts);
  CHECK(slurp(dir / "a" / "events.csv") == slurp(dir / "b" / "events.csv"));
  CHECK(weight_digest(*a) == weight_digest(*b));

  // Interrupted after the first epoch, then resumed.
  FitOptions c_opts = a_opts;
  c_opts.run_dir = dir / "c";
  auto c = build_model(tiny_unet(9));
  const auto rc1 = fit(*c, train, val, quick_train(1), c_opts);
  REQUIRE(fs::exists(dir / "c" / "ckpt_epoch_1.pt"));
  CHECK(read_checkpoint_meta(dir / "c" / "ckpt_epoch_1.pt").val_ids == a_opts.val_ids);
  c_opts.resume_from = dir / "c" / "ckpt_epoch_1.pt";
  auto c2 = build_model(tiny_unet(123));
  const auto rc2 = fit(*c2, train, val, quick_train(3), c_opts);
  CHECK(rc2.epochs_run == 2);
  CHECK(slurp(dir / "c" / "events.csv") == slurp(dir / "a" / "events.csv"));
  CHECK(weight_digest(*c2) == weight_digest(*a));

  FitOptions bad = c_opts;
  bad.run_dir = dir / "d";
  bad.val_ids = {"s9"};
  auto d = build_model(tiny_unet(9));
  CHECK_THROWS_WITH(fit(*d, train, val, quick_train(3), bad), doctest::Contains("validation membership"));
  (void)rc1;
}

TEST_CASE("checkpoints are written only on improvement") {
  test::TempDir dir;
  const auto train = rectangles(4, 32, 20);
  const auto val = rectangles(2, 32, 60);
  auto c = tiny_unet(1);
  c.dropout_rate = 0;
  auto net = build_model(c);
  // Freeze batch-norm statistics and make steps far below float resolution so
  // the validation metric cannot change after the first epoch.
  for (auto& m : net->modules(false)) {
    if (auto* bn = m->as<torch::nn::BatchNorm2d>()) bn->options.momentum(0.0);
  }
  auto t = quick_train(4);
  t.lr = 1e-12;
  t.monitor = "accuracy";
  FitOptions opts;
  opts.run_dir = dir.path();
  const auto r = fit(*net, train, val, t, opts);
  CHECK(r.checkpoints.size() == 1);
  CHECK(checkpoints_in(dir.path()).size() == 1);
  CHECK(r.best_epoch == 1);
}

TEST_CASE("event log rows replay from disk") {
  test::TempDir dir;
  {
    EventLog log(dir / "e.csv", false);
    log.add(0, "train", "batch_loss", 0.5);
    log.add(1, "val", "iou", 0.25);
  }
  const auto events = EventLog::read(dir / "e.csv");
  REQUIRE(events.size() == 2);
  CHECK(events[1].split == "val");
  CHECK(events[1].value == 0.25);
  CHECK(events[1].wall_time == 0);
}

TEST_CASE("evaluation of a perfect oracle and of repeated runs") {
  const auto val = rectangles(3, 32, 70);
  auto net = build_model(tiny_unet(2));
  LossConfig loss;
  EvalOptions opts;
  opts.max_samples = 2;
  const auto r1 = evaluate(*net, val, loss, opts);
  const auto r2 = evaluate(*net, val, loss, opts);
  CHECK(r1.counts == r2.counts);
  CHECK(r1.mean_loss == r2.mean_loss);
  CHECK(r1.samples.size() == 2);
  CHECK(r1.counts.total() == 3u * 32u * 32u);
  CHECK(net->is_training());
}

TEST_CASE("per-epoch orders are seeded permutations") {
  const auto a = epoch_order(50, 1, 1);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  CHECK(a == epoch_order(50, 1, 1));
  CHECK(a != epoch_order(50, 1, 2));
  CHECK(a != epoch_order(50, 2, 1));
}

TEST_CASE("single-batch overfit") {
  // Small stand-in for the full-width check in the acceptance suite.
  torch::manual_seed(0);
  const auto data = rectangles(4, 32, 99);
  auto c = tiny_unet(0);
  c.base_channels = 16;
  c.dropout_rate = 0;
  auto net = build_model(c);
  net->train();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(3e-3));
  const auto batch = collate(data, std::vector<std::size_t>{0, 1, 2, 3});
  double last = 1;
  for (int i = 0; i < 200 && last >= 0.05; ++i) {
    opt.zero_grad();
    auto loss = dice_loss(forward(*net, batch.images), batch.targets);
    loss.backward();
    opt.step();
    last = loss.item<double>();
  }
  CHECK(last < 0.05);
}
