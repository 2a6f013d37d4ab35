#include "bfx/training.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <numbers>
#include <random>
#include <sstream>

#include "bfx/config.hpp"
#include "bfx/error.hpp"
#include "bfx/log.hpp"

namespace fs = std::filesystem;

namespace bfx {

// ---------------------------------------------------------------------------
// Schedule

int64_t one_cycle_peak(int64_t total_steps, const OneCycleConfig& config) {
  auto peak = static_cast<int64_t>(std::floor(config.pct_start * static_cast<double>(total_steps)));
  return std::clamp<int64_t>(peak, 1, total_steps - 1);
}

ScheduleValue one_cycle(int64_t step, int64_t total_steps, const OneCycleConfig& config) {
  if (total_steps < 2) throw InvalidArgument("one_cycle needs at least 2 steps");
  if (step < 0 || step >= total_steps) {
    throw std::out_of_range("one_cycle step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + ")");
  }
  const int64_t peak = one_cycle_peak(total_steps, config);
  const double start_lr = config.max_lr / config.div_factor;
  const double end_lr = config.max_lr / config.final_div_factor;
  auto ramp = [](double from, double to, double t) { return from + (to - from) * (1 - std::cos(std::numbers::pi * t)) / 2; };
  ScheduleValue v;
  if (step <= peak) {
    const double t = static_cast<double>(step) / static_cast<double>(peak);
    v.lr = ramp(start_lr, config.max_lr, t);
    v.momentum = ramp(config.momentum_high, config.momentum_low, t);
  } else {
    const double t = static_cast<double>(step - peak) / static_cast<double>(total_steps - 1 - peak);
    v.lr = ramp(config.max_lr, end_lr, t);
    v.momentum = ramp(config.momentum_low, config.momentum_high, t);
  }
  // cos(pi) is not exactly -1 in floating point; pin the endpoints.
  if (step == peak) v = {config.max_lr, config.momentum_low};
  if (step == 0) v = {start_lr, config.momentum_high};
  if (step == total_steps - 1) v = {end_lr, config.momentum_high};
  return v;
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::one_cycle ? "one_cycle" : "constant"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "one_cycle") return ScheduleKind::one_cycle;
  throw InvalidArgument("unknown schedule '" + s + "'");
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (epochs < 1) problems.push_back("train.epochs must be >= 1");
  if (batch_size < 1) problems.push_back("train.batch_size must be >= 1");
  if (eval_batch_size < 1) problems.push_back("train.eval_batch_size must be >= 1");
  if (!(lr > 0)) problems.push_back("train.lr must be > 0");
  if (!(betas[0] >= 0 && betas[0] < 1 && betas[1] >= 0 && betas[1] < 1)) {
    problems.push_back("train.betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0)) problems.push_back("train.weight_decay must be >= 0");
  if (!(one_cycle.max_lr > 0)) problems.push_back("train.one_cycle.max_lr must be > 0");
  if (!(one_cycle.pct_start > 0 && one_cycle.pct_start < 1)) {
    problems.push_back("train.one_cycle.pct_start must lie in (0, 1)");
  }
  if (!(one_cycle.div_factor > 0) || !(one_cycle.final_div_factor > 0)) {
    problems.push_back("train.one_cycle div factors must be > 0");
  }
  if (!(one_cycle.momentum_high >= one_cycle.momentum_low && one_cycle.momentum_low >= 0 &&
        one_cycle.momentum_high < 1)) {
    problems.push_back("train.one_cycle momentum range must satisfy 0 <= low <= high < 1");
  }
  static const std::vector<std::string> monitors = {"accuracy", "iou", "f1", "dice", "loss"};
  if (std::find(monitors.begin(), monitors.end(), monitor) == monitors.end()) {
    problems.push_back("train.monitor must be one of accuracy, iou, f1, dice, loss");
  }
  try {
    loss.validate();
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
  if (!problems.empty()) throw ConfigError(problems);
}

// ---------------------------------------------------------------------------
// Event log

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

EventLog::EventLog(fs::path path, bool record_wall_time, std::vector<MetricEvent> prior)
    : path_(std::move(path)), record_wall_time_(record_wall_time), start_(std::chrono::steady_clock::now()) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  out_.open(path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open event log " + path_.string());
  out_ << "step,split,name,value,wall_time\n";
  for (auto& e : prior) {
    write_row(e);
    events_.push_back(std::move(e));
  }
  out_.flush();
}

void EventLog::add(int64_t step, const std::string& split, const std::string& name, double value) {
  MetricEvent e{step, split, name, value, 0.0};
  if (record_wall_time_) {
    e.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  write_row(e);
  events_.push_back(std::move(e));
}

void EventLog::write_row(const MetricEvent& e) {
  out_ << e.step << ',' << e.split << ',' << e.name << ',' << format_double(e.value) << ','
       << format_double(e.wall_time) << '\n';
}

void EventLog::flush() { out_.flush(); }

std::vector<MetricEvent> EventLog::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read event log " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step,split,name,value,wall_time") throw IoError(path.string() + " is not an event log");
  std::vector<MetricEvent> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string step, split, name, value, wall;
    if (!std::getline(ss, step, ',') || !std::getline(ss, split, ',') || !std::getline(ss, name, ',') ||
        !std::getline(ss, value, ',') || !std::getline(ss, wall, ',')) {
      throw IoError("malformed event log row in " + path.string() + ": " + line);
    }
    out.push_back({std::stoll(step), split, name, std::stod(value), std::stod(wall)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data

torch::Tensor image_to_tensor(const cv::Mat& image) {
  if (image.type() != CV_32FC3) throw InvalidArgument("image_to_tensor expects CV_32FC3");
  const cv::Mat c = image.isContinuous() ? image : image.clone();
  return torch::from_blob(c.data, {c.rows, c.cols, 3}, torch::kFloat32).permute({2, 0, 1}).contiguous().clone();
}

torch::Tensor mask_to_tensor(const cv::Mat& mask) {
  if (mask.type() != CV_8UC1) throw InvalidArgument("mask_to_tensor expects CV_8UC1");
  const cv::Mat c = mask.isContinuous() ? mask : mask.clone();
  return torch::from_blob(c.data, {c.rows, c.cols}, torch::kUInt8).clone();
}

void InMemoryDataSource::add(Example example) {
  if (example.image.dim() != 3 || example.image.size(0) != 3) throw InvalidArgument("example image must be 3 x H x W");
  if (example.target.dim() != 2 || example.target.size(0) != example.image.size(1) ||
      example.target.size(1) != example.image.size(2)) {
    throw InvalidArgument("example target must be H x W matching the image");
  }
  examples_.push_back(std::move(example));
}

void InMemoryDataSource::add(const PatchPair& pair, std::string id) {
  if (pair.mask.empty()) throw InvalidArgument("training sample " + id + " has no mask");
  add(Example{image_to_tensor(pair.image), mask_to_tensor(pair.mask), std::move(id)});
}

Example InMemoryDataSource::get(std::size_t index) const { return examples_.at(index); }

CachedDataSource::CachedDataSource(fs::path cache_root, std::vector<std::pair<CacheKey, std::string>> entries)
    : cache_(std::move(cache_root)), entries_(std::move(entries)) {}

Example CachedDataSource::get(std::size_t index) const {
  const auto& [key, id] = entries_.at(index);
  auto pair = cache_.get_pair(key);
  if (!pair) throw IoError("cache entry for " + id + " (" + key.hex() + ") is missing or corrupted");
  if (pair->mask.empty()) throw IoError("cache entry for " + id + " has no mask");
  return Example{image_to_tensor(pair->image), mask_to_tensor(pair->mask), id};
}

Batch collate(const DataSource& source, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InvalidArgument("collate: empty batch");
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> targets;
  Batch b;
  for (auto i : indices) {
    auto e = source.get(i);
    images.push_back(std::move(e.image));
    targets.push_back(std::move(e.target));
    b.ids.push_back(std::move(e.id));
  }
  b.images = torch::stack(images);
  b.targets = torch::stack(targets);
  return b;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

torch::Tensor string_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr(), s.data(), s.size());
  return t;
}

std::string tensor_string(const torch::Tensor& t) {
  const auto c = t.contiguous();
  return std::string(static_cast<const char*>(c.data_ptr()), static_cast<std::size_t>(c.numel()));
}

std::string join_lines(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += s + "\n";
  return out;
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

CheckpointMeta read_meta(torch::serialize::InputArchive& archive) {
  // InputArchive::read assigns into a defined tensor in place, so every field
  // needs a fresh one.
  auto field = [&](const char* key) {
    torch::Tensor t;
    archive.read(key, t);
    return t;
  };
  CheckpointMeta m;
  m.epoch = static_cast<int>(field("epoch").item<int64_t>());
  m.global_step = field("global_step").item<int64_t>();
  m.metric_name = tensor_string(field("metric_name"));
  m.metric_value = field("metric_value").item<double>();
  m.model_json = tensor_string(field("model_json"));
  m.config_json = tensor_string(field("config_json"));
  m.val_ids = split_lines(tensor_string(field("val_ids")));
  return m;
}

}  // namespace

void save_checkpoint(const fs::path& path, SegmentationNet& net, torch::optim::Optimizer* optimizer,
                     const CheckpointMeta& meta) {
  torch::serialize::OutputArchive archive;
  torch::serialize::OutputArchive model_archive;
  net.save(model_archive);
  archive.write("model", model_archive);
  if (optimizer != nullptr) {
    torch::serialize::OutputArchive opt_archive;
    optimizer->save(opt_archive);
    archive.write("optimizer", opt_archive);
  }
  archive.write("epoch", torch::tensor(static_cast<int64_t>(meta.epoch)));
  archive.write("global_step", torch::tensor(meta.global_step));
  archive.write("metric_name", string_tensor(meta.metric_name));
  archive.write("metric_value", torch::tensor(meta.metric_value, torch::kFloat64));
  archive.write("model_json", string_tensor(meta.model_json.empty() ? model_config_to_json(net.config()).dump()
                                                                    : meta.model_json));
  archive.write("config_json", string_tensor(meta.config_json));
  archive.write("val_ids", string_tensor(join_lines(meta.val_ids)));
  archive.write("rng_state", at::detail::getDefaultCPUGenerator().get_state());

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint " + path.string() + " does not exist");
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  return read_meta(archive);
}

CheckpointMeta load_checkpoint(const fs::path& path, SegmentationNet& net, torch::optim::Optimizer* optimizer) {
  if (!fs::exists(path)) throw IoError("checkpoint " + path.string() + " does not exist");
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  auto meta = read_meta(archive);
  const auto stored = model_config_from_json(nlohmann::json::parse(meta.model_json));
  if (stored.variant != net.config().variant) {
    throw InvalidArgument("checkpoint holds a " + to_string(stored.variant) + " model but the network is " +
                          to_string(net.config().variant));
  }
  torch::serialize::InputArchive model_archive;
  archive.read("model", model_archive);
  net.load(model_archive);
  if (optimizer != nullptr) {
    torch::serialize::InputArchive opt_archive;
    if (!archive.try_read("optimizer", opt_archive)) {
      throw IoError("checkpoint " + path.string() + " carries no optimizer state");
    }
    optimizer->load(opt_archive);
  }
  torch::Tensor rng;
  if (archive.try_read("rng_state", rng)) {
    auto gen = at::detail::getDefaultCPUGenerator();
    gen.set_state(rng);
  }
  return meta;
}

std::shared_ptr<SegmentationNet> load_model_from_checkpoint(const fs::path& path) {
  const auto meta = read_checkpoint_meta(path);
  auto config = model_config_from_json(nlohmann::json::parse(meta.model_json));
  // Weights come from the checkpoint; never fetch the pretrained archive again.
  config.pretrained = false;
  auto net = build_model(config);
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  torch::serialize::InputArchive model_archive;
  archive.read("model", model_archive);
  net->load(model_archive);
  net->eval();
  return net;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

cv::Mat tensor_to_mask(const torch::Tensor& t) {
  const auto c = t.to(torch::kUInt8).contiguous();
  cv::Mat m(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), CV_8UC1);
  std::memcpy(m.data, c.data_ptr(), static_cast<std::size_t>(c.numel()));
  return m;
}

cv::Mat tensor_to_image(const torch::Tensor& chw) {
  const auto hwc = chw.permute({1, 2, 0}).contiguous().to(torch::kFloat32);
  cv::Mat m(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_32FC3);
  std::memcpy(m.data, hwc.data_ptr(), static_cast<std::size_t>(hwc.numel()) * sizeof(float));
  return m;
}

struct ModeGuard {
  explicit ModeGuard(torch::nn::Module& m) : module(m), was_training(m.is_training()) {}
  ~ModeGuard() { module.train(was_training); }
  torch::nn::Module& module;
  bool was_training;
};

void write_report_events(EventLog& log, int64_t step, const std::string& split, double loss,
                         const MetricReport& r) {
  log.add(step, split, "loss", loss);
  log.add(step, split, "accuracy", r.accuracy);
  log.add(step, split, "iou", r.iou);
  log.add(step, split, "f1", r.f1);
  log.add(step, split, "dice", r.dice_score);
}

}  // namespace

EvalResult evaluate(SegmentationNet& net, const DataSource& data, const LossConfig& loss, const EvalOptions& options) {
  if (data.size() == 0) throw InvalidArgument("evaluate: empty data");
  if (options.batch_size < 1) throw InvalidArgument("evaluate: batch_size must be >= 1");
  ModeGuard mode(net);
  net.eval();
  torch::NoGradGuard no_grad;

  EvalResult result;
  PrAccumulator pr(options.pr_thresholds);
  double loss_sum = 0;
  std::vector<std::size_t> indices(data.size());
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(options.batch_size);
  for (std::size_t start = 0; start < indices.size(); start += bs) {
    const auto count = std::min(bs, indices.size() - start);
    auto batch = collate(data, std::span(indices).subspan(start, count));
    auto probs = forward(net, batch.images);
    const auto weights = resolve_weights(loss, batch.targets);
    loss_sum += compute_loss(loss, probs, batch.targets, weights).item<double>() * static_cast<double>(count);

    const auto pred = (probs.select(1, 1) > probs.select(1, 0)).to(torch::kUInt8).contiguous();
    const auto target = batch.targets.to(torch::kUInt8).contiguous();
    result.counts += confusion(std::span<const std::uint8_t>(pred.data_ptr<std::uint8_t>(), pred.numel()),
                               std::span<const std::uint8_t>(target.data_ptr<std::uint8_t>(), target.numel()));
    const auto p1 = probs.select(1, 1).to(torch::kFloat32).contiguous();
    pr.add(std::span<const float>(p1.data_ptr<float>(), p1.numel()),
           std::span<const std::uint8_t>(target.data_ptr<std::uint8_t>(), target.numel()));

    for (std::size_t i = 0; i < count && result.samples.size() < static_cast<std::size_t>(options.max_samples); ++i) {
      const auto k = static_cast<int64_t>(i);
      result.samples.push_back({batch.ids[i], denormalize_image(tensor_to_image(batch.images[k]), options.normalization),
                                tensor_to_mask(target[k]), tensor_to_mask(pred[k])});
    }
  }
  result.report = scores(result.counts);
  result.mean_loss = loss_sum / static_cast<double>(data.size());
  result.pr = pr.points();
  result.report.pr_points = result.pr;
  return result;
}

std::vector<fs::path> write_sample_triples(const fs::path& dir, std::span<const SampleTriple> samples) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    auto stem = std::to_string(i) + "_" + s.id;
    std::replace(stem.begin(), stem.end(), '/', '_');
    cv::Mat bgr;
    cv::cvtColor(s.input, bgr, cv::COLOR_RGB2BGR);
    const auto input = dir / (stem + "_input.png");
    const auto target = dir / (stem + "_target.png");
    const auto pred = dir / (stem + "_pred.png");
    if (!cv::imwrite(input.string(), bgr) || !cv::imwrite(target.string(), s.target * 255) ||
        !cv::imwrite(pred.string(), s.prediction * 255)) {
      throw IoError("cannot write sample images under " + dir.string());
    }
    written.insert(written.end(), {input, target, pred});
  }
  return written;
}

// ---------------------------------------------------------------------------
// Fit

double monitor_score(const std::string& monitor, const EvalResult& r) {
  if (monitor == "accuracy") return r.report.accuracy;
  if (monitor == "iou") return r.report.iou;
  if (monitor == "f1") return r.report.f1;
  if (monitor == "dice") return r.report.dice_score;
  if (monitor == "loss") return -r.mean_loss;
  throw InvalidArgument("unknown monitor '" + monitor + "'");
}

namespace {

void set_adam_hyper(torch::optim::Optimizer& opt, double lr, double beta1, double beta2) {
  for (auto& group : opt.param_groups()) {
    auto& o = static_cast<torch::optim::AdamOptions&>(group.options());
    o.lr(lr);
    o.betas({beta1, beta2});
  }
}

std::vector<torch::Tensor> trainable_parameters(SegmentationNet& net, bool freeze_encoder) {
  std::vector<torch::Tensor> params;
  for (auto& p : net.named_parameters(true)) {
    const bool frozen = freeze_encoder && p.key().rfind("encoder.", 0) == 0;
    p.value().set_requires_grad(!frozen);
    if (!frozen) params.push_back(p.value());
  }
  return params;
}

std::string pr_name(const char* kind, double threshold) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "pr_%s@%.2f", kind, threshold);
  return buf;
}

}  // namespace

FitResult fit(SegmentationNet& net, const DataSource& train, const DataSource& val, const TrainConfig& config,
              const FitOptions& options) {
  config.validate();
  if (train.size() == 0) throw InvalidArgument("fit: training data is empty");
  if (val.size() == 0) throw InvalidArgument("fit: validation data is empty");
  fs::create_directories(options.run_dir);

  auto params = trainable_parameters(net, config.freeze_encoder);
  torch::optim::Adam optimizer(params, torch::optim::AdamOptions(config.lr)
                                           .betas({config.betas[0], config.betas[1]})
                                           .weight_decay(config.weight_decay));

  const auto bs = static_cast<std::size_t>(config.batch_size);
  const auto batches_per_epoch = static_cast<int64_t>((train.size() + bs - 1) / bs);
  const int64_t total_steps = batches_per_epoch * config.epochs;
  if (config.schedule == ScheduleKind::one_cycle && total_steps < 2) {
    throw InvalidArgument("one_cycle schedule needs at least 2 optimizer steps");
  }

  FitResult result;
  result.metric_name = config.monitor;
  result.event_log = options.run_dir / "events.csv";
  double best = -std::numeric_limits<double>::infinity();
  int start_epoch = 1;
  int64_t global_step = 0;
  std::vector<MetricEvent> prior;

  if (options.resume_from) {
    const auto meta = load_checkpoint(*options.resume_from, net, &optimizer);
    if (!options.val_ids.empty() && meta.val_ids != options.val_ids) {
      throw InvalidArgument("resume: validation membership differs from the checkpoint's");
    }
    if (meta.metric_name != config.monitor) {
      throw InvalidArgument("resume: checkpoint monitors " + meta.metric_name + ", config monitors " + config.monitor);
    }
    start_epoch = meta.epoch + 1;
    global_step = meta.global_step;
    best = meta.metric_name == "loss" ? -meta.metric_value : meta.metric_value;
    result.best_checkpoint = *options.resume_from;
    result.best_metric = meta.metric_value;
    result.best_epoch = meta.epoch;
    if (fs::exists(result.event_log)) {
      for (auto& e : EventLog::read(result.event_log)) {
        if (e.step <= global_step) prior.push_back(std::move(e));
      }
    }
    log_info("resuming from " + options.resume_from->string() + " at epoch " + std::to_string(start_epoch));
  } else {
    // Dropout draws from torch's global generator; a resumed run restores it
    // from the checkpoint instead.
    torch::manual_seed(config.seed);
  }

  EventLog log(result.event_log, config.record_wall_time, std::move(prior));
  EvalOptions eval_options;
  eval_options.batch_size = config.eval_batch_size;
  eval_options.max_samples = config.max_samples;
  eval_options.normalization = options.normalization;

  for (int epoch = start_epoch; epoch <= config.epochs; ++epoch) {
    net.train();
    const auto order = epoch_order(train.size(), config.seed, epoch);
    ConfusionCounts train_counts;
    double loss_sum = 0;
    for (int64_t b = 0; b < batches_per_epoch; ++b) {
      const auto begin = static_cast<std::size_t>(b) * bs;
      const auto count = std::min(bs, order.size() - begin);
      auto batch = collate(train, std::span(order).subspan(begin, count));

      ScheduleValue sched{config.lr, config.betas[0]};
      if (config.schedule == ScheduleKind::one_cycle) sched = one_cycle(global_step, total_steps, config.one_cycle);
      set_adam_hyper(optimizer, sched.lr, sched.momentum, config.betas[1]);

      auto probs = forward(net, batch.images);
      const auto weights = resolve_weights(config.loss, batch.targets);
      auto loss = compute_loss(config.loss, probs, batch.targets, weights);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        nlohmann::json dump = {{"epoch", epoch}, {"batch", b}, {"global_step", global_step},
                               {"lr", sched.lr}, {"loss", value}, {"ids", batch.ids}};
        std::ofstream(options.run_dir / "divergence.json") << dump.dump(2) << "\n";
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                   ", lr " + format_double(sched.lr),
                               epoch, b, sched.lr);
      }
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();

      {
        torch::NoGradGuard guard;
        const auto pred = (probs.select(1, 1) > probs.select(1, 0)).to(torch::kUInt8).contiguous();
        const auto target = batch.targets.to(torch::kUInt8).contiguous();
        train_counts += confusion(std::span<const std::uint8_t>(pred.data_ptr<std::uint8_t>(), pred.numel()),
                                  std::span<const std::uint8_t>(target.data_ptr<std::uint8_t>(), target.numel()));
      }
      loss_sum += value * static_cast<double>(count);
      log.add(global_step, "train", "batch_loss", value);
      log.add(global_step, "train", "lr", sched.lr);
      log.add(global_step, "train", "momentum", sched.momentum);
      ++global_step;
    }
    const auto train_report = scores(train_counts);
    write_report_events(log, global_step, "train", loss_sum / static_cast<double>(train.size()), train_report);

    const auto v = evaluate(net, val, config.loss, eval_options);
    write_report_events(log, global_step, "val", v.mean_loss, v.report);
    for (const auto& p : v.pr) {
      log.add(global_step, "val", pr_name("precision", p.threshold), p.precision);
      log.add(global_step, "val", pr_name("recall", p.threshold), p.recall);
    }
    write_sample_triples(options.run_dir / "samples", v.samples);

    const double score = monitor_score(config.monitor, v);
    char line[256];
    std::snprintf(line, sizeof line, "epoch %d/%d: train loss %.4f, val loss %.4f, val %s %.4f", epoch, config.epochs,
                  loss_sum / static_cast<double>(train.size()), v.mean_loss, config.monitor.c_str(),
                  config.monitor == "loss" ? v.mean_loss : score);
    log_info(line);
    if (score > best) {
      best = score;
      CheckpointMeta meta;
      meta.epoch = epoch;
      meta.global_step = global_step;
      meta.metric_name = config.monitor;
      meta.metric_value = config.monitor == "loss" ? v.mean_loss : score;
      meta.model_json = model_config_to_json(net.config()).dump();
      meta.config_json = options.config_json;
      meta.val_ids = options.val_ids;
      const auto path = options.run_dir / ("ckpt_epoch_" + std::to_string(epoch) + ".pt");
      save_checkpoint(path, net, &optimizer, meta);
      result.checkpoints.push_back(path);
      result.best_checkpoint = path;
      result.best_metric = meta.metric_value;
      result.best_epoch = epoch;
    }
    log.flush();
    ++result.epochs_run;
  }
  result.global_step = global_step;
  return result;
}

// ---------------------------------------------------------------------------
// LR finder

LrFindResult lr_sweep(const LrFindConfig& config, const LrStep& step) {
  if (!(config.min_lr > 0 && config.min_lr < config.max_lr)) {
    throw InvalidArgument("lr_find needs 0 < min_lr < max_lr");
  }
  if (config.steps < 10) throw InvalidArgument("lr_find needs at least 10 steps");
  if (!(config.smoothing >= 0 && config.smoothing < 1)) throw InvalidArgument("lr_find smoothing must lie in [0, 1)");

  LrFindResult r;
  double avg = 0;
  double best = std::numeric_limits<double>::infinity();
  const double ratio = config.max_lr / config.min_lr;
  for (int i = 0; i < config.steps; ++i) {
    const double lr = config.min_lr * std::pow(ratio, static_cast<double>(i) / (config.steps - 1));
    const double loss = step(lr);
    if (!std::isfinite(loss)) {
      if (i == 0) {
        throw InvalidArgument("lr_find diverged on the first step at lr " + format_double(lr) +
                              "; choose a smaller min_lr");
      }
      r.stopped_early = true;
      break;
    }
    avg = config.smoothing * avg + (1 - config.smoothing) * loss;
    const double smoothed = avg / (1 - std::pow(config.smoothing, i + 1));
    if (i > 0 && smoothed > config.divergence_factor * best) {
      r.stopped_early = true;
      break;
    }
    best = std::min(best, smoothed);
    r.lrs.push_back(lr);
    r.losses.push_back(loss);
    r.smoothed.push_back(smoothed);
  }
  r.suggestion = r.lrs.front();
  double steepest = std::numeric_limits<double>::infinity();
  std::size_t first = static_cast<std::size_t>(std::max(0, config.skip_start));
  std::size_t last = r.lrs.size() - 1;  // one past the last segment start
  last = last > static_cast<std::size_t>(std::max(0, config.skip_end)) ? last - std::max(0, config.skip_end) : 0;
  if (first >= last) {
    first = 0;
    last = r.lrs.size() - 1;
  }
  for (std::size_t i = first; i < last; ++i) {
    const double slope = (r.smoothed[i + 1] - r.smoothed[i]) / (std::log(r.lrs[i + 1]) - std::log(r.lrs[i]));
    if (slope < steepest) {
      steepest = slope;
      r.suggestion = r.lrs[i];
    }
  }
  return r;
}

LrFindResult lr_find(SegmentationNet& net, const DataSource& data, const TrainConfig& train,
                     const LrFindConfig& config) {
  if (data.size() == 0) throw InvalidArgument("lr_find: empty data");
  // Work on the live module but put every tensor (and the RNG) back afterwards,
  // which is indistinguishable from sweeping a throwaway copy.
  std::vector<torch::Tensor> snapshot;
  {
    torch::NoGradGuard guard;
    for (auto& p : net.parameters(true)) snapshot.push_back(p.detach().clone());
    for (auto& b : net.buffers(true)) snapshot.push_back(b.detach().clone());
  }
  auto rng = at::detail::getDefaultCPUGenerator().get_state();
  ModeGuard mode(net);

  auto params = trainable_parameters(net, train.freeze_encoder);
  torch::optim::Adam optimizer(params, torch::optim::AdamOptions(config.min_lr)
                                           .betas({train.betas[0], train.betas[1]})
                                           .weight_decay(train.weight_decay));
  const auto bs = static_cast<std::size_t>(train.batch_size);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  int pass = 0;
  net.train();
  auto step = [&](double lr) {
    if (cursor >= order.size()) {
      order = epoch_order(data.size(), train.seed, -1 - pass++);
      cursor = 0;
    }
    const auto count = std::min(bs, order.size() - cursor);
    auto batch = collate(data, std::span(order).subspan(cursor, count));
    cursor += count;
    set_adam_hyper(optimizer, lr, train.betas[0], train.betas[1]);
    auto probs = forward(net, batch.images);
    auto loss = compute_loss(train.loss, probs, batch.targets, resolve_weights(train.loss, batch.targets));
    const double value = loss.item<double>();
    if (std::isfinite(value)) {
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
    }
    return value;
  };

  auto restore = [&] {
    torch::NoGradGuard guard;
    std::size_t k = 0;
    for (auto& p : net.parameters(true)) p.detach().copy_(snapshot[k++]);
    for (auto& b : net.buffers(true)) b.detach().copy_(snapshot[k++]);
    auto gen = at::detail::getDefaultCPUGenerator();
    gen.set_state(rng);
  };
  LrFindResult result;
  try {
    result = lr_sweep(config, step);
  } catch (...) {
    restore();
    throw;
  }
  restore();
  for (auto& p : net.parameters(true)) p.set_requires_grad(true);
  return result;
}

}  // namespace bfx
