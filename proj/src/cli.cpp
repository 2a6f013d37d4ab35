#include "bfx/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <sstream>

#include "bfx/config.hpp"
#include "bfx/error.hpp"
#include "bfx/fusion.hpp"
#include "bfx/hashing.hpp"
#include "bfx/log.hpp"
#include "bfx/pipeline.hpp"
#include "bfx/plot.hpp"
#include "bfx/static_map.hpp"
#include "bfx/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bfx {

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Collects what a command read, wrote and failed on; written once at the end.
class Manifest {
 public:
  Manifest(std::string command, fs::path out) : out_(std::move(out)) {
    doc_["command"] = std::move(command);
    doc_["started_at"] = utc_now();
    doc_["inputs"] = json::array();
    doc_["outputs"] = json::array();
    doc_["failures"] = json::array();
    doc_["config_path"] = nullptr;
    doc_["config"] = nullptr;
  }

  void config(const fs::path& path, const json& resolved) {
    if (!path.empty()) doc_["config_path"] = path.string();
    doc_["config"] = resolved;
  }
  void args(const json& a) { doc_["args"] = a; }
  void input(const fs::path& p) { doc_["inputs"].push_back(p.string()); }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void failure(const std::string& what) { doc_["failures"].push_back(what); }
  void set_out(fs::path out) { out_ = std::move(out); }
  void note(const std::string& key, json value) { doc_["summary"][key] = std::move(value); }
  bool ok() const { return doc_["failures"].empty(); }

  int finish() {
    doc_["finished_at"] = utc_now();
    for (const auto& p : outputs_) {
      json entry = {{"path", p.string()}};
      std::error_code ec;
      if (fs::is_regular_file(p, ec)) entry["sha256"] = to_hex(sha256_file(p));
      doc_["outputs"].push_back(entry);
    }
    doc_["ok"] = ok();
    fs::create_directories(out_);
    const auto path = out_ / "manifest.json";
    std::ofstream(path) << doc_.dump(2) << "\n";
    return ok() ? 0 : 1;
  }

 private:
  json doc_;
  fs::path out_;
  std::vector<fs::path> outputs_;
};

/// Runs `body`, turning any exception into a manifest failure.
template <typename F>
int guarded(Manifest& manifest, F&& body) {
  try {
    body();
  } catch (const ConfigError& e) {
    for (const auto& p : e.problems()) {
      manifest.failure("config: " + p);
      log_error("config: " + p);
    }
  } catch (const c10::Error& e) {
    manifest.failure(e.what_without_backtrace());
    log_error(e.what_without_backtrace());
  } catch (const std::exception& e) {
    manifest.failure(e.what());
    log_error(e.what());
  }
  return manifest.finish();
}

void write_json(const fs::path& path, const json& j, Manifest& manifest) {
  fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
  manifest.output(path);
}

void write_png(const fs::path& path, const cv::Mat& bgr, Manifest& manifest) {
  fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write " + path.string());
  manifest.output(path);
}

json report_json(const EvalResult& r) {
  json pr = json::array();
  for (const auto& p : r.pr) pr.push_back({{"threshold", p.threshold}, {"precision", p.precision}, {"recall", p.recall}});
  return {{"accuracy", r.report.accuracy},
          {"iou", r.report.iou},
          {"f1", r.report.f1},
          {"dice_score", r.report.dice_score},
          {"precision", r.report.precision},
          {"recall", r.report.recall},
          {"loss", r.mean_loss},
          {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}},
          {"pr_points", pr}};
}

cv::Mat pr_plot(const std::vector<PlotSeries>& series, const std::string& title) {
  return render_line_plot(series, {title, "recall", "precision"});
}

cv::Mat read_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

fs::path latest_checkpoint(const fs::path& dir) {
  static const std::regex pattern(R"(ckpt_epoch_(\d+)\.pt)");
  fs::path best;
  long best_epoch = -1;
  if (!fs::is_directory(dir)) return best;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = e.path().filename().string();
    if (std::regex_match(name, m, pattern) && std::stol(m[1]) > best_epoch) {
      best_epoch = std::stol(m[1]);
      best = e.path();
    }
  }
  return best;
}

RunConfig config_from_checkpoint(const CheckpointMeta& meta) {
  if (meta.config_json.empty() || meta.config_json == "{}") throw ConfigError("checkpoint carries no run config");
  return parse_run_config(json::parse(meta.config_json));
}

// ---------------------------------------------------------------------------
// prepare

struct PrepareArgs {
  std::string config;
  std::string root;
  std::string cache_dir;
  std::string mode;
  std::optional<int> count;
  std::optional<std::uint64_t> seed;
  std::optional<int> patch_size;
  std::optional<int> tile_size;
  std::optional<int> resize_to;
  std::string out;
};

DataConfig data_from_args(const std::string& config_path, const std::string& root, const std::string& cache_dir,
                          Manifest& manifest) {
  DataConfig data;
  if (!config_path.empty()) {
    const auto rc = load_run_config(config_path);
    manifest.config(config_path, to_json(rc));
    data = rc.data;
  }
  if (!root.empty()) data.root = root;
  if (!cache_dir.empty()) data.cache_dir = cache_dir;
  std::vector<std::string> problems;
  if (data.root.empty()) problems.push_back("data root is required (--root or data.root)");
  if (data.cache_dir.empty()) problems.push_back("cache directory is required (--cache-dir or data.cache_dir)");
  if (!problems.empty()) throw ConfigError(problems);
  return data;
}

int cmd_prepare(const PrepareArgs& a) {
  const fs::path out = !a.out.empty() ? fs::path(a.out) : fs::path(a.cache_dir.empty() ? "." : a.cache_dir);
  Manifest manifest("prepare", out);
  return guarded(manifest, [&] {
    auto data = data_from_args(a.config, a.root, a.cache_dir, manifest);
    if (a.out.empty()) manifest.set_out(data.cache_dir);
    if (!a.mode.empty()) {
      if (a.mode == "patches") {
        data.sampling = SamplingMode::patches;
      } else if (a.mode == "tiles") {
        data.sampling = SamplingMode::tiles;
      } else {
        throw ConfigError("--mode must be patches or tiles");
      }
    }
    if (a.count) data.patch_count = *a.count;
    if (a.seed) data.seed = *a.seed;
    if (a.patch_size) data.patch_size = *a.patch_size;
    if (a.tile_size) data.tile_size = *a.tile_size;
    if (a.resize_to) data.resize_to = *a.resize_to;
    manifest.args({{"root", data.root.string()},
                   {"cache_dir", data.cache_dir.string()},
                   {"mode", to_string(data.sampling)},
                   {"count", data.patch_count},
                   {"seed", data.seed},
                   {"patch_size", data.patch_size},
                   {"tile_size", data.tile_size},
                   {"resize_to", data.resize_to}});

    const auto index = load_dataset_index(data.root);
    for (const auto& r : index.rejected) manifest.failure("rejected " + r.scene_id + ": " + r.reason);
    SampleCache cache(data.cache_dir);
    PrepareCounts total;
    json scenes = json::array();
    for (const auto& scene : index.samples) {
      manifest.input(scene.image_path);
      if (!scene.mask_path.empty()) manifest.input(scene.mask_path);
      try {
        const auto c = prepare_scene(data, cache, scene);
        total.planned += c.planned;
        total.written += c.written;
        total.existing += c.existing;
        scenes.push_back({{"scene_id", scene.scene_id}, {"planned", c.planned}, {"written", c.written},
                          {"existing", c.existing}});
      } catch (const std::exception& e) {
        manifest.failure(scene.scene_id + ": " + e.what());
      }
    }
    manifest.output(data.cache_dir);
    manifest.note("scenes", scenes);
    manifest.note("planned_entries", total.planned);
    manifest.note("new_entries", total.written);
    manifest.note("existing_entries", total.existing);
    log_info("prepare: " + std::to_string(total.written) + " new, " + std::to_string(total.existing) +
             " existing cache entries");
  });
}

// ---------------------------------------------------------------------------
// stats

int cmd_stats(const std::string& config, const std::string& root, std::optional<double> beta, const std::string& out) {
  Manifest manifest("stats", out);
  return guarded(manifest, [&] {
    DataConfig data;
    const bool train_only = !config.empty();
    if (train_only) {
      const auto rc = load_run_config(config);
      manifest.config(config, to_json(rc));
      data = rc.data;
    }
    if (!root.empty()) data.root = root;
    if (data.root.empty()) throw ConfigError("data root is required (--root or --config)");
    if (beta) data.class_beta = *beta;
    const auto index = load_dataset_index(data.root);
    std::vector<SampleDescriptor> scenes;
    if (train_only) {
      scenes = split_scenes(data, index).train;
    } else {
      for (const auto& s : index.samples) {
        if (!s.test_only) scenes.push_back(s);
      }
    }
    if (scenes.empty()) throw InvalidArgument("no labelled scenes under " + data.root.string());
    for (const auto& s : scenes) manifest.input(s.mask_path);
    const auto stats = class_stats_from_counts(count_classes(scenes), data.class_beta);
    const json j = {{"scenes", scenes.size()},
                    {"subset", train_only ? "train" : "all"},
                    {"beta", stats.beta},
                    {"pixel_count", {{"background", stats.pixel_count[0]}, {"building", stats.pixel_count[1]}}},
                    {"fraction", {{"background", stats.fraction[0]}, {"building", stats.fraction[1]}}},
                    {"effective_number",
                     {{"background", stats.effective_number[0]}, {"building", stats.effective_number[1]}}},
                    {"weight", {{"background", stats.weight[0]}, {"building", stats.weight[1]}}}};
    write_json(fs::path(out) / "stats.json", j, manifest);
    std::cout << j.dump(2) << "\n";
  });
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out;
  bool resume = false;
  std::string resume_path;
  std::optional<int> epochs;
};

std::vector<std::string> scene_ids(const std::vector<SampleDescriptor>& scenes) {
  std::vector<std::string> ids;
  for (const auto& s : scenes) ids.push_back(s.scene_id);
  return ids;
}

void apply_class_stats(RunConfig& rc, const std::vector<SampleDescriptor>& train, Manifest& manifest) {
  if (rc.train.loss.weight_source != WeightSource::class_stats) return;
  const auto stats = class_stats_from_counts(count_classes(train), rc.data.class_beta);
  if (!(stats.weight[0] > 0 && stats.weight[1] > 0)) {
    throw InvalidArgument("class_stats weighting needs both classes present in the training scenes");
  }
  rc.train.loss.weights = stats.weight;
  manifest.note("class_weights", stats.weight);
}

void write_lr_find(const fs::path& dir, const LrFindResult& r, Manifest& manifest) {
  fs::create_directories(dir);
  const auto csv = dir / "lr_find.csv";
  {
    std::ofstream out(csv);
    out << "lr,loss,smoothed\n" << std::setprecision(17);
    for (std::size_t i = 0; i < r.lrs.size(); ++i) out << r.lrs[i] << ',' << r.losses[i] << ',' << r.smoothed[i] << '\n';
  }
  manifest.output(csv);
  write_json(dir / "lr_find.json",
             {{"suggestion", r.suggestion}, {"points", r.lrs.size()}, {"stopped_early", r.stopped_early}}, manifest);
  PlotSeries s{"smoothed loss", {}, r.smoothed};
  for (double lr : r.lrs) s.x.push_back(std::log10(lr));
  write_png(dir / "lr_find.png", render_line_plot({s}, {"LR finder", "log10(lr)", "loss"}), manifest);
}

int cmd_train(const TrainArgs& a) {
  RunConfig rc;
  try {
    rc = load_run_config(a.config);
  } catch (const std::exception& e) {
    if (a.out.empty()) {
      if (const auto* ce = dynamic_cast<const ConfigError*>(&e)) {
        for (const auto& p : ce->problems()) log_error("config: " + p);
      } else {
        log_error(e.what());
      }
      return 1;
    }
    Manifest manifest("train", a.out);
    return guarded(manifest, [&] { throw; });
  }
  if (a.epochs) rc.train.epochs = *a.epochs;
  const fs::path out = (a.out.empty() ? rc.output_dir / rc.name : fs::path(a.out)).lexically_normal();
  Manifest manifest("train", out);
  manifest.config(a.config, to_json(rc));
  return guarded(manifest, [&] {
    rc.train.validate();
    std::optional<fs::path> resume;
    if (a.resume) {
      resume = a.resume_path.empty() ? latest_checkpoint(out) : fs::path(a.resume_path);
      if (resume->empty() || !fs::exists(*resume)) {
        throw IoError("--resume: no checkpoint found" + (resume->empty() ? " in " + out.string() : " at " + resume->string()));
      }
      manifest.input(*resume);
    }
    const auto index = load_dataset_index(rc.data.root);
    const auto split = split_scenes(rc.data, index);
    if (split.train.empty() || split.val.empty()) throw InvalidArgument("split left the train or validation set empty");
    for (const auto& s : index.samples) manifest.input(s.image_path);
    apply_class_stats(rc, split.train, manifest);
    const auto train_src = make_source(rc.data, split.train);
    const auto val_src = make_source(rc.data, split.val);
    write_json(out / "split.json", {{"train", scene_ids(split.train)}, {"val", scene_ids(split.val)}}, manifest);

    auto net = build_model(rc.model);
    if (rc.lr_find && !resume) {
      const auto r = lr_find(*net, train_src, rc.train, rc.lr_find_config);
      write_lr_find(out, r, manifest);
      rc.train.one_cycle.max_lr = r.suggestion;
      manifest.note("lr_find_suggestion", r.suggestion);
      log_info("lr_find suggestion " + std::to_string(r.suggestion));
    }
    FitOptions options;
    options.run_dir = out;
    options.resume_from = resume;
    options.config_json = to_json(rc).dump();
    options.val_ids = scene_ids(split.val);
    options.normalization = rc.data.normalization;
    const auto result = fit(*net, train_src, val_src, rc.train, options);

    manifest.output(result.event_log);
    for (const auto& c : result.checkpoints) manifest.output(c);
    manifest.note("best_checkpoint", result.best_checkpoint.string());
    manifest.note("metric", result.metric_name);
    manifest.note("best_metric", result.best_metric);
    manifest.note("best_epoch", result.best_epoch);
    manifest.note("epochs_run", result.epochs_run);
    write_json(out / "summary.json",
               {{"best_checkpoint", result.best_checkpoint.string()},
                {"metric", result.metric_name},
                {"best_metric", result.best_metric},
                {"best_epoch", result.best_epoch},
                {"global_step", result.global_step}},
               manifest);
    std::cout << "best val " << result.metric_name << " " << result.best_metric << " at epoch " << result.best_epoch
              << ": " << result.best_checkpoint.string() << "\n";
  });
}

// ---------------------------------------------------------------------------
// evaluate

int cmd_evaluate(const std::string& checkpoint, const std::string& config, const std::string& split_name,
                 int max_samples, const std::string& out) {
  Manifest manifest("evaluate", out);
  return guarded(manifest, [&] {
    manifest.input(checkpoint);
    const auto meta = read_checkpoint_meta(checkpoint);
    RunConfig rc = config.empty() ? config_from_checkpoint(meta) : load_run_config(config);
    manifest.config(config, to_json(rc));
    auto net = load_model_from_checkpoint(checkpoint);
    if (net->config().variant != rc.model.variant) {
      throw InvalidArgument("checkpoint variant " + to_string(net->config().variant) + " does not match config variant " +
                            to_string(rc.model.variant));
    }
    const auto index = load_dataset_index(rc.data.root);
    const auto split = split_scenes(rc.data, index);
    std::vector<SampleDescriptor> scenes;
    if (split_name == "val") {
      scenes = split.val;
    } else if (split_name == "train") {
      scenes = split.train;
    } else if (split_name == "all") {
      scenes = split.train;
      scenes.insert(scenes.end(), split.val.begin(), split.val.end());
    } else {
      throw ConfigError("--split must be val, train or all");
    }
    apply_class_stats(rc, split.train, manifest);
    const auto src = make_source(rc.data, scenes);
    EvalOptions options;
    options.batch_size = rc.train.eval_batch_size;
    options.max_samples = max_samples;
    options.normalization = rc.data.normalization;
    const auto r = evaluate(*net, src, rc.train.loss, options);
    write_json(fs::path(out) / "metrics.json", report_json(r), manifest);
    for (const auto& p : write_sample_triples(fs::path(out) / "samples", r.samples)) manifest.output(p);
    PlotSeries s{split_name, {}, {}};
    for (const auto& p : r.pr) {
      s.x.push_back(p.recall);
      s.y.push_back(p.precision);
    }
    write_png(fs::path(out) / "pr_curve.png", pr_plot({s}, "precision-recall (" + split_name + ")"), manifest);
    manifest.note("iou", r.report.iou);
    manifest.note("accuracy", r.report.accuracy);
    std::cout << report_json(r).dump(2) << "\n";
  });
}

// ---------------------------------------------------------------------------
// lr-find

int cmd_lr_find(const std::string& config, std::optional<double> min_lr, std::optional<double> max_lr,
                std::optional<int> steps, const std::string& out) {
  Manifest manifest("lr-find", out);
  return guarded(manifest, [&] {
    auto rc = load_run_config(config);
    if (min_lr) rc.lr_find_config.min_lr = *min_lr;
    if (max_lr) rc.lr_find_config.max_lr = *max_lr;
    if (steps) rc.lr_find_config.steps = *steps;
    manifest.config(config, to_json(rc));
    const auto split = split_scenes(rc.data, load_dataset_index(rc.data.root));
    apply_class_stats(rc, split.train, manifest);
    const auto src = make_source(rc.data, split.train);
    auto net = build_model(rc.model);
    const auto r = lr_find(*net, src, rc.train, rc.lr_find_config);
    write_lr_find(out, r, manifest);
    manifest.note("suggestion", r.suggestion);
    std::cout << "suggested lr " << r.suggestion << "\n";
  });
}

// ---------------------------------------------------------------------------
// predict

int cmd_predict(const std::string& checkpoint, const std::vector<std::string>& scenes, const std::string& config,
                const std::string& model_id, std::optional<int> tile_size, std::optional<int> resize_to,
                const std::string& out) {
  Manifest manifest("predict", out);
  return guarded(manifest, [&] {
    manifest.input(checkpoint);
    const auto meta = read_checkpoint_meta(checkpoint);
    RunConfig rc = config.empty() ? config_from_checkpoint(meta) : load_run_config(config);
    manifest.config(config, to_json(rc));
    auto net = load_model_from_checkpoint(checkpoint);
    if (net->config().variant != rc.model.variant) {
      throw InvalidArgument("checkpoint holds a " + to_string(net->config().variant) + " model but the config names " +
                            to_string(rc.model.variant));
    }
    auto predict = rc.predict;
    if (tile_size) predict.tile_size = *tile_size;
    if (resize_to) predict.resize_to = *resize_to;
    manifest.args({{"tile_size", predict.tile_size}, {"resize_to", predict.resize_to}});
    const auto id = model_id.empty() ? rc.name : model_id;
    json written = json::array();
    for (const auto& scene_path : scenes) {
      manifest.input(scene_path);
      try {
        const auto rgb = read_rgb(scene_path);
        const auto probs = predict_scene(*net, rgb, predict, rc.data.normalization);
        const auto scene_id = fs::path(scene_path).stem().string();
        const auto stem = fs::path(out) / scene_id;
        for (const auto& p : write_probability_mask(stem, probs, {id, scene_id})) manifest.output(p);
        cv::Mat argmax = probs.building() > 0.5F;
        write_png(fs::path(out) / (scene_id + "_argmax.png"), argmax, manifest);
        written.push_back(scene_id);
      } catch (const std::exception& e) {
        manifest.failure(scene_path + ": " + e.what());
      }
    }
    manifest.note("scenes", written);
  });
}

// ---------------------------------------------------------------------------
// ensemble

struct EnsembleArgs {
  std::vector<std::string> inputs;
  double threshold = 0.75;
  bool allow_single = false;
  std::string fuse;
  std::string image;
  double overlap_tau = 0.5;
  int n_segments = 100;
  double compactness = 10.0;
  bool polygonize = false;
  double simplify_tol = 1.0;
  int min_area = kDefaultMinPolygonArea;
  std::string name;
  std::string out;
};

int cmd_ensemble(const EnsembleArgs& a) {
  Manifest manifest("ensemble", a.out);
  return guarded(manifest, [&] {
    manifest.args({{"inputs", a.inputs}, {"threshold", a.threshold}, {"allow_single", a.allow_single},
                   {"fuse_superpixels", a.fuse}, {"image", a.image}, {"overlap_tau", a.overlap_tau},
                   {"polygonize", a.polygonize}, {"simplify_tol", a.simplify_tol}, {"min_area", a.min_area}});
    if (a.inputs.empty()) throw ConfigError("--inputs needs at least one probability raster");
    if (a.inputs.size() < 2 && !a.allow_single) {
      throw ConfigError("ensemble needs at least 2 inputs (pass --allow-single to accept one)");
    }
    if (!(a.threshold > 0.5 && a.threshold <= 1)) throw ConfigError("--threshold must lie in (0.5, 1]");
    std::vector<ProbabilityMask> masks;
    std::vector<std::string> members;
    std::string scene_id;
    for (const auto& in : a.inputs) {
      manifest.input(in);
      auto loaded = read_probability_mask(in);
      if (!masks.empty() && loaded.mask.size() != masks.front().size()) {
        throw InvalidArgument("input " + in + " is " + std::to_string(loaded.mask.rows()) + "x" +
                              std::to_string(loaded.mask.cols()) + " but " + a.inputs.front() + " is " +
                              std::to_string(masks.front().rows()) + "x" + std::to_string(masks.front().cols()));
      }
      if (scene_id.empty()) scene_id = loaded.info.scene_id;
      members.push_back(loaded.info.model_id);
      masks.push_back(std::move(loaded.mask));
    }
    const auto stem = a.name.empty() ? (scene_id.empty() ? std::string("ensemble") : scene_id) : a.name;
    const fs::path out(a.out);
    const auto merged = ensemble_merge(masks);
    for (const auto& p : write_probability_mask(out / (stem + "_merged"), merged, {"ensemble", scene_id})) {
      manifest.output(p);
    }
    cv::Mat final_mask = confidence_threshold(merged, a.threshold);
    const auto thresholded_path = out / (stem + "_mask.png");
    write_binary_png(thresholded_path, final_mask);
    manifest.output(thresholded_path);

    if (!a.fuse.empty()) {
      if (a.image.empty()) throw ConfigError("--fuse-superpixels needs --image");
      manifest.input(a.image);
      const auto rgb = read_rgb(a.image);
      if (rgb.size() != merged.size()) throw InvalidArgument("--image size does not match the probability rasters");
      SegmentParams params;
      params.n_segments = a.n_segments;
      params.compactness = a.compactness;
      params.marker_mask = final_mask;
      const auto labels = classical_segment(rgb, segment_method_from_string(a.fuse), params);
      final_mask = superpixel_fuse(final_mask, labels, a.overlap_tau);
      const auto fused_path = out / (stem + "_fused.png");
      write_binary_png(fused_path, final_mask);
      manifest.output(fused_path);
    }
    if (a.polygonize) {
      const auto polygons = polygonize(final_mask, a.simplify_tol, a.min_area);
      const auto path = out / (stem + "_polygons.geojson");
      std::ofstream(path) << polygons_to_geojson(polygons) << "\n";
      manifest.output(path);
      manifest.note("polygons", polygons.size());
    }
    manifest.note("members", members);
    manifest.note("building_pixels", cv::countNonZero(final_mask));
  });
}

// ---------------------------------------------------------------------------
// report

struct RunEvents {
  std::string name;
  std::vector<MetricEvent> events;
};

bool is_epoch_metric(const std::string& name) {
  return name == "loss" || name == "accuracy" || name == "iou" || name == "f1" || name == "dice";
}

int cmd_report(const std::vector<std::string>& runs_args, const std::string& out) {
  Manifest manifest("report", out);
  return guarded(manifest, [&] {
    std::vector<RunEvents> runs;
    for (const auto& r : runs_args) {
      const fs::path dir(r);
      if (fs::exists(dir / "events.csv")) {
        runs.push_back({dir.filename().string(), EventLog::read(dir / "events.csv")});
        manifest.input(dir / "events.csv");
        continue;
      }
      if (!fs::is_directory(dir)) throw IoError("run directory " + dir.string() + " does not exist");
      std::vector<fs::path> subdirs;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && fs::exists(e.path() / "events.csv")) subdirs.push_back(e.path());
      }
      std::sort(subdirs.begin(), subdirs.end());
      for (const auto& s : subdirs) {
        runs.push_back({s.filename().string(), EventLog::read(s / "events.csv")});
        manifest.input(s / "events.csv");
      }
    }
    if (runs.empty()) throw InvalidArgument("no event logs found under the given run directories");

    const fs::path outdir(out);
    fs::create_directories(outdir);
    const auto csv_path = outdir / "metrics.csv";
    std::ofstream csv(csv_path);
    csv << "run,split,epoch,step,name,value\n" << std::setprecision(17);
    json summary = json::object();
    std::map<std::string, std::vector<PlotSeries>> curves;  // metric -> series
    for (const auto& run : runs) {
      std::map<std::pair<std::string, std::string>, std::vector<const MetricEvent*>> by_key;
      for (const auto& e : run.events) {
        if (is_epoch_metric(e.name)) by_key[{e.split, e.name}].push_back(&e);
      }
      json rs = json::object();
      for (auto& [key, events] : by_key) {
        std::stable_sort(events.begin(), events.end(), [](auto* x, auto* y) { return x->step < y->step; });
        PlotSeries s{run.name + " " + key.first, {}, {}};
        for (std::size_t i = 0; i < events.size(); ++i) {
          csv << run.name << ',' << key.first << ',' << i + 1 << ',' << events[i]->step << ',' << key.second << ','
              << events[i]->value << '\n';
          s.x.push_back(static_cast<double>(i + 1));
          s.y.push_back(events[i]->value);
        }
        const bool lower_better = key.second == "loss";
        const auto best = lower_better ? *std::min_element(s.y.begin(), s.y.end())
                                       : *std::max_element(s.y.begin(), s.y.end());
        rs[key.first][key.second] = {{"points", s.y.size()}, {"final", s.y.back()}, {"best", best}};
        curves[key.second].push_back(std::move(s));
      }
      // Precision-recall from the last validation step that logged it.
      int64_t last_step = -1;
      for (const auto& e : run.events) {
        if (e.split == "val" && e.name.rfind("pr_precision@", 0) == 0) last_step = std::max(last_step, e.step);
      }
      if (last_step >= 0) {
        std::map<std::string, std::pair<double, double>> points;
        for (const auto& e : run.events) {
          if (e.step != last_step || e.split != "val") continue;
          if (e.name.rfind("pr_precision@", 0) == 0) points[e.name.substr(13)].first = e.value;
          if (e.name.rfind("pr_recall@", 0) == 0) points[e.name.substr(10)].second = e.value;
        }
        PlotSeries pr{run.name, {}, {}};
        for (const auto& [_, pv] : points) {
          pr.x.push_back(pv.second);
          pr.y.push_back(pv.first);
        }
        write_png(outdir / ("pr_" + run.name + ".png"), pr_plot({pr}, "precision-recall: " + run.name), manifest);
        rs["pr_points"] = pr.x.size();
      }
      summary[run.name] = rs;
    }
    csv.close();
    manifest.output(csv_path);
    write_json(outdir / "summary.json", summary, manifest);
    for (const auto& [metric, series] : curves) {
      write_png(outdir / (metric + ".png"), render_line_plot(series, {metric + " per epoch", "epoch", metric}), manifest);
    }
    manifest.note("runs", runs.size());
  });
}

// ---------------------------------------------------------------------------
// fetch-map / synth

int cmd_fetch_map(const StaticMapRequest& request, const std::string& base_url, int attempts, const std::string& out) {
  Manifest manifest("fetch-map", out);
  return guarded(manifest, [&] {
    manifest.args({{"lat", request.lat}, {"lon", request.lon}, {"zoom", request.zoom}, {"size", request.size},
                   {"maptype", request.maptype}, {"base_url", base_url}});
    StaticMapOptions options;
    if (!base_url.empty()) options.base_url = base_url;
    options.max_attempts = attempts;
    const auto rgb = fetch_static_map(request, options);
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    write_png(fs::path(out) / "staticmap.png", bgr, manifest);
  });
}

int cmd_synth(const SynthConfig& config, const std::string& out) {
  Manifest manifest("synth", out);
  return guarded(manifest, [&] {
    manifest.args({{"scenes", config.scenes}, {"size", config.size}, {"seed", config.seed},
                   {"cities", config.cities}, {"noise_sigma", config.noise_sigma}});
    const auto ids = write_synthetic_corpus(out, config);
    for (const auto& id : ids) {
      manifest.output(fs::path(out) / "images" / (id + ".png"));
      manifest.output(fs::path(out) / "gt" / (id + ".png"));
    }
    manifest.note("scenes", ids);
  });
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Building-footprint segmentation toolkit"};
  app.require_subcommand(1);
  std::string log_level = "info";
  int threads = 0;
  app.add_option("--log-level", log_level, "debug, info, warn, error or off");
  app.add_option("--threads", threads, "torch intra-op threads (0 keeps the default)");

  // prepare
  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Populate the sample cache with patches or tiles");
  prepare->add_option("--config", prep.config, "run config (data section)");
  prepare->add_option("--root", prep.root, "dataset root with images/ and gt/");
  prepare->add_option("--cache-dir", prep.cache_dir, "sample cache directory");
  prepare->add_option("--mode", prep.mode, "patches or tiles");
  prepare->add_option("--count", prep.count, "patches per scene");
  prepare->add_option("--seed", prep.seed, "patch sampling seed");
  prepare->add_option("--patch-size", prep.patch_size, "patch output size");
  prepare->add_option("--tile-size", prep.tile_size, "tile size");
  prepare->add_option("--resize-to", prep.resize_to, "tile output size");
  prepare->add_option("--out", prep.out, "manifest directory (defaults to the cache directory)");

  // stats
  std::string stats_config, stats_root, stats_out;
  std::optional<double> stats_beta;
  auto* stats = app.add_subcommand("stats", "Class pixel statistics and effective-number weights");
  stats->add_option("--config", stats_config, "run config (uses the training split)");
  stats->add_option("--root", stats_root, "dataset root (all labelled scenes)");
  stats->add_option("--beta", stats_beta, "effective-number beta");
  stats->add_option("--out", stats_out, "output directory")->required();

  // train
  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train one model from a run config");
  train->add_option("--config", tr.config, "run config")->required();
  train->add_option("--out", tr.out, "run directory (defaults to output_dir/name)");
  train->add_option("--epochs", tr.epochs, "override train.epochs");
  auto* resume_opt = train->add_option("--resume", tr.resume_path, "resume from a checkpoint (latest in the run "
                                                                   "directory when no path is given)")
                         ->expected(0, 1);

  // evaluate
  std::string ev_ckpt, ev_config, ev_split = "val", ev_out;
  int ev_samples = 4;
  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a data split");
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  eval->add_option("--config", ev_config, "run config (defaults to the one stored in the checkpoint)");
  eval->add_option("--split", ev_split, "val, train or all");
  eval->add_option("--samples", ev_samples, "sample triples to write");
  eval->add_option("--out", ev_out, "output directory")->required();

  // lr-find
  std::string lf_config, lf_out;
  std::optional<double> lf_min, lf_max;
  std::optional<int> lf_steps;
  auto* lrf = app.add_subcommand("lr-find", "Learning-rate range test");
  lrf->add_option("--config", lf_config, "run config")->required();
  lrf->add_option("--min-lr", lf_min, "start of the sweep");
  lrf->add_option("--max-lr", lf_max, "end of the sweep");
  lrf->add_option("--steps", lf_steps, "sweep steps");
  lrf->add_option("--out", lf_out, "output directory")->required();

  // predict
  std::string pr_ckpt, pr_config, pr_model_id, pr_out;
  std::vector<std::string> pr_scenes;
  std::optional<int> pr_tile, pr_resize;
  auto* pred = app.add_subcommand("predict", "Write stitched probability rasters for whole scenes");
  pred->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
  pred->add_option("--scene", pr_scenes, "scene image(s)")->required();
  pred->add_option("--config", pr_config, "run config (defaults to the one stored in the checkpoint)");
  pred->add_option("--model-id", pr_model_id, "identifier stored in the sidecar");
  pred->add_option("--tile-size", pr_tile, "override predict.tile_size");
  pred->add_option("--resize-to", pr_resize, "override predict.resize_to");
  pred->add_option("--out", pr_out, "output directory")->required();

  // ensemble
  EnsembleArgs en;
  auto* ens = app.add_subcommand("ensemble", "Merge probability rasters by per-pixel confidence");
  ens->add_option("--inputs", en.inputs, "probability rasters (.prob, .json or stem)")->required();
  ens->add_option("--threshold", en.threshold, "building probability threshold");
  ens->add_flag("--allow-single", en.allow_single, "accept a single input");
  ens->add_option("--fuse-superpixels", en.fuse, "otsu, watershed or slic");
  ens->add_option("--image", en.image, "scene image for superpixel fusion");
  ens->add_option("--overlap-tau", en.overlap_tau, "segment overlap needed to keep it");
  ens->add_option("--n-segments", en.n_segments, "SLIC segments");
  ens->add_option("--compactness", en.compactness, "SLIC compactness");
  ens->add_flag("--polygonize", en.polygonize, "export polygons as GeoJSON");
  ens->add_option("--simplify-tol", en.simplify_tol, "Douglas-Peucker tolerance in pixels");
  ens->add_option("--min-area", en.min_area, "drop components smaller than this");
  ens->add_option("--name", en.name, "output stem (defaults to the scene id)");
  ens->add_option("--out", en.out, "output directory")->required();

  // report
  std::vector<std::string> rp_runs;
  std::string rp_out;
  auto* rep = app.add_subcommand("report", "Metric tables and static plots from event logs");
  rep->add_option("--runs", rp_runs, "run directories (or parents of run directories)")->required();
  rep->add_option("--out", rp_out, "output directory")->required();

  // fetch-map
  StaticMapRequest fm;
  std::string fm_base, fm_out;
  int fm_attempts = 3;
  auto* fetch = app.add_subcommand("fetch-map", "Download one static map image (key from STATICMAP_API_KEY)");
  fetch->add_option("--lat", fm.lat, "latitude")->required();
  fetch->add_option("--lon", fm.lon, "longitude")->required();
  fetch->add_option("--zoom", fm.zoom, "zoom level");
  fetch->add_option("--size", fm.size, "square size in pixels");
  fetch->add_option("--maptype", fm.maptype, "map type");
  fetch->add_option("--base-url", fm_base, "service base URL");
  fetch->add_option("--attempts", fm_attempts, "attempts for transient failures");
  fetch->add_option("--out", fm_out, "output directory")->required();

  // synth
  SynthConfig sy;
  std::string sy_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic rectangles corpus");
  synth->add_option("--scenes", sy.scenes, "number of scenes");
  synth->add_option("--size", sy.size, "scene side in pixels");
  synth->add_option("--seed", sy.seed, "generator seed");
  synth->add_option("--cities", sy.cities, "city names cycled over scenes")->delimiter(',');
  synth->add_option("--noise", sy.noise_sigma, "pixel noise sigma");
  synth->add_option("--out", sy_out, "corpus root")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    set_log_level(log_level);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  if (threads > 0) torch::set_num_threads(threads);

  if (*prepare) return cmd_prepare(prep);
  if (*stats) return cmd_stats(stats_config, stats_root, stats_beta, stats_out);
  if (*train) {
    tr.resume = resume_opt->count() > 0;
    return cmd_train(tr);
  }
  if (*eval) return cmd_evaluate(ev_ckpt, ev_config, ev_split, ev_samples, ev_out);
  if (*lrf) return cmd_lr_find(lf_config, lf_min, lf_max, lf_steps, lf_out);
  if (*pred) return cmd_predict(pr_ckpt, pr_scenes, pr_config, pr_model_id, pr_tile, pr_resize, pr_out);
  if (*ens) return cmd_ensemble(en);
  if (*rep) return cmd_report(rp_runs, rp_out);
  if (*fetch) return cmd_fetch_map(fm, fm_base, fm_attempts, fm_out);
  if (*synth) return cmd_synth(sy, sy_out);
  return 2;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace bfx
