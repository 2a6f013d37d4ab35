#include "bfx/config.hpp"

#include <fstream>
#include <set>

#include "bfx/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bfx {

std::string to_string(SamplingMode mode) { return mode == SamplingMode::tiles ? "tiles" : "patches"; }

namespace {

/// Reads typed fields out of one JSON object, recording problems rather than
/// throwing so a config reports everything wrong with it at once.
class Section {
 public:
  Section(const json& doc, std::string path, std::vector<std::string>& problems)
      : path_(std::move(path)), problems_(problems) {
    if (doc.is_null()) {
      obj_ = json::object();
    } else if (!doc.is_object()) {
      problems_.push_back(path_ + " must be an object");
      obj_ = json::object();
    } else {
      obj_ = doc;
    }
  }

  ~Section() {
    for (const auto& [key, _] : obj_.items()) {
      if (!seen_.contains(key)) problems_.push_back("unknown key " + qualified(key));
    }
  }

  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      problems_.push_back(qualified(key) + " has the wrong type");
    }
  }

  json child(const std::string& key) {
    seen_.insert(key);
    return obj_.contains(key) ? obj_.at(key) : json();
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename E, typename F>
  void read_enum(const std::string& key, E& out, F parse) {
    std::string s;
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    read(key, s);
    try {
      out = parse(s);
    } catch (const std::exception& e) {
      problems_.push_back(qualified(key) + ": " + e.what());
    }
  }

  void require(bool ok, const std::string& message) {
    if (!ok) problems_.push_back(path_ + "." + message);
  }

  std::string qualified(const std::string& key) const { return path_ + "." + key; }
  const std::string& path() const { return path_; }
  std::vector<std::string>& problems() { return problems_; }

 private:
  json obj_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

PadPolicy pad_policy_from_string(const std::string& s) {
  if (s == "reflect") return PadPolicy::reflect;
  if (s == "zero") return PadPolicy::zero;
  throw InvalidArgument("unknown pad policy '" + s + "'");
}

SamplingMode sampling_from_string(const std::string& s) {
  if (s == "patches") return SamplingMode::patches;
  if (s == "tiles") return SamplingMode::tiles;
  throw InvalidArgument("unknown sampling mode '" + s + "'");
}

HeadKind head_from_string(const std::string& s) {
  if (s == "softmax") return HeadKind::softmax;
  if (s == "regression") return HeadKind::regression;
  throw InvalidArgument("unknown head '" + s + "'");
}

void parse_data(const json& j, DataConfig& d, const fs::path& base, std::vector<std::string>& problems) {
  Section s(j, "data", problems);
  std::string root, cache;
  s.read("root", root);
  s.read("cache_dir", cache);
  d.root = resolve(root, base);
  d.cache_dir = resolve(cache, base);
  s.read_enum("sampling", d.sampling, sampling_from_string);
  s.read("patch_count", d.patch_count);
  s.read("seed", d.seed);
  s.read("patch_size", d.patch_size);
  s.read("tile_size", d.tile_size);
  s.read("resize_to", d.resize_to);
  s.read_enum("pad_policy", d.pad_policy, pad_policy_from_string);
  s.read("class_beta", d.class_beta);
  {
    Section n(s.child("normalization"), "data.normalization", problems);
    n.read("mean", d.normalization.mean);
    n.read("std", d.normalization.std);
    for (float v : d.normalization.std) n.require(v > 0, "std entries must be > 0");
  }
  {
    Section sp(s.child("split"), "data.split", problems);
    std::string mode = "random";
    sp.read("mode", mode);
    if (mode == "random") {
      d.split.mode = SplitMode::random_ratio;
    } else if (mode == "geographic") {
      d.split.mode = SplitMode::geographic;
    } else {
      problems.push_back("data.split.mode must be random or geographic");
    }
    sp.read("ratio", d.split.ratio);
    sp.read("seed", d.split.seed);
    sp.read("train_cities", d.split.train_cities);
    sp.read("val_cities", d.split.val_cities);
    sp.require(d.split.ratio > 0 && d.split.ratio < 1, "ratio must lie in (0, 1)");
    if (d.split.mode == SplitMode::geographic) {
      sp.require(!d.split.train_cities.empty() && !d.split.val_cities.empty(),
                 "train_cities and val_cities must be nonempty for a geographic split");
    }
  }
  s.require(d.patch_count >= 1, "patch_count must be >= 1");
  s.require(d.patch_size >= 1, "patch_size must be >= 1");
  s.require(d.tile_size >= 1, "tile_size must be >= 1");
  s.require(d.resize_to >= 1, "resize_to must be >= 1");
  s.require(d.class_beta >= 0 && d.class_beta < 1, "class_beta must lie in [0, 1)");
}

void parse_model(const json& j, ModelConfig& m, const fs::path& base, std::vector<std::string>& problems) {
  Section s(j, "model", problems);
  if (s.has("variant")) {
    s.read_enum("variant", m.variant, model_variant_from_string);
  } else {
    s.child("variant");
    problems.push_back("model.variant is required");
  }
  // Start from the variant's defaults, then apply overrides.
  const auto defaults = default_model_config(m.variant);
  m.base_channels = defaults.base_channels;
  m.encoder_depth = defaults.encoder_depth;
  m.dropout_rate = defaults.dropout_rate;
  s.read("base_channels", m.base_channels);
  s.read("encoder_depth", m.encoder_depth);
  s.read("dropout_rate", m.dropout_rate);
  s.read("pretrained", m.pretrained);
  std::string pretrained_path;
  s.read("pretrained_path", pretrained_path);
  m.pretrained_path = resolve(pretrained_path, base).string();
  s.read("num_classes", m.num_classes);
  s.read_enum("head", m.head, head_from_string);
  s.read("scse_reduction", m.scse_reduction);
  s.read("seed", m.seed);
  s.require(m.base_channels >= 1, "base_channels must be >= 1");
  s.require(m.num_classes == 2, "num_classes must be 2");
  s.require(m.dropout_rate >= 0 && m.dropout_rate < 1, "dropout_rate must lie in [0, 1)");
  s.require(m.scse_reduction >= 1, "scse_reduction must be >= 1");
  if (m.variant == ModelVariant::unet_scratch) {
    s.require(m.encoder_depth == 4, "encoder_depth must be 4 for unet_scratch");
    s.require(!m.pretrained, "pretrained must be false for unet_scratch");
  } else {
    s.require(m.encoder_depth == 5, "encoder_depth must be 5 for residual variants");
    if (m.pretrained) s.require(!m.pretrained_path.empty(), "pretrained_path is required when pretrained is true");
  }
}

void parse_loss(const json& j, LossConfig& l, std::vector<std::string>& problems) {
  Section s(j, "loss", problems);
  s.read_enum("kind", l.kind, loss_kind_from_string);
  s.read("gamma", l.gamma);
  s.read("smooth", l.smooth);
  s.read("beta", l.beta);
  s.read("combine_alpha", l.combine_alpha);
  const auto w = s.child("weights");
  if (w.is_string()) {
    try {
      l.weight_source = weight_source_from_string(w.get<std::string>());
      if (l.weight_source == WeightSource::fixed) problems.push_back("loss.weights: give the two weights as [w0, w1]");
    } catch (const std::exception& e) {
      problems.push_back(std::string("loss.weights: ") + e.what());
    }
  } else if (w.is_array()) {
    if (w.size() != 2 || !w[0].is_number() || !w[1].is_number()) {
      problems.push_back("loss.weights must be a string or two numbers");
    } else {
      l.weight_source = WeightSource::fixed;
      l.weights = {w[0].get<double>(), w[1].get<double>()};
    }
  } else if (!w.is_null()) {
    problems.push_back("loss.weights must be a string or two numbers");
  }
  try {
    l.validate();
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
}

void parse_train(const json& j, RunConfig& rc, std::vector<std::string>& problems) {
  auto& t = rc.train;
  Section s(j, "train", problems);
  s.read("epochs", t.epochs);
  s.read("batch_size", t.batch_size);
  s.read("lr", t.lr);
  s.read("betas", t.betas);
  s.read("weight_decay", t.weight_decay);
  s.read_enum("schedule", t.schedule, schedule_kind_from_string);
  s.read("seed", t.seed);
  s.read("monitor", t.monitor);
  s.read("freeze_encoder", t.freeze_encoder);
  s.read("record_wall_time", t.record_wall_time);
  s.read("eval_batch_size", t.eval_batch_size);
  s.read("max_samples", t.max_samples);
  {
    Section oc(s.child("one_cycle"), "train.one_cycle", problems);
    oc.read("max_lr", t.one_cycle.max_lr);
    oc.read("pct_start", t.one_cycle.pct_start);
    oc.read("div_factor", t.one_cycle.div_factor);
    oc.read("final_div_factor", t.one_cycle.final_div_factor);
    std::array<double, 2> range{t.one_cycle.momentum_high, t.one_cycle.momentum_low};
    oc.read("momentum_range", range);
    t.one_cycle.momentum_high = range[0];
    t.one_cycle.momentum_low = range[1];
  }
  {
    Section lf(s.child("lr_find"), "train.lr_find", problems);
    lf.read("enabled", rc.lr_find);
    lf.read("min_lr", rc.lr_find_config.min_lr);
    lf.read("max_lr", rc.lr_find_config.max_lr);
    lf.read("steps", rc.lr_find_config.steps);
    lf.read("smoothing", rc.lr_find_config.smoothing);
    lf.read("skip_start", rc.lr_find_config.skip_start);
    lf.read("skip_end", rc.lr_find_config.skip_end);
    lf.require(rc.lr_find_config.skip_start >= 0 && rc.lr_find_config.skip_end >= 0, "skip_start and skip_end must be >= 0");
    lf.require(rc.lr_find_config.min_lr > 0 && rc.lr_find_config.min_lr < rc.lr_find_config.max_lr,
               "min_lr must satisfy 0 < min_lr < max_lr");
    lf.require(rc.lr_find_config.steps >= 10, "steps must be >= 10");
  }
  try {
    t.validate();
  } catch (const ConfigError& e) {
    // Loss problems are reported by the loss section itself.
    for (const auto& p : e.problems()) {
      if (p.rfind("loss.", 0) != 0) problems.push_back(p);
    }
  }
}

}  // namespace

RunConfig parse_run_config(const json& doc, const fs::path& base_dir) {
  RunConfig rc;
  std::vector<std::string> problems;
  {
    Section top(doc, "config", problems);
    top.read("name", rc.name);
    std::string out = rc.output_dir.string();
    top.read("output_dir", out);
    rc.output_dir = resolve(out, base_dir);
    parse_data(top.child("data"), rc.data, base_dir, problems);
    parse_model(top.child("model"), rc.model, base_dir, problems);
    parse_loss(top.child("loss"), rc.train.loss, problems);
    parse_train(top.child("train"), rc, problems);
    Section p(top.child("predict"), "predict", problems);
    p.read("tile_size", rc.predict.tile_size);
    p.read("resize_to", rc.predict.resize_to);
    p.read("batch_size", rc.predict.batch_size);
    p.require(rc.predict.tile_size >= 1, "tile_size must be >= 1");
    p.require(rc.predict.resize_to >= 1, "resize_to must be >= 1");
    p.require(rc.predict.batch_size >= 1, "batch_size must be >= 1");
    if (rc.model.encoder_depth >= 1 && rc.model.encoder_depth <= 8) {
      const auto div = spatial_divisor(rc.model);
      const int input = rc.data.sampling == SamplingMode::patches ? rc.data.patch_size : rc.data.resize_to;
      if (input % div != 0) {
        problems.push_back("data: network input size " + std::to_string(input) + " is not divisible by " +
                           std::to_string(div));
      }
      if (rc.predict.resize_to % div != 0) {
        problems.push_back("predict.resize_to " + std::to_string(rc.predict.resize_to) + " is not divisible by " +
                           std::to_string(div));
      }
    }
    if (rc.train.loss.kind == LossKind::weighted_mse && rc.model.head != HeadKind::regression) {
      problems.push_back("loss.kind weighted_mse requires model.head regression");
    }
  }
  if (!problems.empty()) throw ConfigError(problems);
  return rc;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(doc, path.parent_path());
}

json model_config_to_json(const ModelConfig& m) {
  return {{"variant", to_string(m.variant)},
          {"base_channels", m.base_channels},
          {"encoder_depth", m.encoder_depth},
          {"dropout_rate", m.dropout_rate},
          {"pretrained", m.pretrained},
          {"pretrained_path", m.pretrained_path},
          {"num_classes", m.num_classes},
          {"head", m.head == HeadKind::regression ? "regression" : "softmax"},
          {"scse_reduction", m.scse_reduction},
          {"seed", m.seed}};
}

ModelConfig model_config_from_json(const json& j, std::vector<std::string>* problems) {
  std::vector<std::string> local;
  ModelConfig m;
  parse_model(j, m, {}, problems != nullptr ? *problems : local);
  if (problems == nullptr && !local.empty()) throw ConfigError(local);
  return m;
}

json to_json(const RunConfig& c) {
  json weights;
  if (c.train.loss.weight_source == WeightSource::fixed) {
    weights = {c.train.loss.weights[0], c.train.loss.weights[1]};
  } else {
    weights = to_string(c.train.loss.weight_source);
  }
  const auto& d = c.data;
  return {
      {"name", c.name},
      {"output_dir", c.output_dir.string()},
      {"data",
       {{"root", d.root.string()},
        {"cache_dir", d.cache_dir.string()},
        {"sampling", to_string(d.sampling)},
        {"patch_count", d.patch_count},
        {"seed", d.seed},
        {"patch_size", d.patch_size},
        {"tile_size", d.tile_size},
        {"resize_to", d.resize_to},
        {"pad_policy", d.pad_policy == PadPolicy::zero ? "zero" : "reflect"},
        {"class_beta", d.class_beta},
        {"normalization", {{"mean", d.normalization.mean}, {"std", d.normalization.std}}},
        {"split",
         {{"mode", d.split.mode == SplitMode::geographic ? "geographic" : "random"},
          {"ratio", d.split.ratio},
          {"seed", d.split.seed},
          {"train_cities", d.split.train_cities},
          {"val_cities", d.split.val_cities}}}}},
      {"model", model_config_to_json(c.model)},
      {"loss",
       {{"kind", to_string(c.train.loss.kind)},
        {"gamma", c.train.loss.gamma},
        {"smooth", c.train.loss.smooth},
        {"weights", weights},
        {"beta", c.train.loss.beta},
        {"combine_alpha", c.train.loss.combine_alpha}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"lr", c.train.lr},
        {"betas", c.train.betas},
        {"weight_decay", c.train.weight_decay},
        {"schedule", to_string(c.train.schedule)},
        {"seed", c.train.seed},
        {"monitor", c.train.monitor},
        {"freeze_encoder", c.train.freeze_encoder},
        {"record_wall_time", c.train.record_wall_time},
        {"eval_batch_size", c.train.eval_batch_size},
        {"max_samples", c.train.max_samples},
        {"one_cycle",
         {{"max_lr", c.train.one_cycle.max_lr},
          {"pct_start", c.train.one_cycle.pct_start},
          {"div_factor", c.train.one_cycle.div_factor},
          {"final_div_factor", c.train.one_cycle.final_div_factor},
          {"momentum_range", {c.train.one_cycle.momentum_high, c.train.one_cycle.momentum_low}}}},
        {"lr_find",
         {{"enabled", c.lr_find},
          {"min_lr", c.lr_find_config.min_lr},
          {"max_lr", c.lr_find_config.max_lr},
          {"steps", c.lr_find_config.steps},
          {"smoothing", c.lr_find_config.smoothing},
          {"skip_start", c.lr_find_config.skip_start},
          {"skip_end", c.lr_find_config.skip_end}}}}},
      {"predict",
       {{"tile_size", c.predict.tile_size}, {"resize_to", c.predict.resize_to}, {"batch_size", c.predict.batch_size}}},
  };
}

}  // namespace bfx
