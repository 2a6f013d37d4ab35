#include "bfx/models.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "bfx/error.hpp"
#include "bfx/hashing.hpp"

namespace fs = std::filesystem;
namespace nn = torch::nn;

namespace bfx {

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::unet_scratch:
      return "unet_scratch";
    case ModelVariant::resnet_scse:
      return "resnet_scse";
    case ModelVariant::resnet_pixelshuffle:
      return "resnet_pixelshuffle";
  }
  return "unknown";
}

ModelVariant model_variant_from_string(const std::string& s) {
  if (s == "unet_scratch") return ModelVariant::unet_scratch;
  if (s == "resnet_scse") return ModelVariant::resnet_scse;
  if (s == "resnet_pixelshuffle") return ModelVariant::resnet_pixelshuffle;
  throw InvalidArgument("unknown model variant '" + s + "'");
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::transposed_conv: return "transposed_conv";
    case LayerKind::pixel_shuffle: return "pixel_shuffle";
    case LayerKind::scse: return "scse";
    case LayerKind::dropout: return "dropout";
    case LayerKind::conv1x1_head: return "conv1x1_head";
    case LayerKind::softmax: return "softmax";
    case LayerKind::sigmoid: return "sigmoid";
  }
  return "unknown";
}

ModelConfig default_model_config(ModelVariant variant) {
  ModelConfig c;
  c.variant = variant;
  if (variant == ModelVariant::unet_scratch) {
    c.base_channels = 64;
    c.encoder_depth = 4;
    c.dropout_rate = 0.5;
  } else {
    c.base_channels = 16;
    c.encoder_depth = 5;
    c.dropout_rate = 0.0;
  }
  return c;
}

void NetworkGraph::validate() const {
  std::vector<int> incoming(static_cast<std::size_t>(decoder_stages), 0);
  for (const auto& s : skips) {
    if (s.encoder_level != s.decoder_level) {
      throw std::logic_error("skip " + s.encoder_node + " -> " + s.decoder_node + " joins level " +
                             std::to_string(s.encoder_level) + " to level " + std::to_string(s.decoder_level));
    }
    const auto stage = s.decoder_node.find_last_of("0123456789");
    if (stage == std::string::npos) throw std::logic_error("skip target " + s.decoder_node + " has no stage index");
    const int idx = s.decoder_node[stage] - '0';
    if (idx < 0 || idx >= decoder_stages) throw std::logic_error("skip target " + s.decoder_node + " out of range");
    ++incoming[static_cast<std::size_t>(idx)];
  }
  for (int i = 0; i < decoder_stages; ++i) {
    if (incoming[static_cast<std::size_t>(i)] != 1) {
      throw std::logic_error("decoder stage " + std::to_string(i) + " has " +
                             std::to_string(incoming[static_cast<std::size_t>(i)]) + " skip edges");
    }
  }
}

// ---------------------------------------------------------------------------
// Building blocks

torch::Tensor pixel_shuffle_upsample(const torch::Tensor& input, int64_t r) {
  if (r < 1) throw InvalidArgument("pixel shuffle factor must be >= 1");
  const bool batched = input.dim() == 4;
  if (!batched && input.dim() != 3) throw InvalidArgument("pixel shuffle expects C x H x W or N x C x H x W");
  const auto x = batched ? input : input.unsqueeze(0);
  const int64_t n = x.size(0);
  const int64_t c = x.size(1);
  const int64_t h = x.size(2);
  const int64_t w = x.size(3);
  if (c % (r * r) != 0) {
    throw InvalidArgument("pixel shuffle: " + std::to_string(c) + " channels not divisible by r^2 = " +
                          std::to_string(r * r));
  }
  const int64_t oc = c / (r * r);
  // [n, oc, i, j, h, w] -> [n, oc, h, i, w, j]
  auto out = x.reshape({n, oc, r, r, h, w}).permute({0, 1, 4, 2, 5, 3}).reshape({n, oc, h * r, w * r});
  return batched ? out : out.squeeze(0);
}

torch::Tensor scse_combine(const torch::Tensor& x, const torch::Tensor& channel_gate,
                           const torch::Tensor& spatial_gate) {
  return x * channel_gate + x * spatial_gate;
}

ScseBlockImpl::ScseBlockImpl(int64_t channels, int64_t reduction) {
  if (reduction < 1) throw InvalidArgument("scSE reduction must be >= 1");
  if (channels < reduction) {
    throw InvalidArgument("scSE: " + std::to_string(channels) + " channels fewer than reduction " +
                          std::to_string(reduction));
  }
  if (channels % reduction != 0) {
    throw InvalidArgument("scSE: " + std::to_string(channels) + " channels not divisible by reduction " +
                          std::to_string(reduction));
  }
  squeeze = register_module("squeeze", nn::Conv2d(nn::Conv2dOptions(channels, channels / reduction, 1)));
  excite = register_module("excite", nn::Conv2d(nn::Conv2dOptions(channels / reduction, channels, 1)));
  spatial = register_module("spatial", nn::Conv2d(nn::Conv2dOptions(channels, 1, 1)));
}

torch::Tensor ScseBlockImpl::channel_gate(const torch::Tensor& x) {
  auto pooled = torch::adaptive_avg_pool2d(x, {1, 1});
  return torch::sigmoid(excite->forward(torch::relu(squeeze->forward(pooled))));
}

torch::Tensor ScseBlockImpl::spatial_gate(const torch::Tensor& x) { return torch::sigmoid(spatial->forward(x)); }

torch::Tensor ScseBlockImpl::forward(const torch::Tensor& x) {
  return scse_combine(x, channel_gate(x), spatial_gate(x));
}

torch::Tensor scse_recalibrate(const torch::Tensor& feature_map, int64_t reduction) {
  const bool batched = feature_map.dim() == 4;
  if (!batched && feature_map.dim() != 3) throw InvalidArgument("scSE expects C x H x W or N x C x H x W");
  ScseBlock block(feature_map.size(batched ? 1 : 0), reduction);
  block->to(torch::typeMetaToScalarType(feature_map.dtype()));
  auto out = block->forward(batched ? feature_map : feature_map.unsqueeze(0));
  return batched ? out : out.squeeze(0);
}

// ---------------------------------------------------------------------------
// Networks

torch::Tensor SegmentationNet::forward(const torch::Tensor& x) {
  auto z = logits(x);
  return config_.head == HeadKind::regression ? torch::sigmoid(z) : torch::softmax(z, 1);
}

namespace {

nn::Sequential double_conv(int64_t in, int64_t out, int64_t stride = 1) {
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)),
                        nn::BatchNorm2d(out), nn::ReLU(),
                        nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)), nn::BatchNorm2d(out),
                        nn::ReLU());
}

void describe_double_conv(NetworkGraph& g, const std::string& name, int in, int out, int level) {
  g.layers.push_back({name + ".0", LayerKind::conv3x3, in, out, level});
  g.layers.push_back({name + ".1", LayerKind::batch_norm, out, out, level});
  g.layers.push_back({name + ".2", LayerKind::relu, out, out, level});
  g.layers.push_back({name + ".3", LayerKind::conv3x3, out, out, level});
  g.layers.push_back({name + ".4", LayerKind::batch_norm, out, out, level});
  g.layers.push_back({name + ".5", LayerKind::relu, out, out, level});
}

int head_channels(const ModelConfig& c) { return c.head == HeadKind::regression ? 1 : c.num_classes; }

void check_classes(const ModelConfig& c) {
  if (c.num_classes != 2) throw InvalidArgument("num_classes is fixed at 2");
  if (c.base_channels < 1) throw InvalidArgument("base_channels must be >= 1");
}

class UNetScratch : public SegmentationNet {
 public:
  explicit UNetScratch(const ModelConfig& config) {
    config_ = config;
    check_classes(config);
    if (config.encoder_depth != 4) throw InvalidArgument("unet_scratch uses exactly 4 encoder blocks");
    if (!(config.dropout_rate >= 0 && config.dropout_rate < 1)) throw InvalidArgument("dropout_rate must lie in [0, 1)");
    const int depth = config.encoder_depth;
    const int base = config.base_channels;

    int in = 3;
    for (int l = 0; l < depth; ++l) {
      const int out = base << l;
      const auto name = "enc" + std::to_string(l);
      if (l > 0) graph_.layers.push_back({"pool" + std::to_string(l), LayerKind::max_pool, in, in, l});
      encoders_.push_back(register_module(name, double_conv(in, out)));
      describe_double_conv(graph_, name, in, out, l);
      graph_.encoder_channels.push_back(out);
      in = out;
    }
    // Decoder stage k works at level depth-2-k.
    for (int k = 0; k < depth - 1; ++k) {
      const int level = depth - 2 - k;
      const int out = base << level;
      const auto up_name = "up" + std::to_string(k);
      const auto dec_name = "dec" + std::to_string(k);
      ups_.push_back(register_module(up_name, nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 2).stride(2))));
      graph_.layers.push_back({up_name, LayerKind::transposed_conv, in, out, level});
      decoders_.push_back(register_module(dec_name, double_conv(2 * out, out)));
      describe_double_conv(graph_, dec_name, 2 * out, out, level);
      graph_.skips.push_back({"enc" + std::to_string(level), dec_name, level, level});
      in = out;
    }
    graph_.decoder_stages = depth - 1;
    dropout_ = register_module("dropout", nn::Dropout2d(nn::Dropout2dOptions(config.dropout_rate)));
    graph_.layers.push_back({"dropout", LayerKind::dropout, in, in, 0});
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, head_channels(config), 1)));
    graph_.layers.push_back({"head", LayerKind::conv1x1_head, in, head_channels(config), 0});
    graph_.layers.push_back({"activation", config.head == HeadKind::regression ? LayerKind::sigmoid : LayerKind::softmax,
                             head_channels(config), head_channels(config), 0});

    for (auto& m : modules(/*include_self=*/false)) {
      if (auto* conv = m->as<nn::Conv2d>()) {
        nn::init::xavier_uniform_(conv->weight);
        if (conv->bias.defined()) nn::init::zeros_(conv->bias);
      } else if (auto* deconv = m->as<nn::ConvTranspose2d>()) {
        nn::init::xavier_uniform_(deconv->weight);
        if (deconv->bias.defined()) nn::init::zeros_(deconv->bias);
      }
    }
  }

  torch::Tensor logits(const torch::Tensor& input) override {
    std::vector<torch::Tensor> skips;
    auto x = input;
    for (std::size_t l = 0; l < encoders_.size(); ++l) {
      if (l > 0) x = torch::max_pool2d(x, 2, 2);
      x = encoders_[l]->forward(x);
      skips.push_back(x);
    }
    for (std::size_t k = 0; k < decoders_.size(); ++k) {
      x = ups_[k]->forward(x);
      x = torch::cat({x, skips[skips.size() - 2 - k]}, 1);
      x = decoders_[k]->forward(x);
    }
    return head_->forward(dropout_->forward(x));
  }

 private:
  std::vector<nn::Sequential> encoders_;
  std::vector<nn::ConvTranspose2d> ups_;
  std::vector<nn::Sequential> decoders_;
  nn::Dropout2d dropout_{nullptr};
  nn::Conv2d head_{nullptr};
};

// torchvision-compatible names so pretrained ResNet34 stages load by path.
class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(out));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      downsample = register_module(
          "downsample",
          nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)), nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1->forward(conv1->forward(x)));
    y = bn2->forward(conv2->forward(y));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(y + identity);
  }

  nn::Conv2d conv1{nullptr};
  nn::BatchNorm2d bn1{nullptr};
  nn::Conv2d conv2{nullptr};
  nn::BatchNorm2d bn2{nullptr};
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

constexpr std::array<int, 4> kResidualBlocks = {3, 4, 6, 3};

/// Encoder levels: 0 stem0 (b), 1 stem1 (2b), 2 stem2 + layer1 (4b),
/// 3 layer2 (8b), 4 layer3 + layer4 (16b).
class ResNetEncoderImpl : public nn::Module {
 public:
  ResNetEncoderImpl(int base, bool attention, int reduction, NetworkGraph& g) {
    widths_ = {base, 2 * base, 4 * base, 8 * base, 16 * base};
    stem0 = register_module("stem0", double_conv(3, widths_[0]));
    describe_double_conv(g, "encoder.stem0", 3, widths_[0], 0);
    stem1 = register_module("stem1", double_conv(widths_[0], widths_[1], 2));
    describe_double_conv(g, "encoder.stem1", widths_[0], widths_[1], 1);
    stem2 = register_module("stem2", double_conv(widths_[1], widths_[2], 2));
    describe_double_conv(g, "encoder.stem2", widths_[1], widths_[2], 2);

    const std::array<int, 4> stage_out = {widths_[2], widths_[3], widths_[4], widths_[4]};
    const std::array<int, 4> stage_stride = {1, 2, 2, 1};
    const std::array<int, 4> stage_level = {2, 3, 4, 4};
    int in = widths_[2];
    for (std::size_t s = 0; s < 4; ++s) {
      nn::Sequential stage;
      for (int b = 0; b < kResidualBlocks[s]; ++b) {
        const int stride = b == 0 ? stage_stride[s] : 1;
        stage->push_back(BasicBlock(in, stage_out[s], stride));
        g.layers.push_back({"encoder.layer" + std::to_string(s + 1) + "." + std::to_string(b),
                            LayerKind::residual_block, in, stage_out[s], stage_level[s]});
        in = stage_out[s];
      }
      layers_.push_back(register_module("layer" + std::to_string(s + 1), stage));
    }
    if (attention) {
      for (std::size_t l = 0; l < widths_.size(); ++l) {
        scse_.push_back(register_module("scse" + std::to_string(l), ScseBlock(widths_[l], reduction)));
        g.layers.push_back({"encoder.scse" + std::to_string(l), LayerKind::scse, widths_[l], widths_[l],
                            static_cast<int>(l)});
      }
    }
    g.encoder_channels.assign(widths_.begin(), widths_.end());
  }

  /// Returns the five level outputs, shallowest first.
  std::vector<torch::Tensor> forward(const torch::Tensor& input) {
    std::vector<torch::Tensor> levels;
    auto gate = [&](torch::Tensor x) {
      if (!scse_.empty()) x = scse_[levels.size()]->forward(x);
      levels.push_back(x);
      return x;
    };
    auto x = gate(stem0->forward(input));
    x = gate(stem1->forward(x));
    x = layers_[0]->forward(stem2->forward(x));
    x = gate(x);
    x = gate(layers_[1]->forward(x));
    x = layers_[3]->forward(layers_[2]->forward(x));
    gate(x);
    return levels;
  }

  const std::vector<int>& widths() const { return widths_; }

  nn::Sequential stem0{nullptr};
  nn::Sequential stem1{nullptr};
  nn::Sequential stem2{nullptr};

 private:
  std::vector<int> widths_;
  std::vector<nn::Sequential> layers_;
  std::vector<ScseBlock> scse_;
};
TORCH_MODULE(ResNetEncoder);

/// Initializes each sub-pixel group identically so the shuffle starts out as
/// nearest-neighbour upsampling (ICNR).
void icnr_init(nn::Conv2d& conv, int64_t r) {
  torch::NoGradGuard guard;
  const auto& w = conv->weight;
  const int64_t out = w.size(0) / (r * r);
  auto sub = torch::empty({out, w.size(1), w.size(2), w.size(3)});
  nn::init::kaiming_normal_(sub, 0.0, torch::kFanIn, torch::kReLU);
  w.copy_(sub.repeat_interleave(r * r, 0));
  if (conv->bias.defined()) conv->bias.zero_();
}

class ResNetUNet : public SegmentationNet {
 public:
  ResNetUNet(const ModelConfig& config, bool attention, bool pixel_shuffle) : pixel_shuffle_(pixel_shuffle) {
    config_ = config;
    check_classes(config);
    if (config.encoder_depth != 5) throw InvalidArgument("residual variants use 5 encoder levels");
    encoder_ = register_module("encoder", ResNetEncoder(config.base_channels, attention, config.scse_reduction, graph_));

    for (auto& m : encoder_->modules(false)) {
      if (auto* conv = m->as<nn::Conv2d>()) {
        nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
        if (conv->bias.defined()) nn::init::zeros_(conv->bias);
      }
    }

    const auto& widths = encoder_->widths();
    int in = widths.back();
    const int stages = static_cast<int>(widths.size()) - 1;
    for (int k = 0; k < stages; ++k) {
      const int level = stages - 1 - k;
      const int out = widths[static_cast<std::size_t>(level)];
      const auto up_name = "up" + std::to_string(k);
      const auto dec_name = "dec" + std::to_string(k);
      if (pixel_shuffle) {
        auto conv = nn::Conv2d(nn::Conv2dOptions(in, out * 4, 1));
        icnr_init(conv, 2);
        shuffle_convs_.push_back(register_module(up_name, conv));
        graph_.layers.push_back({up_name + ".conv", LayerKind::conv3x3, in, out * 4, level + 1});
        graph_.layers.push_back({up_name + ".shuffle", LayerKind::pixel_shuffle, out * 4, out, level});
      } else {
        ups_.push_back(register_module(up_name, nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 2).stride(2))));
        graph_.layers.push_back({up_name, LayerKind::transposed_conv, in, out, level});
      }
      decoders_.push_back(register_module(dec_name, double_conv(2 * out, out)));
      describe_double_conv(graph_, dec_name, 2 * out, out, level);
      graph_.skips.push_back({"encoder.level" + std::to_string(level), dec_name, level, level});
      in = out;
    }
    graph_.decoder_stages = stages;
    head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, head_channels(config), 1)));
    graph_.layers.push_back({"head", LayerKind::conv1x1_head, in, head_channels(config), 0});
    graph_.layers.push_back({"activation", config.head == HeadKind::regression ? LayerKind::sigmoid : LayerKind::softmax,
                             head_channels(config), head_channels(config), 0});
  }

  torch::Tensor logits(const torch::Tensor& input) override {
    auto levels = encoder_->forward(input);
    auto x = levels.back();
    for (std::size_t k = 0; k < decoders_.size(); ++k) {
      if (pixel_shuffle_) {
        x = pixel_shuffle_upsample(shuffle_convs_[k]->forward(x), 2);
      } else {
        x = ups_[k]->forward(x);
      }
      x = torch::cat({x, levels[levels.size() - 2 - k]}, 1);
      x = decoders_[k]->forward(x);
    }
    return head_->forward(x);
  }

 private:
  bool pixel_shuffle_;
  ResNetEncoder encoder_{nullptr};
  std::vector<nn::ConvTranspose2d> ups_;
  std::vector<nn::Conv2d> shuffle_convs_;
  std::vector<nn::Sequential> decoders_;
  nn::Conv2d head_{nullptr};
};

void require_variant(const ModelConfig& config, ModelVariant expected) {
  if (config.variant != expected) {
    throw InvalidArgument("config variant " + to_string(config.variant) + " does not match builder for " +
                          to_string(expected));
  }
}

}  // namespace

std::shared_ptr<SegmentationNet> build_unet_scratch(const ModelConfig& config) {
  require_variant(config, ModelVariant::unet_scratch);
  auto net = std::make_shared<UNetScratch>(config);
  net->graph().validate();
  return net;
}

std::shared_ptr<SegmentationNet> build_resnet_scse(const ModelConfig& config) {
  require_variant(config, ModelVariant::resnet_scse);
  auto net = std::make_shared<ResNetUNet>(config, /*attention=*/true, /*pixel_shuffle=*/false);
  net->graph().validate();
  return net;
}

std::shared_ptr<SegmentationNet> build_resnet_pixelshuffle(const ModelConfig& config) {
  require_variant(config, ModelVariant::resnet_pixelshuffle);
  auto net = std::make_shared<ResNetUNet>(config, /*attention=*/false, /*pixel_shuffle=*/true);
  net->graph().validate();
  return net;
}

std::shared_ptr<SegmentationNet> build_model(const ModelConfig& config) {
  if (config.pretrained && config.variant == ModelVariant::unet_scratch) {
    throw InvalidArgument("unet_scratch is always trained from scratch; set pretrained=false");
  }
  if (config.pretrained) {
    if (config.pretrained_path.empty() || !fs::exists(config.pretrained_path)) {
      throw ConfigError("pretrained weights requested but '" + config.pretrained_path +
                        "' does not exist; export a ResNet34 archive with tools/export_resnet34.py and set "
                        "model.pretrained_path, or set model.pretrained=false");
    }
  }
  torch::manual_seed(config.seed);
  std::shared_ptr<SegmentationNet> net;
  switch (config.variant) {
    case ModelVariant::unet_scratch:
      net = build_unet_scratch(config);
      break;
    case ModelVariant::resnet_scse:
      net = build_resnet_scse(config);
      break;
    case ModelVariant::resnet_pixelshuffle:
      net = build_resnet_pixelshuffle(config);
      break;
  }
  if (config.pretrained) load_pretrained_encoder(*net, config.pretrained_path);
  return net;
}

int64_t spatial_divisor(const ModelConfig& config) {
  return int64_t{1} << (config.encoder_depth - 1);
}

torch::Tensor forward(SegmentationNet& net, const torch::Tensor& batch) {
  if (batch.dim() != 4) throw InvalidArgument("forward expects an N x 3 x H x W batch");
  if (batch.size(1) != 3) {
    throw InvalidArgument("forward expects 3 input channels, got " + std::to_string(batch.size(1)));
  }
  const auto div = spatial_divisor(net.config());
  if (batch.size(2) % div != 0 || batch.size(3) % div != 0) {
    throw InvalidArgument("input " + std::to_string(batch.size(2)) + "x" + std::to_string(batch.size(3)) +
                          " is not divisible by " + std::to_string(div));
  }
  auto out = net.forward(batch);
  if (net.config().head == HeadKind::regression) out = torch::cat({1 - out, out}, 1);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

bool read_nested(torch::serialize::InputArchive& archive, const std::string& dotted, torch::Tensor& out,
                 bool is_buffer) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) return archive.try_read(dotted, out, is_buffer);
  torch::serialize::InputArchive child;
  if (!archive.try_read(dotted.substr(0, dot), child)) return false;
  return read_nested(child, dotted.substr(dot + 1), out, is_buffer);
}

}  // namespace

PretrainedLoadReport load_pretrained_encoder(SegmentationNet& net, const fs::path& path) {
  if (!fs::exists(path)) {
    throw ConfigError("pretrained archive " + path.string() +
                      " not found; export one with tools/export_resnet34.py or disable pretrained");
  }
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  PretrainedLoadReport report;
  torch::NoGradGuard guard;
  for (const auto& item : net.named_modules()) {
    const auto& name = item.key();
    const std::string prefix = "encoder.layer";
    if (name.rfind(prefix, 0) != 0 || name.find('.', prefix.size()) != std::string::npos) continue;
    const auto stage = name.substr(std::string("encoder.").size());
    auto copy = [&](const std::string& tensor_name, torch::Tensor& target, bool is_buffer) {
      torch::Tensor source;
      const auto full = stage + "." + tensor_name;
      if (!read_nested(archive, full, source, is_buffer) || source.sizes() != target.sizes()) {
        report.skipped.push_back(full);
        return;
      }
      target.copy_(source.to(target.dtype()));
      report.loaded.push_back(full);
    };
    for (auto& p : item.value()->named_parameters(true)) copy(p.key(), p.value(), false);
    for (auto& b : item.value()->named_buffers(true)) copy(b.key(), b.value(), true);
  }
  return report;
}

std::string weight_digest(torch::nn::Module& module) {
  std::string material;
  auto add = [&](const std::string& name, const torch::Tensor& t) {
    const auto c = t.detach().contiguous().to(torch::kCPU);
    material += name;
    material.append(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
  };
  for (const auto& p : module.named_parameters(true)) add(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) add(b.key(), b.value());
  return to_hex(sha256(material));
}

}  // namespace bfx
