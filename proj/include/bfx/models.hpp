#pragma once

// The three U-Net-family segmentation networks:
//
//   unet_scratch          4 encoder / 3 decoder double-conv blocks from 64
//                         channels, transposed-conv upsampling, dropout before
//                         a 1x1 head, Xavier initialization.
//   resnet_scse           custom 16/32/64 double-conv stem, residual stages of
//                         (3, 4, 6, 3) basic blocks, scSE recalibration at
//                         every encoder stage output, U-Net decoder.
//   resnet_pixelshuffle   same encoder without scSE; decoder upsamples with
//                         a convolution followed by pixel shuffle.
//
// All variants map N x 3 x H x W to N x 2 x H x W softmax probabilities
// (or N x 1 x H x W sigmoid scores with the regression head).

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace bfx {

enum class ModelVariant { unet_scratch, resnet_scse, resnet_pixelshuffle };
enum class HeadKind { softmax, regression };

std::string to_string(ModelVariant v);
ModelVariant model_variant_from_string(const std::string& s);

struct ModelConfig {
  ModelVariant variant = ModelVariant::unet_scratch;
  int base_channels = 64;
  int encoder_depth = 4;
  double dropout_rate = 0.5;
  bool pretrained = false;
  std::string pretrained_path;
  int num_classes = 2;
  HeadKind head = HeadKind::softmax;
  int scse_reduction = 2;
  std::uint64_t seed = 0;
};

/// Defaults for each variant (base 64 / depth 4 for the scratch U-Net, a
/// 16-channel stem and five encoder levels for the residual variants).
ModelConfig default_model_config(ModelVariant variant);

// ---------------------------------------------------------------------------
// Graph description

enum class LayerKind {
  conv3x3,
  batch_norm,
  relu,
  max_pool,
  residual_block,
  transposed_conv,
  pixel_shuffle,
  scse,
  dropout,
  conv1x1_head,
  softmax,
  sigmoid,
};

std::string to_string(LayerKind kind);

struct LayerDesc {
  std::string name;
  LayerKind kind;
  int in_channels = 0;
  int out_channels = 0;
  /// Downsampling level: spatial size is input / 2^level.
  int level = 0;
};

struct SkipEdge {
  std::string encoder_node;
  std::string decoder_node;
  int encoder_level = 0;
  int decoder_level = 0;
};

/// Ordered layer descriptors plus skip edges, kept next to the torch modules
/// so the topology can be checked without running the network.
struct NetworkGraph {
  std::vector<LayerDesc> layers;
  std::vector<SkipEdge> skips;
  /// Output channels of each encoder level, shallowest first.
  std::vector<int> encoder_channels;
  int decoder_stages = 0;

  /// Throws std::logic_error unless every decoder stage has exactly one skip
  /// edge joining equal-resolution nodes.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Building blocks

/// Rearranges (C r^2) x H x W into C x rH x rW:
/// out[c, r h + i, r w + j] = in[c r^2 + i r + j, h, w]. Accepts 3-D or 4-D input.
torch::Tensor pixel_shuffle_upsample(const torch::Tensor& input, int64_t r);

/// Sum of the channel-gated and spatially-gated maps: x * g_c + x * g_s.
torch::Tensor scse_combine(const torch::Tensor& x, const torch::Tensor& channel_gate,
                           const torch::Tensor& spatial_gate);

/// Concurrent spatial and channel squeeze-and-excitation.
class ScseBlockImpl : public torch::nn::Module {
 public:
  ScseBlockImpl(int64_t channels, int64_t reduction);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor channel_gate(const torch::Tensor& x);
  torch::Tensor spatial_gate(const torch::Tensor& x);

  torch::nn::Conv2d squeeze{nullptr};
  torch::nn::Conv2d excite{nullptr};
  torch::nn::Conv2d spatial{nullptr};
};
TORCH_MODULE(ScseBlock);

/// Functional form used by tests and the graph: recalibrates `feature_map`
/// (C x H x W or N x C x H x W) with a freshly initialized block.
torch::Tensor scse_recalibrate(const torch::Tensor& feature_map, int64_t reduction);

// ---------------------------------------------------------------------------
// Networks

class SegmentationNet : public torch::nn::Module {
 public:
  ~SegmentationNet() override = default;

  /// Raw head output: logits (N x classes x H x W) or the regression score
  /// before the sigmoid (N x 1 x H x W).
  virtual torch::Tensor logits(const torch::Tensor& x) = 0;

  /// Softmax probabilities, or sigmoid scores for the regression head.
  virtual torch::Tensor forward(const torch::Tensor& x);

  const NetworkGraph& graph() const { return graph_; }
  const ModelConfig& config() const { return config_; }

 protected:
  NetworkGraph graph_;
  ModelConfig config_;
};

std::shared_ptr<SegmentationNet> build_unet_scratch(const ModelConfig& config);
std::shared_ptr<SegmentationNet> build_resnet_scse(const ModelConfig& config);
std::shared_ptr<SegmentationNet> build_resnet_pixelshuffle(const ModelConfig& config);
/// Dispatches on config.variant. Seeds torch's generator with config.seed so
/// equal configs produce equal weights; loads pretrained residual stages when
/// requested.
std::shared_ptr<SegmentationNet> build_model(const ModelConfig& config);

/// Checked inference entry point: validates channel count and spatial
/// divisibility, then returns N x 2 x H x W probabilities (a one-channel
/// regression score s is expanded to (1 - s, s)).
torch::Tensor forward(SegmentationNet& net, const torch::Tensor& batch);

/// Spatial dimensions must be multiples of this.
int64_t spatial_divisor(const ModelConfig& config);

struct PretrainedLoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;
};

/// Copies residual-stage tensors (layer1..layer4) whose names and shapes match
/// from a torch archive, e.g. one exported from a torchvision ResNet34. The
/// custom stem is never touched.
PretrainedLoadReport load_pretrained_encoder(SegmentationNet& net, const std::filesystem::path& path);

/// Deterministic digest of all parameters and buffers (for weight comparisons).
std::string weight_digest(torch::nn::Module& module);

}  // namespace bfx
