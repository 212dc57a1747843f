#pragma once

#include "msac/features.hpp"
#include "msac/losses.hpp"
#include "msac/nn/layers.hpp"

#include "json.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace msac {

using nn::Tensor;

struct KernelSize {
  int h = 1;
  int w = 1;
  bool operator==(const KernelSize&) const = default;
};

struct ConvSpec {
  KernelSize kernel;
  int in = 0;
  int out = 0;
  bool operator==(const ConvSpec&) const = default;
};

struct DeepBlockSpec {
  ConvSpec first;
  ConvSpec second;
  bool operator==(const DeepBlockSpec&) const = default;
};

struct HeadSpec {
  std::string attribute;
  int num_classes = 0;
  AttributeRole role = AttributeRole::kCorrelated;  // ignored for "emotion"
};

/// The five-block deep stack: 5x5/3x3 then 3x3/1x1 pairs with channels
/// 96->32->32, 32->64->64, 64->128->128, 128->256->256, 256->256->256.
std::vector<DeepBlockSpec> default_deep_blocks(int width_divisor = 1);

/// Attribute names a head may be attached to.
bool is_known_attribute(const std::string& name);

struct ModelConfig {
  int num_mel_bins = 80;
  std::vector<KernelSize> shallow_branch_kernels{{11, 1}, {3, 3}, {9, 1}};
  int shallow_branch_channels = 32;
  KernelSize merge_kernel{5, 5};
  /// Uniform channel reduction of the shallow branches and deep stack
  /// (1 = full width). Kernel sizes and the channel ratios are preserved.
  int width_divisor = 1;
  std::vector<DeepBlockSpec> deep_blocks = default_deep_blocks();
  int embedding_dim = 256;
  int projection_hidden = 512;
  float leaky_slope = 0.01f;
  std::vector<HeadSpec> heads{{"emotion", 4, AttributeRole::kCorrelated}};
  float grl_lambda = 1.0f;

  /// Full-width config with `width_divisor` applied to the shallow branches
  /// and deep stack.
  static ModelConfig reduced(int width_divisor);

  /// Throws a configuration error describing the first violated constraint.
  void validate() const;
  const HeadSpec& head(const std::string& attribute) const;
  bool has_head(const std::string& attribute) const;
  /// Number of frequency cells left after the six 2x pools.
  int pooled_freq_bins() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Per-attribute cosine logits plus the pooled embedding for one utterance.
struct AttributeLogits {
  std::map<std::string, Eigen::VectorXf> cosines;
  Eigen::VectorXf embedding;
};

struct BatchLogits {
  std::map<std::string, nn::RowMatrix> cosines;  // [N x classes]
  nn::RowMatrix embedding;                       // [N x embedding_dim]

  AttributeLogits row(int i) const;
};

/// Per (channel, frequency) cell: mean then population standard deviation
/// over the time axis. [N x C x T x F] -> [N x 2*C*F] (means first).
nn::RowMatrix time_mean_std(const Tensor& map);

/// Stacks equally-sized feature matrices into an [N x 1 x frames x bins] tensor.
Tensor make_batch(std::span<const FBankFeatures> items);
Tensor make_batch(const FBankFeatures& item);

class MsacNet {
 public:
  struct ConvUnit {
    nn::Conv2d conv;
    nn::BatchNorm bn;
  };
  struct ConvUnitTrace {
    Tensor input;
    nn::BatchNorm::Cache bn;
    Tensor output;
  };
  struct DeepBlock {
    ConvUnit first;
    ConvUnit second;
  };

  /// Everything the backward pass needs from one forward call.
  struct Trace {
    bool training = false;
    std::vector<ConvUnitTrace> branches;
    Tensor merge_input;
    Tensor merge_output;
    Tensor shallow_output;
    std::vector<ConvUnitTrace> deep_units;  // two per block
    std::vector<Tensor> deep_pre_pool;
    Tensor deep_output;
    nn::RowMatrix stats;
    nn::BatchNorm::Cache proj_bn1, proj_bn2;
    nn::RowMatrix proj_act1;
    nn::RowMatrix embedding;
    /// Channel count after the shallow stage and after each deep block.
    std::vector<int> channel_trace;
  };

  explicit MsacNet(ModelConfig config, std::uint64_t seed = 0);

  const ModelConfig& config() const { return config_; }

  // Stage-wise inference (eval mode).
  Tensor shallow_extract(const Tensor& input) const;
  Tensor deep_extract(const Tensor& map) const;
  nn::RowMatrix aggregate_pool(const Tensor& map) const;
  nn::RowMatrix head_cosines(const std::string& attribute, const nn::RowMatrix& embedding) const;

  BatchLogits forward(const Tensor& input) const;
  AttributeLogits forward(const FBankFeatures& fbanks) const;
  BatchLogits forward(const Tensor& input, bool training, Trace& trace) const;

  /// Backpropagates per-head cosine gradients (missing heads contribute
  /// nothing) and accumulates parameter gradients. Returns dL/dinput.
  Tensor backward(const Trace& trace, const std::map<std::string, nn::RowMatrix>& grad_cosines);
  /// Same chain without touching parameter gradients.
  Tensor input_gradient(const Trace& trace, const std::map<std::string, nn::RowMatrix>& grad_cosines) const;

  /// Folds training-mode batch statistics into the running estimates.
  void commit_batch_statistics(const Trace& trace);

  /// When disabled the emotion-agnostic heads see a plain identity instead of
  /// the gradient reversal layer (used for verification).
  void set_gradient_reversal(bool enabled) { reversal_enabled_ = enabled; }
  bool gradient_reversal_enabled() const { return reversal_enabled_; }

  struct NamedParameter {
    std::string name;
    nn::Parameter* param;
  };
  struct NamedBuffer {
    std::string name;
    Eigen::VectorXf* buffer;
  };
  std::vector<NamedParameter> parameters();
  std::vector<NamedBuffer> buffers();
  void zero_grad();
  std::size_t parameter_count();

 private:
  Tensor unit_forward(const ConvUnit& unit, const Tensor& x, bool training, ConvUnitTrace* trace) const;
  Tensor unit_backward(ConvUnit& unit, const ConvUnitTrace& trace, Tensor dy, bool accumulate);
  nn::RowMatrix pool_forward(const Tensor& map, bool training, Trace* trace) const;
  Tensor backward_impl(const Trace& trace, const std::map<std::string, nn::RowMatrix>& grad_cosines,
                       bool accumulate);

  ModelConfig config_;
  std::vector<ConvUnit> branches_;
  nn::Conv2d merge_;
  std::vector<DeepBlock> blocks_;
  nn::Linear fc1_, fc2_;
  nn::BatchNorm proj_bn1_, proj_bn2_;
  std::map<std::string, nn::Parameter> heads_;
  nn::GradientReversal reversal_;
  bool reversal_enabled_ = true;
};

/// Self-describing parameter archive: magic "MSACCKPT", u32 version,
/// u64 header length, JSON header (model config, tensor index, metadata),
/// then little-endian float32 payload.
void save_checkpoint(const std::filesystem::path& path, MsacNet& net, const nlohmann::json& metadata = {});

struct LoadedCheckpoint {
  MsacNet net;
  nlohmann::json metadata;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace msac
