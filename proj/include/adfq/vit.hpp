#pragma once

#include <bitset>
#include <cstdint>
#include <optional>
#include <vector>

#include "adfq/autodiff.hpp"
#include "adfq/bundle.hpp"
#include "adfq/tensor.hpp"

namespace adfq {

/// Architecture of the toy Vision Transformer. Defaults: 32x32x3 images,
/// 8x8 patches (16 tokens), d = 64, 4 heads, 4 blocks, 10 classes.
struct ViTConfig {
  Index image_h = 32;
  Index image_w = 32;
  Index channels = 3;
  Index patch_h = 8;
  Index patch_w = 8;
  Index dim = 64;
  Index heads = 4;
  Index blocks = 4;
  Index mlp_dim = 256;
  Index num_classes = 10;
  double ln_eps = kLayerNormEps;

  Index num_patches() const { return (image_h / patch_h) * (image_w / patch_w); }
  Index patch_dim() const { return patch_h * patch_w * channels; }
  Index head_dim() const { return dim / heads; }
  void validate() const;

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

struct BlockWeights {
  RowVector ln1_gamma, ln1_beta;
  Matrix qkv_w;  // d x 3d, columns [Q | K | V]
  RowVector qkv_b;
  Matrix proj_w;  // d x d
  RowVector proj_b;
  RowVector ln2_gamma, ln2_beta;
  Matrix fc1_w;  // d x mlp
  RowVector fc1_b;
  Matrix fc2_w;  // mlp x d
  RowVector fc2_b;

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

/// No class token: the readout is a mean over patch tokens followed by a
/// linear head.
struct ViTModel {
  ViTConfig config;
  Matrix patch_w;  // patch_dim x d
  RowVector patch_b;
  Matrix pos;  // n x d
  std::vector<BlockWeights> blocks;
  Matrix head_w;  // d x classes
  RowVector head_b;

  /// Throws DimensionError naming the first tensor inconsistent with config.
  void validate() const;
  bool all_finite() const;

  friend bool operator==(const ViTModel&, const ViTModel&) = default;
};

/// Visit every parameter with its canonical name. Row vectors are reported
/// as 1-D tensors.
template <typename Model, typename F>
void for_each_parameter(Model& model, F&& f) {
  f("patch.weight", model.patch_w);
  f("patch.bias", model.patch_b);
  f("pos_embed", model.pos);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    auto& b = model.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "ln1.gamma", b.ln1_gamma);
    f(p + "ln1.beta", b.ln1_beta);
    f(p + "qkv.weight", b.qkv_w);
    f(p + "qkv.bias", b.qkv_b);
    f(p + "proj.weight", b.proj_w);
    f(p + "proj.bias", b.proj_b);
    f(p + "ln2.gamma", b.ln2_gamma);
    f(p + "ln2.beta", b.ln2_beta);
    f(p + "fc1.weight", b.fc1_w);
    f(p + "fc1.bias", b.fc1_b);
    f(p + "fc2.weight", b.fc2_w);
    f(p + "fc2.bias", b.fc2_b);
  }
  f("head.weight", model.head_w);
  f("head.bias", model.head_b);
}

/// Seeded random initialization; every value is binary32-representable.
ViTModel init_model(const ViTConfig& config, std::uint64_t seed);
/// All weights and biases zero, LayerNorm gamma one.
ViTModel zero_model(const ViTConfig& config);

/// n x patch_dim matrix of flattened patches (row-major patch order, each
/// patch flattened as (row, col, channel)).
Matrix extract_patches(const Tensor& image, const ViTConfig& config);
Matrix patch_embed(const Tensor& image, const ViTModel& model);

/// Graph handles for the model parameters.
struct BlockVars {
  ad::Var ln1_gamma, ln1_beta, qkv_w, qkv_b, proj_w, proj_b;
  ad::Var ln2_gamma, ln2_beta, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct ModelVars {
  ad::Var patch_w, patch_b, pos, head_w, head_b;
  std::vector<BlockVars> blocks;
};

BlockVars block_vars(const BlockWeights& w, bool trainable);
ModelVars model_vars(const ViTModel& model, bool trainable);

/// Quantized view of one block inside a graph: per-site uniform scales
/// (groups x 1) and dequantized weight nodes.
struct QuantContext {
  const BlockQuant* spec = nullptr;
  std::array<ad::Var, kSitesPerBlock> act_scale;
  ad::Var qkv_w, proj_w, fc1_w, fc2_w;
  ad::RoundingTape* tape = nullptr;
};

/// Inference context: hardened weights and calibrated scales as constants.
QuantContext hard_context(const BlockQuant& spec, const BlockWeights& w);

/// Which intermediate values a forward pass records.
struct TapFilter {
  std::bitset<kSitesPerBlock> sites;
  bool site_outputs = false;  // also record the quantizer output at each tapped site
  bool module_io = false;     // record module inputs/outputs and attention probabilities

  static TapFilter none() { return {}; }
  static TapFilter all_sites() {
    TapFilter f;
    f.sites.set();
    return f;
  }
  static TapFilter modules() {
    TapFilter f;
    f.module_io = true;
    return f;
  }
  bool any() const { return sites.any() || module_io; }
};

struct BlockTrace {
  std::array<std::optional<Matrix>, kSitesPerBlock> site_input;
  std::array<std::optional<Matrix>, kSitesPerBlock> site_output;
  Matrix mha_in, mha_out, mlp_in, mlp_out;
  std::vector<Matrix> probs;  // per head, n x n
};

struct ForwardTrace {
  Matrix x0;
  std::vector<BlockTrace> blocks;
};

struct MhaResult {
  ad::Var out;
  std::vector<ad::Var> probs;  // per head; post-quantizer in quantized mode
};

/// Attention module: LayerNorm, QKV, per-head softmax attention, output
/// projection. No residual. `q` selects the quantized path.
MhaResult mha_forward(const ad::Var& x, const BlockVars& w, const ViTConfig& config, const QuantContext* q,
                      BlockTrace* trace = nullptr, const TapFilter& filter = {});

/// MLP module: LayerNorm, FC1, GELU, FC2. No residual.
ad::Var mlp_forward(const ad::Var& x, const BlockVars& w, const ViTConfig& config, const QuantContext* q,
                    BlockTrace* trace = nullptr, const TapFilter& filter = {});

/// Full forward returning 1 x classes logits.
ad::Var model_forward_graph(const Tensor& image, const ModelVars& vars, const ViTConfig& config,
                            const std::vector<QuantContext>* quant, ForwardTrace* trace = nullptr,
                            const TapFilter& filter = {});

struct ForwardResult {
  RowVector logits;
  ForwardTrace trace;
};

/// Reusable inference state over a fixed model and optional bundle.
class InferenceSession {
 public:
  InferenceSession(const ViTModel& model, const QuantBundle* bundle);
  ForwardResult run(const Tensor& image, const TapFilter& filter = {}) const;
  const ViTModel& model() const noexcept { return *model_; }

 private:
  const ViTModel* model_;
  ModelVars vars_;
  std::optional<std::vector<QuantContext>> quant_;
};

ForwardResult model_forward(const Tensor& image, const ViTModel& model, const QuantBundle* bundle = nullptr,
                            const TapFilter& filter = {});

}  // namespace adfq
