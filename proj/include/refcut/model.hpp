#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "refcut/click_encoding.hpp"
#include "refcut/image.hpp"
#include "refcut/maskops.hpp"
#include "refcut/model_config.hpp"
#include "refcut/nn/kernels.hpp"
#include "refcut/nn/matrix.hpp"

namespace refcut {

using nn::Matrix;

template <typename T>
struct LinearParams {
  Matrix<T> weight;  // out x in
  std::vector<T> bias;
};

template <typename T>
struct LayerNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
struct BlockParams {
  LayerNormParams<T> norm1;
  LinearParams<T> qkv;
  LinearParams<T> proj;
  LayerNormParams<T> norm2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;
};

/// Simple feature pyramid over the last token grid (x4, x2, x1, x0.5) followed
/// by a small convolutional segmentation head.
template <typename T>
struct DecoderParams {
  LayerNormParams<T> norm;
  LinearParams<T> up4_a;  // C -> 4 * C/2, pixel-shuffled
  LinearParams<T> up4_b;  // C/2 -> 4 * C/4
  LinearParams<T> up2;    // C -> 4 * C/2
  LinearParams<T> lateral4;
  LinearParams<T> lateral2;
  LinearParams<T> lateral1;
  LinearParams<T> lateral_half;
  LinearParams<T> fuse;  // 3x3 conv, D -> D (weights over [ky][kx][c])
  LinearParams<T> head;  // D -> 1
};

template <typename T>
struct PromptMlpParams {
  LinearParams<T> fc1;
  LinearParams<T> fc2;
};

template <typename T>
struct ModelParams {
  LinearParams<T> image_embed;
  Matrix<T> pos_embed;  // tokens x C
  LinearParams<T> extra_embed;
  std::vector<BlockParams<T>> blocks;
  DecoderParams<T> decoder;
  PromptMlpParams<T> positive_mlp;
  PromptMlpParams<T> negative_mlp;
};

/// Named view of one parameter array.
template <typename T>
struct ParamRef {
  std::string name;
  std::vector<int> shape;
  std::span<T> values;
};

/// Parameter groups used for gradient-flow diagnostics.
enum class ParamGroup { ImageEmbed, ExtraEmbed, Backbone, Decoder, PositiveMlp, NegativeMlp };
std::string_view to_string(ParamGroup g);
ParamGroup group_of(std::string_view param_name);

/// Zero-initialised parameters with the shapes implied by `config`.
template <typename T>
ModelParams<T> zero_params(const ModelConfig& config);

/// Truncated-normal weights, unit LayerNorm scales, zero biases.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed);

/// Deterministic, stable ordering of all parameter arrays.
template <typename T>
std::vector<ParamRef<T>> param_refs(ModelParams<T>& p);
template <typename T>
std::vector<ParamRef<const T>> param_refs(const ModelParams<T>& p);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p, const ModelConfig& config);

template <typename T>
struct TokenFeature {
  int grid_h = 0;
  int grid_w = 0;
  Matrix<T> tokens;  // (grid_h * grid_w) x C
};

/// A prompt vector to be broadcast onto every token. Empty or all-zero
/// vectors are skipped entirely, so they cannot perturb the result.
template <typename T>
struct PromptPair {
  std::vector<T> positive;
  std::vector<T> negative;
};

// Activations kept from a forward pass for the matching backward pass.
template <typename T>
struct BlockTrace {
  Matrix<T> input;
  nn::kernels::LayerNormStats<T> norm1;
  Matrix<T> normed1;
  Matrix<T> qkv;
  std::vector<Matrix<T>> attn_probs;
  Matrix<T> attn_out;
  Matrix<T> mid;
  nn::kernels::LayerNormStats<T> norm2;
  Matrix<T> normed2;
  Matrix<T> hidden;
  Matrix<T> activated;
};

template <typename T>
struct BackboneTrace {
  std::vector<BlockTrace<T>> blocks;
};

template <typename T>
struct DecoderTrace {
  Matrix<T> input;
  nn::kernels::LayerNormStats<T> norm;
  Matrix<T> normed;
  Matrix<T> up4_a;
  Matrix<T> up4_a_act;
  Matrix<T> up4_b;
  Matrix<T> up2;
  Matrix<T> pooled;
  Matrix<T> summed;
  Matrix<T> summed_act;
  Matrix<T> fuse_cols;
  Matrix<T> fused;
  Matrix<T> fused_act;
};

template <typename T>
struct PromptMlpTrace {
  Matrix<T> input;  // 1 x C
  Matrix<T> hidden;
  Matrix<T> activated;
};

/// The interactive segmentation network: image and extra-map patch
/// embeddings, additive reference prompts, a pre-norm ViT backbone and a
/// feature-pyramid decoder. All forward methods are const and thread-safe.
template <typename T>
class RefCutNet {
 public:
  RefCutNet(ModelConfig config, ModelParams<T> params);

  const ModelConfig& config() const { return config_; }
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& mutable_params() { return params_; }

  /// Image in [0, 1] -> centred patch rows, tokens x (3 * p * p).
  Matrix<T> patchify(const Image& image) const;
  Matrix<T> patchify(const ExtraMaps& maps) const;

  /// Patch projection of network-ready patch rows plus the positional table.
  TokenFeature<T> embed_image_patches(const Matrix<T>& patches) const;
  TokenFeature<T> embed_image(const Image& image) const;
  TokenFeature<T> embed_extras(const ExtraMaps& maps) const;

  static TokenFeature<T> fuse(const TokenFeature<T>& image_tokens,
                              const TokenFeature<T>& extra_tokens, const PromptPair<T>& prompts);

  TokenFeature<T> backbone(const TokenFeature<T>& tokens, BackboneTrace<T>* trace = nullptr) const;

  /// input_size x input_size logits (rows x cols).
  Matrix<T> decode_logits(const TokenFeature<T>& tokens, DecoderTrace<T>* trace = nullptr) const;
  SoftMask decode(const TokenFeature<T>& tokens) const;

  /// Polarity-specific two-layer MLP over a pooled C-vector.
  std::vector<T> prompt_mlp(const std::vector<T>& representation, Polarity polarity,
                            PromptMlpTrace<T>* trace = nullptr) const;

  SoftMask predict(const Image& image, std::span<const Click> clicks, const SoftMask& prev,
                   const PromptPair<T>& prompts) const;

  // Backward passes. Each accumulates parameter gradients into `grads` and
  // returns the gradient with respect to its input.
  Matrix<T> decoder_backward(const DecoderTrace<T>& trace, const Matrix<T>& dlogits,
                             ModelParams<T>& grads) const;
  Matrix<T> backbone_backward(const BackboneTrace<T>& trace, const Matrix<T>& doutput,
                              ModelParams<T>& grads) const;
  std::vector<T> prompt_mlp_backward(const PromptMlpTrace<T>& trace, const std::vector<T>& dout,
                                     Polarity polarity, ModelParams<T>& grads) const;
  /// Gradient of tokens w.r.t. the image embedding parameters (incl. positions).
  void image_embed_backward(const Matrix<T>& patches, const Matrix<T>& dtokens,
                            ModelParams<T>& grads) const;
  void extra_embed_backward(const Matrix<T>& patches, const Matrix<T>& dtokens,
                            ModelParams<T>& grads) const;

 private:
  Matrix<T> block_forward(const BlockParams<T>& p, const Matrix<T>& x, BlockTrace<T>* trace) const;
  Matrix<T> block_backward(const BlockParams<T>& p, const BlockTrace<T>& t, const Matrix<T>& dy,
                           BlockParams<T>& g) const;

  ModelConfig config_;
  ModelParams<T> params_;
};

/// Resamples a learned positional table to a new token grid (bilinear).
template <typename T>
Matrix<T> resize_position_table(const Matrix<T>& table, int grid, int new_grid);

}  // namespace refcut
