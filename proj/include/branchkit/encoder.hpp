#pragma once

#include <functional>
#include <string_view>
#include <variant>

#include "branchkit/attention.hpp"
#include "branchkit/nn.hpp"

namespace branchkit::nn {

struct FFNParams {
  LinearParams in;   // d -> d_ff
  LinearParams out;  // d_ff -> d
  double dropout = 0.1;

  static FFNParams init(std::int64_t d, std::int64_t d_ff, double dropout, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out_map) const;
};

// out(dropout(swish(in(x)))). The half-step residual weight belongs to the
// layer, not to the FFN itself.
Tensor ffn_forward(const Tensor& x, const FFNParams& p, Mode mode, std::mt19937_64* rng);

struct ConvModuleParams {
  LinearParams pw1;        // d -> 2d
  DepthwiseConvParams dw;  // d channels
  BatchNormParams bn;
  LinearParams pw2;  // d -> d
  double dropout = 0.1;

  static ConvModuleParams init(std::int64_t d, std::int64_t kernel, double dropout,
                               std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out_map) const;
};

// Pointwise conv -> GLU -> depthwise conv -> batch norm -> Swish -> pointwise.
Tensor conv_module_forward(const Tensor& x, ConvModuleParams& p, const SeqMask& mask, Mode mode);

struct CgMLPParams {
  LayerNormParams pre_norm;   // over d
  LinearParams u;             // d -> d_mlp
  LayerNormParams gate_norm;  // over d_mlp/2
  DepthwiseConvParams dw;     // d_mlp/2 channels
  Tensor gate_bias;           // [d_mlp/2]; undefined when disabled
  LinearParams v;             // d_mlp/2 -> d
  double dropout = 0.1;

  static CgMLPParams init(std::int64_t d, std::int64_t d_mlp, std::int64_t kernel, double dropout,
                          bool with_gate_bias, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out_map) const;
};

// Z = GeLU(LayerNorm(x) U); (A,B) = Split(Z); Zt = A (*) DwConv(LayerNorm(B));
// out = Dropout(Zt V).
Tensor cgmlp_forward(const Tensor& x, const CgMLPParams& p, const SeqMask& mask, Mode mode,
                     std::mt19937_64* rng);

enum class MergeMode { additive, conv_in_place };

struct MergeParams {
  DepthwiseConvParams dw;  // 2d channels
  LinearParams proj;       // 2d -> d

  static MergeParams init(std::int64_t d, std::int64_t kernel, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out_map) const;
};

// Concatenation of the two branches, refined by a depthwise convolution, then
// projected back to width d. In additive mode the projection sees
// c + DwConv(c); conv_in_place projects DwConv(c) alone.
Tensor merge_branches(const Tensor& x_att, const Tensor& x_mlp, const MergeParams& p,
                      const SeqMask& mask, MergeMode mode = MergeMode::additive);

struct ConformerLayerParams {
  LayerNormParams norm_ffn1, norm_mha, norm_conv, norm_ffn2, norm_final;
  FFNParams ffn1, ffn2;
  RelPosMHAParams mha;
  ConvModuleParams conv;
  double dropout = 0.1;  // applied to each sub-block output before the residual add

  void collect(const std::string& prefix, ParamMap& out_map) const;
};

Tensor conformer_layer(const Tensor& x, ConformerLayerParams& p, const SeqMask& mask, Mode mode,
                       std::mt19937_64* rng);

struct EBranchformerLayerParams {
  LayerNormParams norm_ffn1, norm_mha, norm_ffn2, norm_final;
  FFNParams ffn1, ffn2;
  RelPosMHAParams mha;
  CgMLPParams cgmlp;
  MergeParams merge;
  MergeMode merge_mode = MergeMode::additive;
  double dropout = 0.1;

  void collect(const std::string& prefix, ParamMap& out_map) const;
};

Tensor ebranchformer_layer(const Tensor& x, EBranchformerLayerParams& p, const SeqMask& mask,
                           Mode mode, std::mt19937_64* rng);

// Whole-layer skip: in train mode the layer is bypassed with probability
// p_drop; eval always runs it.
Tensor stochastic_depth(const std::function<Tensor(const Tensor&)>& layer_fn, const Tensor& x,
                        double p_drop, Mode mode, std::mt19937_64* rng);

struct SpecAugmentConfig {
  std::int64_t n_time_masks = 0;
  std::int64_t max_time_width = 0;
  std::int64_t n_freq_masks = 0;
  std::int64_t max_freq_width = 0;
};

// Zeroes random time spans and frequency bands, sampled per sequence. Widths
// larger than the axis are clipped.
Tensor spec_augment(const Tensor& feats, const SpecAugmentConfig& cfg, std::mt19937_64& rng);

enum class LayerKind { conformer, e_branchformer };

struct EncoderConfig {
  LayerKind kind = LayerKind::e_branchformer;
  std::int64_t num_layers = 12;
  std::int64_t d = 256;
  std::int64_t heads = 4;
  double ffn_expansion = 4.0;
  double mlp_expansion = 4.0;
  std::int64_t k_conv = 31;
  std::int64_t k_mlp = 31;
  std::int64_t k_merge = 3;
  double dropout = 0.1;
  double attn_dropout = 0.1;
  double stochastic_depth = 0.0;
  std::int64_t feat_dim = 80;
  MergeMode merge_mode = MergeMode::additive;
  bool cgmlp_gate_bias = false;

  std::int64_t d_ff() const;
  std::int64_t d_mlp() const;

  // medium-conformer-deep | medium-conformer-wide | medium-ebranchformer |
  // large-ebranchformer
  static EncoderConfig preset(std::string_view name);
};

struct EncoderParams {
  EncoderConfig cfg;
  SubsamplingParams subsample;
  std::vector<std::variant<ConformerLayerParams, EBranchformerLayerParams>> layers;

  static EncoderParams init(const EncoderConfig& cfg, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out_map) const;
};

// Subsampling frontend followed by the layer stack (with stochastic depth in
// train mode). Each layer already ends in LayerNorm; no extra final norm.
std::pair<Tensor, std::vector<std::int64_t>> encoder_forward(const Tensor& feats,
                                                             const std::vector<std::int64_t>& lengths,
                                                             EncoderParams& params, Mode mode,
                                                             std::mt19937_64* rng);

}  // namespace branchkit::nn
