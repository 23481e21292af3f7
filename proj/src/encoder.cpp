#include "branchkit/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace branchkit::nn {

FFNParams FFNParams::init(std::int64_t d, std::int64_t d_ff, double dropout,
                          std::mt19937_64& rng) {
  FFNParams p;
  p.in = LinearParams::init(d, d_ff, true, rng);
  p.out = LinearParams::init(d_ff, d, true, rng);
  p.dropout = dropout;
  return p;
}

void FFNParams::collect(const std::string& prefix, ParamMap& out_map) const {
  in.collect(prefix + ".in", out_map);
  out.collect(prefix + ".out", out_map);
}

Tensor ffn_forward(const Tensor& x, const FFNParams& p, Mode mode, std::mt19937_64* rng) {
  Tensor h = swish(linear(x, p.in));
  h = dropout(h, p.dropout, mode, rng);
  return linear(h, p.out);
}

ConvModuleParams ConvModuleParams::init(std::int64_t d, std::int64_t kernel, double dropout,
                                        std::mt19937_64& rng) {
  ConvModuleParams p;
  p.pw1 = LinearParams::init(d, 2 * d, true, rng);
  p.dw = DepthwiseConvParams::init(d, kernel, rng);
  p.bn = BatchNormParams::init(d);
  p.pw2 = LinearParams::init(d, d, true, rng);
  p.dropout = dropout;
  return p;
}

void ConvModuleParams::collect(const std::string& prefix, ParamMap& out_map) const {
  pw1.collect(prefix + ".pw1", out_map);
  dw.collect(prefix + ".dw", out_map);
  bn.collect(prefix + ".bn", out_map);
  pw2.collect(prefix + ".pw2", out_map);
}

Tensor conv_module_forward(const Tensor& x, ConvModuleParams& p, const SeqMask& mask, Mode mode) {
  Tensor h = pointwise_conv(x, p.pw1);
  h = glu(h);
  h = depthwise_conv1d(h, p.dw, mask);
  h = batch_norm(h, p.bn, mode, mask);
  h = swish(h);
  return pointwise_conv(h, p.pw2);
}

CgMLPParams CgMLPParams::init(std::int64_t d, std::int64_t d_mlp, std::int64_t kernel,
                              double dropout, bool with_gate_bias, std::mt19937_64& rng) {
  if (d_mlp % 2 != 0) {
    throw std::invalid_argument("cgmlp: d_mlp " + std::to_string(d_mlp) + " must be even");
  }
  CgMLPParams p;
  p.pre_norm = LayerNormParams::init(d);
  p.u = LinearParams::init(d, d_mlp, true, rng);
  p.gate_norm = LayerNormParams::init(d_mlp / 2);
  p.dw = DepthwiseConvParams::init(d_mlp / 2, kernel, rng);
  if (with_gate_bias) p.gate_bias = Tensor::zeros({d_mlp / 2}, true);
  p.v = LinearParams::init(d_mlp / 2, d, true, rng);
  p.dropout = dropout;
  return p;
}

void CgMLPParams::collect(const std::string& prefix, ParamMap& out_map) const {
  pre_norm.collect(prefix + ".pre_norm", out_map);
  u.collect(prefix + ".u", out_map);
  gate_norm.collect(prefix + ".gate_norm", out_map);
  dw.collect(prefix + ".dw", out_map);
  if (gate_bias.defined()) out_map.emplace_back(prefix + ".gate_bias", gate_bias);
  v.collect(prefix + ".v", out_map);
}

Tensor cgmlp_forward(const Tensor& x, const CgMLPParams& p, const SeqMask& mask, Mode mode,
                     std::mt19937_64* rng) {
  Tensor z = gelu(linear(layer_norm(x, p.pre_norm), p.u));
  auto [a, b] = ad::split2(z, z.rank() - 1);
  Tensor gate = depthwise_conv1d(layer_norm(b, p.gate_norm), p.dw, mask);
  if (p.gate_bias.defined()) gate = ad::add(gate, p.gate_bias);
  Tensor gated = ad::mul(a, gate);
  return dropout(linear(gated, p.v), p.dropout, mode, rng);
}

MergeParams MergeParams::init(std::int64_t d, std::int64_t kernel, std::mt19937_64& rng) {
  MergeParams p;
  p.dw = DepthwiseConvParams::init(2 * d, kernel, rng);
  p.proj = LinearParams::init(2 * d, d, true, rng);
  return p;
}

void MergeParams::collect(const std::string& prefix, ParamMap& out_map) const {
  dw.collect(prefix + ".dw", out_map);
  proj.collect(prefix + ".proj", out_map);
}

Tensor merge_branches(const Tensor& x_att, const Tensor& x_mlp, const MergeParams& p,
                      const SeqMask& mask, MergeMode mode) {
  if (x_att.shape() != x_mlp.shape()) {
    throw std::invalid_argument("merge_branches: branch shapes differ, " +
                                ad::shape_str(x_att.shape()) + " vs " +
                                ad::shape_str(x_mlp.shape()));
  }
  Tensor c = ad::concat({x_att, x_mlp}, x_att.rank() - 1);
  Tensor refined = depthwise_conv1d(c, p.dw, mask);
  Tensor h = mode == MergeMode::additive ? ad::add(c, refined) : refined;
  return linear(h, p.proj);
}

void ConformerLayerParams::collect(const std::string& prefix, ParamMap& out_map) const {
  norm_ffn1.collect(prefix + ".norm_ffn1", out_map);
  ffn1.collect(prefix + ".ffn1", out_map);
  norm_mha.collect(prefix + ".norm_mha", out_map);
  mha.collect(prefix + ".mha", out_map);
  norm_conv.collect(prefix + ".norm_conv", out_map);
  conv.collect(prefix + ".conv", out_map);
  norm_ffn2.collect(prefix + ".norm_ffn2", out_map);
  ffn2.collect(prefix + ".ffn2", out_map);
  norm_final.collect(prefix + ".norm_final", out_map);
}

Tensor conformer_layer(const Tensor& x, ConformerLayerParams& p, const SeqMask& mask, Mode mode,
                       std::mt19937_64* rng) {
  Tensor x1 = ad::add(
      x, ad::scale(dropout(ffn_forward(layer_norm(x, p.norm_ffn1), p.ffn1, mode, rng), p.dropout,
                           mode, rng),
                   0.5));
  Tensor x2 = ad::add(
      x1, dropout(mha_forward(layer_norm(x1, p.norm_mha), p.mha, mask, mode, rng), p.dropout, mode,
                  rng));
  Tensor x3 = ad::add(
      x2, dropout(conv_module_forward(layer_norm(x2, p.norm_conv), p.conv, mask, mode), p.dropout,
                  mode, rng));
  Tensor x4 = ad::add(
      x3, ad::scale(dropout(ffn_forward(layer_norm(x3, p.norm_ffn2), p.ffn2, mode, rng), p.dropout,
                            mode, rng),
                    0.5));
  return layer_norm(x4, p.norm_final);
}

void EBranchformerLayerParams::collect(const std::string& prefix, ParamMap& out_map) const {
  norm_ffn1.collect(prefix + ".norm_ffn1", out_map);
  ffn1.collect(prefix + ".ffn1", out_map);
  norm_mha.collect(prefix + ".norm_mha", out_map);
  mha.collect(prefix + ".mha", out_map);
  cgmlp.collect(prefix + ".cgmlp", out_map);
  merge.collect(prefix + ".merge", out_map);
  norm_ffn2.collect(prefix + ".norm_ffn2", out_map);
  ffn2.collect(prefix + ".ffn2", out_map);
  norm_final.collect(prefix + ".norm_final", out_map);
}

Tensor ebranchformer_layer(const Tensor& x, EBranchformerLayerParams& p, const SeqMask& mask,
                           Mode mode, std::mt19937_64* rng) {
  Tensor x1 = ad::add(
      x, ad::scale(dropout(ffn_forward(layer_norm(x, p.norm_ffn1), p.ffn1, mode, rng), p.dropout,
                           mode, rng),
                   0.5));
  // Both branches read the same x1; the MHA branch is pre-normed by the layer
  // while cgMLP starts with its own LayerNorm.
  Tensor att = mha_forward(layer_norm(x1, p.norm_mha), p.mha, mask, mode, rng);
  Tensor mlp = cgmlp_forward(x1, p.cgmlp, mask, mode, rng);
  Tensor x2 = ad::add(
      x1, dropout(merge_branches(att, mlp, p.merge, mask, p.merge_mode), p.dropout, mode, rng));
  Tensor x3 = ad::add(
      x2, ad::scale(dropout(ffn_forward(layer_norm(x2, p.norm_ffn2), p.ffn2, mode, rng), p.dropout,
                            mode, rng),
                    0.5));
  return layer_norm(x3, p.norm_final);
}

Tensor stochastic_depth(const std::function<Tensor(const Tensor&)>& layer_fn, const Tensor& x,
                        double p_drop, Mode mode, std::mt19937_64* rng) {
  if (p_drop < 0.0 || p_drop >= 1.0) {
    throw std::invalid_argument("stochastic_depth: p_drop outside [0,1)");
  }
  if (mode == Mode::train && p_drop > 0.0) {
    if (rng == nullptr) throw std::invalid_argument("stochastic_depth: train mode requires rng");
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    if (dist(*rng) < p_drop) return x;
  }
  return layer_fn(x);
}

Tensor spec_augment(const Tensor& feats, const SpecAugmentConfig& cfg, std::mt19937_64& rng) {
  if (feats.rank() != 3) {
    throw std::invalid_argument("spec_augment: expected [batch, frames, feat], got " +
                                ad::shape_str(feats.shape()));
  }
  const std::int64_t batch = feats.extent(0), frames = feats.extent(1), fdim = feats.extent(2);
  std::vector<double> v = feats.data();
  auto uniform = [&rng](std::int64_t lo, std::int64_t hi) {  // inclusive bounds
    std::uniform_int_distribution<std::int64_t> dist(lo, hi);
    return dist(rng);
  };
  for (std::int64_t b = 0; b < batch; ++b) {
    double* seq = v.data() + b * frames * fdim;
    for (std::int64_t m = 0; m < cfg.n_time_masks; ++m) {
      const std::int64_t width = std::min(uniform(0, cfg.max_time_width), frames);
      const std::int64_t start = uniform(0, frames - width);
      for (std::int64_t t = start; t < start + width; ++t) {
        for (std::int64_t f = 0; f < fdim; ++f) seq[t * fdim + f] = 0.0;
      }
    }
    for (std::int64_t m = 0; m < cfg.n_freq_masks; ++m) {
      const std::int64_t width = std::min(uniform(0, cfg.max_freq_width), fdim);
      const std::int64_t start = uniform(0, fdim - width);
      for (std::int64_t t = 0; t < frames; ++t) {
        for (std::int64_t f = start; f < start + width; ++f) seq[t * fdim + f] = 0.0;
      }
    }
  }
  return Tensor::from_data(feats.shape(), std::move(v));
}

std::int64_t EncoderConfig::d_ff() const {
  return static_cast<std::int64_t>(std::llround(ffn_expansion * static_cast<double>(d)));
}

std::int64_t EncoderConfig::d_mlp() const {
  return static_cast<std::int64_t>(std::llround(mlp_expansion * static_cast<double>(d)));
}

EncoderConfig EncoderConfig::preset(std::string_view name) {
  EncoderConfig c;
  if (name == "medium-conformer-deep") {
    c.kind = LayerKind::conformer;
    c.num_layers = 15;
    c.d = 256;
    c.heads = 4;
    c.ffn_expansion = 4.0;
  } else if (name == "medium-conformer-wide") {
    c.kind = LayerKind::conformer;
    c.num_layers = 12;
    c.d = 256;
    c.heads = 4;
    c.ffn_expansion = 8.0;
  } else if (name == "medium-ebranchformer") {
    c.kind = LayerKind::e_branchformer;
    c.num_layers = 12;
    c.d = 256;
    c.heads = 4;
    c.ffn_expansion = 4.0;
    c.mlp_expansion = 4.0;
  } else if (name == "large-ebranchformer") {
    c.kind = LayerKind::e_branchformer;
    c.num_layers = 17;
    c.d = 512;
    c.heads = 8;
    c.ffn_expansion = 2.0;
    c.mlp_expansion = 6.0;
  } else {
    throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

EncoderParams EncoderParams::init(const EncoderConfig& cfg, std::mt19937_64& rng) {
  EncoderParams p;
  p.cfg = cfg;
  p.subsample = SubsamplingParams::init(cfg.feat_dim, cfg.d, rng);
  p.layers.reserve(static_cast<std::size_t>(cfg.num_layers));
  for (std::int64_t i = 0; i < cfg.num_layers; ++i) {
    if (cfg.kind == LayerKind::conformer) {
      ConformerLayerParams lp;
      lp.norm_ffn1 = LayerNormParams::init(cfg.d);
      lp.ffn1 = FFNParams::init(cfg.d, cfg.d_ff(), cfg.dropout, rng);
      lp.norm_mha = LayerNormParams::init(cfg.d);
      lp.mha = RelPosMHAParams::init(cfg.d, cfg.heads, cfg.attn_dropout, rng);
      lp.norm_conv = LayerNormParams::init(cfg.d);
      lp.conv = ConvModuleParams::init(cfg.d, cfg.k_conv, cfg.dropout, rng);
      lp.norm_ffn2 = LayerNormParams::init(cfg.d);
      lp.ffn2 = FFNParams::init(cfg.d, cfg.d_ff(), cfg.dropout, rng);
      lp.norm_final = LayerNormParams::init(cfg.d);
      lp.dropout = cfg.dropout;
      p.layers.emplace_back(std::move(lp));
    } else {
      EBranchformerLayerParams lp;
      lp.norm_ffn1 = LayerNormParams::init(cfg.d);
      lp.ffn1 = FFNParams::init(cfg.d, cfg.d_ff(), cfg.dropout, rng);
      lp.norm_mha = LayerNormParams::init(cfg.d);
      lp.mha = RelPosMHAParams::init(cfg.d, cfg.heads, cfg.attn_dropout, rng);
      lp.cgmlp = CgMLPParams::init(cfg.d, cfg.d_mlp(), cfg.k_mlp, cfg.dropout,
                                   cfg.cgmlp_gate_bias, rng);
      lp.merge = MergeParams::init(cfg.d, cfg.k_merge, rng);
      lp.merge_mode = cfg.merge_mode;
      lp.norm_ffn2 = LayerNormParams::init(cfg.d);
      lp.ffn2 = FFNParams::init(cfg.d, cfg.d_ff(), cfg.dropout, rng);
      lp.norm_final = LayerNormParams::init(cfg.d);
      lp.dropout = cfg.dropout;
      p.layers.emplace_back(std::move(lp));
    }
  }
  return p;
}

void EncoderParams::collect(const std::string& prefix, ParamMap& out_map) const {
  subsample.collect(prefix + ".subsample", out_map);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string lp = prefix + ".layers." + std::to_string(i);
    std::visit([&](const auto& layer) { layer.collect(lp, out_map); }, layers[i]);
  }
}

std::pair<Tensor, std::vector<std::int64_t>> encoder_forward(
    const Tensor& feats, const std::vector<std::int64_t>& lengths, EncoderParams& params,
    Mode mode, std::mt19937_64* rng) {
  if (feats.extent(2) != params.cfg.feat_dim) {
    throw std::invalid_argument("encoder_forward: feature dim " +
                                std::to_string(feats.extent(2)) + " != configured " +
                                std::to_string(params.cfg.feat_dim));
  }
  auto [h, out_lengths] = conv2d_subsample(feats, lengths, params.subsample);
  SeqMask mask = SeqMask::from_lengths(out_lengths, h.extent(1));
  for (auto& layer : params.layers) {
    auto run = [&](const Tensor& in) {
      if (std::holds_alternative<ConformerLayerParams>(layer)) {
        return conformer_layer(in, std::get<ConformerLayerParams>(layer), mask, mode, rng);
      }
      return ebranchformer_layer(in, std::get<EBranchformerLayerParams>(layer), mask, mode, rng);
    };
    h = stochastic_depth(run, h, params.cfg.stochastic_depth, mode, rng);
  }
  return {h, out_lengths};
}

}  // namespace branchkit::nn
