#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "branchkit/ops.hpp"

namespace branchkit::nn {

using ad::Shape;
using ad::Tensor;

enum class Mode { train, eval };

/// Ordered list of (name, parameter); ordering is deterministic and defines
/// both the optimizer iteration order and the checkpoint layout.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

/// Frame validity of a padded batch: lengths per sequence plus materialized
/// 0/1 masks ([B,T] and [B,T,1]), constant w.r.t. the tape.
struct SeqMask {
  std::vector<std::int64_t> lengths;
  std::int64_t batch = 0;
  std::int64_t frames = 0;
  Tensor mask2;
  Tensor mask3;

  static SeqMask from_lengths(std::vector<std::int64_t> lengths, std::int64_t frames);
  static SeqMask full(std::int64_t batch, std::int64_t frames);
  std::int64_t valid_count() const;
};

void fill_uniform(Tensor& t, double lo, double hi, std::mt19937_64& rng);
void xavier_uniform(Tensor& t, std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng);

struct LinearParams {
  Tensor weight;  // [d_in, d_out]
  Tensor bias;    // [d_out]; undefined when the layer has no bias

  static LinearParams init(std::int64_t d_in, std::int64_t d_out, bool with_bias,
                           std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out) const;
  std::int64_t d_in() const { return weight.extent(0); }
  std::int64_t d_out() const { return weight.extent(1); }
};

// x[..., d_in] -> x W + b
Tensor linear(const Tensor& x, const LinearParams& p);
// Identical contract applied per frame; alias kept for the architecture code.
Tensor pointwise_conv(const Tensor& x, const LinearParams& p);

Tensor swish(const Tensor& x);  // x * sigmoid(x)
Tensor gelu(const Tensor& x);   // exact Gaussian form x * Phi(x), via erf
Tensor glu(const Tensor& x);    // first half gated by sigmoid of second half

struct LayerNormParams {
  Tensor gain;
  Tensor shift;
  double eps = 1e-12;

  static LayerNormParams init(std::int64_t d);
  void collect(const std::string& prefix, ParamMap& out) const;
};

// Normalizes over the trailing feature axis with population variance.
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

struct BatchNormParams {
  Tensor gain;
  Tensor shift;
  // Buffers, not parameters: requires_grad stays false, so they are skipped
  // by the optimizer and parameter counts but still travel with checkpoints.
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormParams init(std::int64_t channels);
  void collect(const std::string& prefix, ParamMap& out) const;
};

// Per-channel normalization over all valid (batch, time) positions. Train
// mode uses batch statistics (and updates the running ones); eval mode uses
// the running statistics. Padded frames never contribute to statistics.
Tensor batch_norm(const Tensor& x, BatchNormParams& p, Mode mode, const SeqMask& mask);

struct DepthwiseConvParams {
  Tensor kernel;  // [channels, k], k odd
  Tensor bias;    // [channels]

  static DepthwiseConvParams init(std::int64_t channels, std::int64_t k, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out) const;
  std::int64_t kernel_size() const { return kernel.extent(1); }
};

// Same-length per-channel 1-D convolution with zero padding (k-1)/2 on each
// side. Padded frames are zeroed before the convolution.
Tensor depthwise_conv1d(const Tensor& x, const DepthwiseConvParams& p, const SeqMask& mask);

// Inverted dropout: kept values are scaled by 1/(1-rate); eval is identity.
Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64* rng);

struct Conv2dParams {
  Tensor kernel;  // [c_out, c_in, 3, 3]
  Tensor bias;    // [c_out]

  static Conv2dParams init(std::int64_t c_in, std::int64_t c_out, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out) const;
};

// 3x3 stride-2 valid convolution on [B, C, H, W].
Tensor conv2d_s2_valid(const Tensor& x, const Conv2dParams& p);

struct SubsamplingParams {
  Conv2dParams conv1;  // 1 -> d
  Conv2dParams conv2;  // d -> d
  LinearParams out;    // d * f2 -> d
  std::int64_t model_dim = 0;
  std::int64_t feat_dim = 0;

  static SubsamplingParams init(std::int64_t feat_dim, std::int64_t d, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out) const;
};

// Length recurrence of two stride-2 valid 3x3 stages.
std::int64_t subsampled_extent(std::int64_t n);

// feats [B,T,F] -> ([B,T',d], lengths'), T' = subsampled_extent(T).
std::pair<Tensor, std::vector<std::int64_t>> conv2d_subsample(
    const Tensor& feats, const std::vector<std::int64_t>& lengths, const SubsamplingParams& p);

}  // namespace branchkit::nn
