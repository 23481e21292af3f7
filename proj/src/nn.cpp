#include "branchkit/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace branchkit::nn {

using ad::add_macs;
using ad::recording_for;
using ad::Tape;

SeqMask SeqMask::from_lengths(std::vector<std::int64_t> lengths, std::int64_t frames) {
  SeqMask m;
  m.batch = static_cast<std::int64_t>(lengths.size());
  m.frames = frames;
  std::vector<double> v(static_cast<std::size_t>(m.batch * frames), 0.0);
  for (std::int64_t b = 0; b < m.batch; ++b) {
    const std::int64_t len = lengths[static_cast<std::size_t>(b)];
    if (len < 0 || len > frames) {
      throw std::invalid_argument("SeqMask: length " + std::to_string(len) +
                                  " outside [0, " + std::to_string(frames) + "]");
    }
    for (std::int64_t t = 0; t < len; ++t) v[static_cast<std::size_t>(b * frames + t)] = 1.0;
  }
  m.mask2 = Tensor::from_data({m.batch, frames}, v);
  m.mask3 = Tensor::from_data({m.batch, frames, 1}, std::move(v));
  m.lengths = std::move(lengths);
  return m;
}

SeqMask SeqMask::full(std::int64_t batch, std::int64_t frames) {
  return from_lengths(std::vector<std::int64_t>(static_cast<std::size_t>(batch), frames), frames);
}

std::int64_t SeqMask::valid_count() const {
  std::int64_t n = 0;
  for (auto len : lengths) n += len;
  return n;
}

void fill_uniform(Tensor& t, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
}

void xavier_uniform(Tensor& t, std::int64_t fan_in, std::int64_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  fill_uniform(t, -a, a, rng);
}

LinearParams LinearParams::init(std::int64_t d_in, std::int64_t d_out, bool with_bias,
                                std::mt19937_64& rng) {
  LinearParams p;
  p.weight = Tensor::zeros({d_in, d_out}, true);
  xavier_uniform(p.weight, d_in, d_out, rng);
  if (with_bias) p.bias = Tensor::zeros({d_out}, true);
  return p;
}

void LinearParams::collect(const std::string& prefix, ParamMap& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  const auto& sh = x.shape();
  if (sh.empty() || sh.back() != p.d_in()) {
    throw std::invalid_argument("linear: input " + ad::shape_str(sh) + " incompatible with weight " +
                                ad::shape_str(p.weight.shape()));
  }
  Tensor h;
  if (x.rank() == 2) {
    h = ad::matmul(x, p.weight);
  } else {
    const std::int64_t rows = x.numel() / sh.back();
    Tensor flat = ad::reshape(x, {rows, sh.back()});
    Tensor y = ad::matmul(flat, p.weight);
    Shape out_shape = sh;
    out_shape.back() = p.d_out();
    h = ad::reshape(y, out_shape);
  }
  if (p.bias.defined()) h = ad::add(h, p.bias);
  return h;
}

Tensor pointwise_conv(const Tensor& x, const LinearParams& p) { return linear(x, p); }

Tensor swish(const Tensor& x) { return ad::mul(x, ad::unary(x, ad::Unary::sigmoid)); }

Tensor gelu(const Tensor& x) {
  // x * 0.5 * (1 + erf(x / sqrt(2)))
  Tensor phi = ad::scale(ad::shift(ad::unary(ad::scale(x, 1.0 / std::sqrt(2.0)), ad::Unary::erf), 1.0), 0.5);
  return ad::mul(x, phi);
}

Tensor glu(const Tensor& x) {
  const auto& sh = x.shape();
  if (sh.empty() || sh.back() % 2 != 0) {
    throw std::invalid_argument("glu: odd channel extent in " + ad::shape_str(sh));
  }
  auto [a, b] = ad::split2(x, x.rank() - 1);
  return ad::mul(a, ad::unary(b, ad::Unary::sigmoid));
}

LayerNormParams LayerNormParams::init(std::int64_t d) {
  LayerNormParams p;
  p.gain = Tensor::full({d}, 1.0, true);
  p.shift = Tensor::zeros({d}, true);
  return p;
}

void LayerNormParams::collect(const std::string& prefix, ParamMap& out) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".shift", shift);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  const int last = x.rank() - 1;
  if (last < 0 || x.shape().back() != p.gain.extent(0)) {
    throw std::invalid_argument("layer_norm: input " + ad::shape_str(x.shape()) +
                                " incompatible with width " + std::to_string(p.gain.extent(0)));
  }
  Tensor mu = ad::reduce(x, last, ad::Reduce::mean, true);
  Tensor centered = ad::sub(x, mu);
  Tensor var = ad::reduce(ad::mul(centered, centered), last, ad::Reduce::mean, true);
  Tensor norm = ad::mul(centered, ad::unary(ad::shift(var, p.eps), ad::Unary::rsqrt));
  return ad::add(ad::mul(norm, p.gain), p.shift);
}

BatchNormParams BatchNormParams::init(std::int64_t channels) {
  BatchNormParams p;
  p.gain = Tensor::full({channels}, 1.0, true);
  p.shift = Tensor::zeros({channels}, true);
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::full({channels}, 1.0);
  return p;
}

void BatchNormParams::collect(const std::string& prefix, ParamMap& out) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".shift", shift);
  out.emplace_back(prefix + ".running_mean", running_mean);
  out.emplace_back(prefix + ".running_var", running_var);
}

Tensor batch_norm(const Tensor& x, BatchNormParams& p, Mode mode, const SeqMask& mask) {
  if (x.rank() != 3) {
    throw std::invalid_argument("batch_norm: expected [batch, frames, channels], got " +
                                ad::shape_str(x.shape()));
  }
  const std::int64_t batch = x.extent(0), frames = x.extent(1), channels = x.extent(2);
  if (batch != mask.batch || frames != mask.frames) {
    throw std::invalid_argument("batch_norm: mask shape mismatch");
  }
  Tensor mean, var;
  if (mode == Mode::train) {
    const std::int64_t n = mask.valid_count();
    if (n == 0) throw std::invalid_argument("batch_norm: zero valid frames");
    const double inv_n = 1.0 / static_cast<double>(n);
    Tensor masked = ad::mul(x, mask.mask3);
    mean = ad::scale(ad::reduce(ad::reshape(masked, {batch * frames, channels}), 0, ad::Reduce::sum),
                     inv_n);
    Tensor centered_masked = ad::mul(ad::sub(x, mean), mask.mask3);
    Tensor sq = ad::mul(centered_masked, centered_masked);
    var = ad::scale(ad::reduce(ad::reshape(sq, {batch * frames, channels}), 0, ad::Reduce::sum),
                    inv_n);
    for (std::int64_t c = 0; c < channels; ++c) {
      p.running_mean.data()[static_cast<std::size_t>(c)] =
          (1.0 - p.momentum) * p.running_mean.data()[static_cast<std::size_t>(c)] +
          p.momentum * mean.data()[static_cast<std::size_t>(c)];
      p.running_var.data()[static_cast<std::size_t>(c)] =
          (1.0 - p.momentum) * p.running_var.data()[static_cast<std::size_t>(c)] +
          p.momentum * var.data()[static_cast<std::size_t>(c)];
    }
  } else {
    mean = Tensor::from_data({channels}, p.running_mean.data());
    var = Tensor::from_data({channels}, p.running_var.data());
  }
  Tensor norm = ad::mul(ad::sub(x, mean), ad::unary(ad::shift(var, p.eps), ad::Unary::rsqrt));
  return ad::add(ad::mul(norm, p.gain), p.shift);
}

DepthwiseConvParams DepthwiseConvParams::init(std::int64_t channels, std::int64_t k,
                                              std::mt19937_64& rng) {
  if (k % 2 == 0) throw std::invalid_argument("depthwise kernel size must be odd");
  DepthwiseConvParams p;
  p.kernel = Tensor::zeros({channels, k}, true);
  const double a = 1.0 / std::sqrt(static_cast<double>(k));
  fill_uniform(p.kernel, -a, a, rng);
  p.bias = Tensor::zeros({channels}, true);
  return p;
}

void DepthwiseConvParams::collect(const std::string& prefix, ParamMap& out) const {
  out.emplace_back(prefix + ".kernel", kernel);
  out.emplace_back(prefix + ".bias", bias);
}

Tensor depthwise_conv1d(const Tensor& x, const DepthwiseConvParams& p, const SeqMask& mask) {
  if (x.rank() != 3) {
    throw std::invalid_argument("depthwise_conv1d: expected [batch, frames, channels], got " +
                                ad::shape_str(x.shape()));
  }
  const std::int64_t k = p.kernel_size();
  if (k % 2 == 0) throw std::invalid_argument("depthwise_conv1d: even kernel size");
  const std::int64_t batch = x.extent(0), frames = x.extent(1), channels = x.extent(2);
  if (channels != p.kernel.extent(0)) {
    throw std::invalid_argument("depthwise_conv1d: channel mismatch " + ad::shape_str(x.shape()) +
                                " vs kernel " + ad::shape_str(p.kernel.shape()));
  }
  const std::int64_t half = (k - 1) / 2;

  Tensor xm = ad::mul(x, mask.mask3);
  const auto& xv = xm.data();
  const auto& kv = p.kernel.data();
  const double* bv = p.bias.defined() ? p.bias.data().data() : nullptr;
  std::vector<double> out_v(static_cast<std::size_t>(batch * frames * channels), 0.0);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t t = 0; t < frames; ++t) {
      const std::int64_t lo = std::max<std::int64_t>(0, half - t);
      const std::int64_t hi = std::min<std::int64_t>(k, frames - t + half);
      double* orow = out_v.data() + (b * frames + t) * channels;
      for (std::int64_t j = lo; j < hi; ++j) {
        const double* xrow = xv.data() + (b * frames + t + j - half) * channels;
        for (std::int64_t c = 0; c < channels; ++c) orow[c] += kv[c * k + j] * xrow[c];
      }
      if (bv != nullptr) {
        for (std::int64_t c = 0; c < channels; ++c) orow[c] += bv[c];
      }
    }
  }
  add_macs(batch * frames * channels * k);

  Tensor out = Tensor::from_data({batch, frames, channels}, std::move(out_v));
  if (recording_for({&xm, &p.kernel, &p.bias})) {
    out.set_requires_grad(true);
    auto xs = xm.storage();
    auto ks = p.kernel.storage();
    auto bs = p.bias.defined() ? p.bias.storage() : nullptr;
    auto os = out.storage();
    Tape::active()->record(os, [xs, ks, bs, os, batch, frames, channels, k, half]() {
      const auto& g = os->grad;
      const bool need_x = xs->requires_grad;
      const bool need_k = ks->requires_grad;
      const bool need_b = bs && bs->requires_grad;
      if (need_x) xs->ensure_grad();
      if (need_k) ks->ensure_grad();
      if (need_b) bs->ensure_grad();
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t t = 0; t < frames; ++t) {
          const std::int64_t lo = std::max<std::int64_t>(0, half - t);
          const std::int64_t hi = std::min<std::int64_t>(k, frames - t + half);
          const double* grow = g.data() + (b * frames + t) * channels;
          for (std::int64_t j = lo; j < hi; ++j) {
            const std::int64_t src = (b * frames + t + j - half) * channels;
            for (std::int64_t c = 0; c < channels; ++c) {
              if (need_x) xs->grad[src + c] += ks->value[c * k + j] * grow[c];
              if (need_k) ks->grad[c * k + j] += xs->value[src + c] * grow[c];
            }
          }
          if (need_b) {
            for (std::int64_t c = 0; c < channels; ++c) bs->grad[c] += grow[c];
          }
        }
      }
    });
  }
  if (ad::verify_mode()) ad::check_finite(*out.storage(), "depthwise_conv1d");
  return out;
}

Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64* rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate " + std::to_string(rate) + " outside [0,1)");
  }
  if (mode == Mode::eval || rate == 0.0) return x;
  if (rng == nullptr) throw std::invalid_argument("dropout: train mode requires an rng");
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> m(static_cast<std::size_t>(x.numel()));
  for (auto& v : m) v = dist(*rng) < rate ? 0.0 : keep_scale;
  return ad::mul(x, Tensor::from_data(x.shape(), std::move(m)));
}

Conv2dParams Conv2dParams::init(std::int64_t c_in, std::int64_t c_out, std::mt19937_64& rng) {
  Conv2dParams p;
  p.kernel = Tensor::zeros({c_out, c_in, 3, 3}, true);
  const double a = 1.0 / std::sqrt(static_cast<double>(c_in * 9));
  fill_uniform(p.kernel, -a, a, rng);
  p.bias = Tensor::zeros({c_out}, true);
  return p;
}

void Conv2dParams::collect(const std::string& prefix, ParamMap& out) const {
  out.emplace_back(prefix + ".kernel", kernel);
  out.emplace_back(prefix + ".bias", bias);
}

Tensor conv2d_s2_valid(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() != 4) {
    throw std::invalid_argument("conv2d: expected [batch, channels, h, w], got " +
                                ad::shape_str(x.shape()));
  }
  const std::int64_t batch = x.extent(0), c_in = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::int64_t c_out = p.kernel.extent(0);
  if (c_in != p.kernel.extent(1)) {
    throw std::invalid_argument("conv2d: channel mismatch");
  }
  if (h < 3 || w < 3) throw std::invalid_argument("conv2d: input too short");
  const std::int64_t oh = (h - 3) / 2 + 1;
  const std::int64_t ow = (w - 3) / 2 + 1;

  const auto& xv = x.data();
  const auto& kv = p.kernel.data();
  const auto& bv = p.bias.data();
  std::vector<double> out_v(static_cast<std::size_t>(batch * c_out * oh * ow), 0.0);
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t co = 0; co < c_out; ++co) {
      double* oplane = out_v.data() + (b * c_out + co) * oh * ow;
      for (std::int64_t ci = 0; ci < c_in; ++ci) {
        const double* xplane = xv.data() + (b * c_in + ci) * h * w;
        const double* kmat = kv.data() + (co * c_in + ci) * 9;
        for (std::int64_t i = 0; i < oh; ++i) {
          for (std::int64_t j = 0; j < ow; ++j) {
            const double* base = xplane + (2 * i) * w + 2 * j;
            oplane[i * ow + j] += kmat[0] * base[0] + kmat[1] * base[1] + kmat[2] * base[2] +
                                  kmat[3] * base[w] + kmat[4] * base[w + 1] + kmat[5] * base[w + 2] +
                                  kmat[6] * base[2 * w] + kmat[7] * base[2 * w + 1] +
                                  kmat[8] * base[2 * w + 2];
          }
        }
      }
      for (std::int64_t i = 0; i < oh * ow; ++i) oplane[i] += bv[co];
    }
  }
  add_macs(batch * c_out * oh * ow * c_in * 9);

  Tensor out = Tensor::from_data({batch, c_out, oh, ow}, std::move(out_v));
  if (recording_for({&x, &p.kernel, &p.bias})) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto ks = p.kernel.storage();
    auto bs = p.bias.storage();
    auto os = out.storage();
    Tape::active()->record(os, [xs, ks, bs, os, batch, c_in, c_out, h, w, oh, ow]() {
      const auto& g = os->grad;
      const bool need_x = xs->requires_grad;
      const bool need_k = ks->requires_grad;
      const bool need_b = bs->requires_grad;
      if (need_x) xs->ensure_grad();
      if (need_k) ks->ensure_grad();
      if (need_b) bs->ensure_grad();
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t co = 0; co < c_out; ++co) {
          const double* gplane = g.data() + (b * c_out + co) * oh * ow;
          for (std::int64_t ci = 0; ci < c_in; ++ci) {
            const std::int64_t xoff = (b * c_in + ci) * h * w;
            const std::int64_t koff = (co * c_in + ci) * 9;
            for (std::int64_t i = 0; i < oh; ++i) {
              for (std::int64_t j = 0; j < ow; ++j) {
                const double gv = gplane[i * ow + j];
                if (gv == 0.0) continue;
                const std::int64_t base = xoff + (2 * i) * w + 2 * j;
                for (std::int64_t kh = 0; kh < 3; ++kh) {
                  for (std::int64_t kw = 0; kw < 3; ++kw) {
                    if (need_x) xs->grad[base + kh * w + kw] += ks->value[koff + kh * 3 + kw] * gv;
                    if (need_k) ks->grad[koff + kh * 3 + kw] += xs->value[base + kh * w + kw] * gv;
                  }
                }
              }
            }
          }
          if (need_b) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < oh * ow; ++i) acc += gplane[i];
            bs->grad[co] += acc;
          }
        }
      }
    });
  }
  if (ad::verify_mode()) ad::check_finite(*out.storage(), "conv2d");
  return out;
}

SubsamplingParams SubsamplingParams::init(std::int64_t feat_dim, std::int64_t d,
                                          std::mt19937_64& rng) {
  SubsamplingParams p;
  p.model_dim = d;
  p.feat_dim = feat_dim;
  p.conv1 = Conv2dParams::init(1, d, rng);
  p.conv2 = Conv2dParams::init(d, d, rng);
  const std::int64_t f2 = subsampled_extent(feat_dim);
  p.out = LinearParams::init(d * f2, d, true, rng);
  return p;
}

void SubsamplingParams::collect(const std::string& prefix, ParamMap& out) const {
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
  this->out.collect(prefix + ".out", out);
}

std::int64_t subsampled_extent(std::int64_t n) {
  if (n < 7) throw std::invalid_argument("subsampling: extent " + std::to_string(n) + " < 7");
  const std::int64_t s1 = (n - 3) / 2 + 1;
  return (s1 - 3) / 2 + 1;
}

std::pair<Tensor, std::vector<std::int64_t>> conv2d_subsample(
    const Tensor& feats, const std::vector<std::int64_t>& lengths, const SubsamplingParams& p) {
  if (feats.rank() != 3) {
    throw std::invalid_argument("conv2d_subsample: expected [batch, frames, feat], got " +
                                ad::shape_str(feats.shape()));
  }
  const std::int64_t batch = feats.extent(0), frames = feats.extent(1), fdim = feats.extent(2);
  if (fdim != p.feat_dim) {
    throw std::invalid_argument("conv2d_subsample: feature dim mismatch");
  }
  std::vector<std::int64_t> out_lengths;
  out_lengths.reserve(lengths.size());
  for (auto len : lengths) out_lengths.push_back(subsampled_extent(len));

  Tensor x = ad::reshape(feats, {batch, 1, frames, fdim});
  Tensor h1 = ad::unary(conv2d_s2_valid(x, p.conv1), ad::Unary::relu);
  Tensor h2 = ad::unary(conv2d_s2_valid(h1, p.conv2), ad::Unary::relu);
  // [B, d, T', f2] -> [B, T', d * f2]
  const std::int64_t t_out = h2.extent(2), f2 = h2.extent(3);
  Tensor perm = ad::transpose(h2, {0, 2, 1, 3});
  Tensor flat = ad::reshape(perm, {batch, t_out, p.model_dim * f2});
  return {linear(flat, p.out), out_lengths};
}

}  // namespace branchkit::nn
