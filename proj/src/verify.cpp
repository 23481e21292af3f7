#include "branchkit/verify.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "branchkit/ctc.hpp"
#include "branchkit/encoder.hpp"
#include "branchkit/gradcheck.hpp"
#include "branchkit/optim.hpp"
#include "branchkit/profiler.hpp"
#include "branchkit/synthetic.hpp"

namespace branchkit::verify {

using ad::Tensor;
using nn::Mode;
using nn::SeqMask;

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

CheckResult result(const std::string& name, bool pass, const std::string& detail) {
  return CheckResult{name, pass, detail};
}

Tensor randn(const ad::Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  }
  return worst;
}

// Max |difference| at valid frames between fn(x) and fn(x with garbage in the
// padded frames) for [B,T,C] outputs aligned with the mask.
double padding_opacity(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                       const SeqMask& mask, std::mt19937_64& rng) {
  Tensor clean = fn(x);
  Tensor dirty_in = Tensor::from_data(x.shape(), x.data());
  std::normal_distribution<double> dist(0.0, 50.0);
  const std::int64_t channels = x.extent(2);
  for (std::int64_t b = 0; b < mask.batch; ++b) {
    for (std::int64_t t = mask.lengths[static_cast<std::size_t>(b)]; t < mask.frames; ++t) {
      for (std::int64_t c = 0; c < channels; ++c) {
        dirty_in.data()[static_cast<std::size_t>((b * mask.frames + t) * channels + c)] = dist(rng);
      }
    }
  }
  Tensor dirty = fn(dirty_in);
  double worst = 0.0;
  const std::int64_t out_channels = clean.extent(2);
  for (std::int64_t b = 0; b < mask.batch; ++b) {
    for (std::int64_t t = 0; t < mask.lengths[static_cast<std::size_t>(b)]; ++t) {
      for (std::int64_t c = 0; c < out_channels; ++c) {
        const auto i = static_cast<std::size_t>((b * mask.frames + t) * out_channels + c);
        worst = std::max(worst, std::abs(clean.data()[i] - dirty.data()[i]));
      }
    }
  }
  return worst;
}

// Per-pair reference for relative-position attention: projects each sinusoid
// row through W_pos and evaluates the published score formula directly.
std::vector<double> naive_relpos_attention_weights(const Tensor& x, const nn::RelPosMHAParams& p,
                                                   const std::vector<std::int64_t>& lengths) {
  const std::int64_t batch = x.extent(0), frames = x.extent(1), d = p.model_dim;
  const std::int64_t heads = p.heads, dh = d / heads;
  auto project = [&](const nn::LinearParams& lin, std::int64_t b, std::int64_t t,
                     std::vector<double>& out_row) {
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = lin.bias.defined() ? lin.bias.data()[static_cast<std::size_t>(j)] : 0.0;
      for (std::int64_t i = 0; i < d; ++i) {
        acc += x.data()[static_cast<std::size_t>((b * frames + t) * d + i)] *
               lin.weight.data()[static_cast<std::size_t>(i * d + j)];
      }
      out_row[static_cast<std::size_t>(j)] = acc;
    }
  };
  Tensor emb = nn::sinusoidal_rel_embeddings(frames, d);
  // r_p = e_p . W_pos
  std::vector<double> rel(static_cast<std::size_t>((2 * frames - 1) * d), 0.0);
  for (std::int64_t pr = 0; pr < 2 * frames - 1; ++pr) {
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < d; ++i) {
        acc += emb.data()[static_cast<std::size_t>(pr * d + i)] *
               p.wpos.data()[static_cast<std::size_t>(i * d + j)];
      }
      rel[static_cast<std::size_t>(pr * d + j)] = acc;
    }
  }

  std::vector<double> weights(static_cast<std::size_t>(batch * heads * frames * frames), 0.0);
  std::vector<double> qi(static_cast<std::size_t>(d)), kj(static_cast<std::size_t>(d));
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t valid = lengths[static_cast<std::size_t>(b)];
    for (std::int64_t i = 0; i < frames; ++i) {
      project(p.wq, b, i, qi);
      std::vector<std::vector<double>> scores(static_cast<std::size_t>(heads),
                                              std::vector<double>(static_cast<std::size_t>(frames)));
      for (std::int64_t j = 0; j < valid; ++j) {
        project(p.wk, b, j, kj);
        const std::int64_t rel_row = (frames - 1) + (j - i);  // offset i-j at row T-1-(i-j)
        for (std::int64_t hh = 0; hh < heads; ++hh) {
          double content = 0.0, position = 0.0;
          for (std::int64_t c = 0; c < dh; ++c) {
            const std::int64_t idx = hh * dh + c;
            content += (qi[static_cast<std::size_t>(idx)] +
                        p.bias_u.data()[static_cast<std::size_t>(idx)]) *
                       kj[static_cast<std::size_t>(idx)];
            position += (qi[static_cast<std::size_t>(idx)] +
                         p.bias_v.data()[static_cast<std::size_t>(idx)]) *
                        rel[static_cast<std::size_t>(rel_row * d + idx)];
          }
          scores[static_cast<std::size_t>(hh)][static_cast<std::size_t>(j)] =
              (content + position) / std::sqrt(static_cast<double>(dh));
        }
      }
      for (std::int64_t hh = 0; hh < heads; ++hh) {
        auto& row = scores[static_cast<std::size_t>(hh)];
        double m = row[0];
        for (std::int64_t j = 1; j < valid; ++j) m = std::max(m, row[static_cast<std::size_t>(j)]);
        double z = 0.0;
        for (std::int64_t j = 0; j < valid; ++j) z += std::exp(row[static_cast<std::size_t>(j)] - m);
        for (std::int64_t j = 0; j < valid; ++j) {
          weights[static_cast<std::size_t>(((b * heads + hh) * frames + i) * frames + j)] =
              std::exp(row[static_cast<std::size_t>(j)] - m) / z;
        }
      }
    }
  }
  return weights;
}

void zero_tensor(Tensor& t) {
  if (t.defined()) std::fill(t.data().begin(), t.data().end(), 0.0);
}

void zero_linear(nn::LinearParams& p) {
  zero_tensor(p.weight);
  zero_tensor(p.bias);
}

void zero_submodules(nn::ConformerLayerParams& p) {
  zero_linear(p.ffn1.in);
  zero_linear(p.ffn1.out);
  zero_linear(p.ffn2.in);
  zero_linear(p.ffn2.out);
  zero_linear(p.mha.wq);
  zero_linear(p.mha.wk);
  zero_linear(p.mha.wv);
  zero_linear(p.mha.wout);
  zero_tensor(p.mha.wpos);
  zero_tensor(p.mha.bias_u);
  zero_tensor(p.mha.bias_v);
  zero_linear(p.conv.pw1);
  zero_tensor(p.conv.dw.kernel);
  zero_tensor(p.conv.dw.bias);
  zero_linear(p.conv.pw2);
}

void zero_submodules(nn::EBranchformerLayerParams& p) {
  zero_linear(p.ffn1.in);
  zero_linear(p.ffn1.out);
  zero_linear(p.ffn2.in);
  zero_linear(p.ffn2.out);
  zero_linear(p.mha.wq);
  zero_linear(p.mha.wk);
  zero_linear(p.mha.wv);
  zero_linear(p.mha.wout);
  zero_tensor(p.mha.wpos);
  zero_tensor(p.mha.bias_u);
  zero_tensor(p.mha.bias_v);
  zero_linear(p.cgmlp.u);
  zero_tensor(p.cgmlp.dw.kernel);
  zero_tensor(p.cgmlp.dw.bias);
  zero_tensor(p.cgmlp.gate_bias);
  zero_linear(p.cgmlp.v);
  zero_tensor(p.merge.dw.kernel);
  zero_tensor(p.merge.dw.bias);
  zero_linear(p.merge.proj);
}

nn::EncoderConfig toy_config(nn::LayerKind kind, std::int64_t layers = 1, std::int64_t d = 8) {
  nn::EncoderConfig cfg;
  cfg.kind = kind;
  cfg.num_layers = layers;
  cfg.d = d;
  cfg.heads = 2;
  cfg.ffn_expansion = 2.0;
  cfg.mlp_expansion = 2.0;
  cfg.k_conv = 3;
  cfg.k_mlp = 3;
  cfg.k_merge = 3;
  cfg.dropout = 0.0;
  cfg.attn_dropout = 0.0;
  cfg.feat_dim = 8;
  return cfg;
}

std::vector<Tensor> tensors_of(const nn::ParamMap& params) {
  std::vector<Tensor> ts;
  ts.reserve(params.size());
  for (const auto& [name, t] : params) {
    if (t.requires_grad()) ts.push_back(t);  // buffers are not differentiated
  }
  return ts;
}

}  // namespace

CheckResult check_tensor_properties() {
  std::mt19937_64 rng(42);
  double worst = 0.0;
  // Round trip concat(split2(x)) == x, exactly.
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::int64_t> ext(1, 4);
    const ad::Shape shape{ext(rng), ext(rng), 2 * ext(rng)};
    Tensor x = randn(shape, rng);
    const int axis = static_cast<int>(rng() % 3);
    if (x.extent(axis) % 2 != 0) continue;
    auto [a, b] = ad::split2(x, axis);
    Tensor back = ad::concat({a, b}, axis);
    if (back.data() != x.data()) {
      return result("tensor.properties", false, "split/concat round trip not exact");
    }
  }
  // Linearity of backward under loss scaling.
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = randn({3, 4}, rng);
    Tensor b = randn({3, 4}, rng);
    a.set_requires_grad(true);
    const double alpha = 3.5;
    auto run = [&](double s) {
      a.zero_grad();
      ad::Tape tape;
      ad::Tape::Scope scope(tape);
      Tensor loss = ad::sum_all(ad::mul(ad::mul(a, b), ad::unary(a, ad::Unary::sigmoid)));
      tape.backward(ad::scale(loss, s));
      return a.grad();
    };
    auto g1 = run(1.0);
    auto ga = run(alpha);
    for (std::size_t i = 0; i < g1.size(); ++i) {
      worst = std::max(worst, ad::rel_err(alpha * g1[i], ga[i]));
    }
    a.set_requires_grad(false);
  }
  if (worst > 1e-12) {
    return result("tensor.properties", false, "backward not linear, rel err " + fmt(worst));
  }
  // Broadcast gradient equals sum-reduction of the explicitly tiled gradient.
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = randn({2, 3, 4}, rng);
    Tensor b = randn({4}, rng);
    Tensor b_tiled = Tensor::zeros({2, 3, 4});
    for (std::int64_t i = 0; i < 6; ++i) {
      std::copy(b.data().begin(), b.data().end(), b_tiled.data().begin() + i * 4);
    }
    b.set_requires_grad(true);
    b_tiled.set_requires_grad(true);
    {
      ad::Tape tape;
      ad::Tape::Scope scope(tape);
      tape.backward(ad::sum_all(ad::mul(ad::mul(a, b), a)));
    }
    {
      ad::Tape tape;
      ad::Tape::Scope scope(tape);
      tape.backward(ad::sum_all(ad::mul(ad::mul(a, b_tiled), a)));
    }
    for (std::int64_t j = 0; j < 4; ++j) {
      double tiled_sum = 0.0;
      for (std::int64_t i = 0; i < 6; ++i) tiled_sum += b_tiled.grad()[static_cast<std::size_t>(i * 4 + j)];
      worst = std::max(worst, ad::rel_err(tiled_sum, b.grad()[static_cast<std::size_t>(j)]));
    }
    if (worst > 1e-10) {
      return result("tensor.properties", false, "broadcast gradient mismatch " + fmt(worst));
    }
  }
  return result("tensor.properties", true, "max rel err " + fmt(worst));
}

CheckResult check_composite_gradients(int seeds) {
  double worst = 0.0;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(1000 + static_cast<unsigned>(seed));
    std::uniform_int_distribution<std::int64_t> ext(1, 8);
    const std::int64_t m = ext(rng), k = ext(rng), n = ext(rng);

    {
      Tensor a = randn({m, k}, rng);
      Tensor b = randn({k}, rng);
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    Tensor s = ad::add(in[0], in[1]);
                                    Tensor p = ad::mul(s, ad::unary(in[0], ad::Unary::sigmoid));
                                    Tensor d = ad::sub(p, ad::unary(in[1], ad::Unary::tanh));
                                    return ad::sum_all(ad::mul(d, d));
                                  },
                                  {a, b}));
    }
    {
      Tensor a = randn({2, m, k}, rng);
      Tensor b = randn({k, n}, rng);
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    Tensor c = ad::matmul(in[0], in[1]);
                                    return ad::sum_all(ad::mul(c, ad::unary(c, ad::Unary::erf)));
                                  },
                                  {a, b}));
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    Tensor c = ad::matmul(in[0], in[1], false, true);
                                    return ad::sum_all(c);
                                  },
                                  {randn({m, k}, rng), randn({n, k}, rng)}));
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    Tensor c = ad::matmul(in[0], in[1], true, false);
                                    return ad::sum_all(ad::mul(c, c));
                                  },
                                  {randn({k, m}, rng), randn({k, n}, rng)}));
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    Tensor c = ad::matmul(in[0], in[1], true, true);
                                    return ad::sum_all(ad::mul(c, c));
                                  },
                                  {randn({k, m}, rng), randn({n, k}, rng)}));
      // batch broadcast on the left operand
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    Tensor c = ad::matmul(in[0], in[1]);
                                    return ad::sum_all(ad::mul(c, c));
                                  },
                                  {randn({m, k}, rng), randn({2, k, n}, rng)}));
    }
    {
      Tensor x = randn({m, k}, rng);
      const int axis = static_cast<int>(rng() % 2);
      for (auto kind : {ad::Reduce::sum, ad::Reduce::mean, ad::Reduce::max}) {
        worst = std::max(worst, ad::grad_check(
                                    [axis, kind](const std::vector<Tensor>& in) {
                                      Tensor r = ad::reduce(in[0], axis, kind, true);
                                      return ad::sum_all(ad::mul(r, r));
                                    },
                                    {x}));
      }
    }
    {
      Tensor x = randn({m, 2 * k}, rng);
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    auto [a, b] = ad::split2(in[0], 1);
                                    Tensor c = ad::concat({ad::unary(b, ad::Unary::relu), a}, 1);
                                    return ad::sum_all(ad::mul(c, c));
                                  },
                                  {x}));
    }
    {
      // positive-domain unaries
      Tensor raw = randn({m, k}, rng);
      for (auto& v : raw.data()) v = 0.5 + v * v;
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    Tensor l = ad::unary(in[0], ad::Unary::log);
                                    Tensor r = ad::unary(in[0], ad::Unary::rsqrt);
                                    Tensor q = ad::unary(in[0], ad::Unary::sqrt);
                                    Tensor c = ad::unary(in[0], ad::Unary::recip);
                                    return ad::sum_all(ad::add(ad::mul(l, r), ad::mul(q, c)));
                                  },
                                  {raw}));
    }
    {
      Tensor a = randn({m, k}, rng);
      Tensor b = randn({m, k}, rng);
      worst = std::max(worst, ad::grad_check(
                                  [](const std::vector<Tensor>& in) {
                                    return ad::sum_all(ad::logaddexp(in[0], in[1]));
                                  },
                                  {a, b}));
    }
    {
      Tensor x = randn({m, k, n}, rng);
      std::vector<std::int64_t> idx;
      for (std::int64_t i = 0; i < std::min<std::int64_t>(5, x.numel()); ++i) {
        idx.push_back(static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(x.numel())));
      }
      worst = std::max(worst, ad::grad_check(
                                  [idx](const std::vector<Tensor>& in) {
                                    Tensor t = ad::transpose(in[0], {2, 0, 1});
                                    Tensor r = ad::reshape(t, {in[0].numel()});
                                    Tensor p = ad::pick(r, idx);
                                    return ad::sum_all(ad::mul(p, p));
                                  },
                                  {x}));
    }
  }
  return result("tensor.composite_gradients", worst < 1e-4, "max rel err " + fmt(worst));
}

CheckResult check_primitive_invariants() {
  std::mt19937_64 rng(7);
  // layer_norm: per-position mean 0, population variance 1 before gain/shift.
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t d = 4 + static_cast<std::int64_t>(rng() % 12);
    nn::LayerNormParams p = nn::LayerNormParams::init(d);
    Tensor x = randn({3, 5, d}, rng, 2.0);
    Tensor y = nn::layer_norm(x, p);
    for (std::int64_t row = 0; row < 15; ++row) {
      double mean = 0.0, var = 0.0;
      for (std::int64_t c = 0; c < d; ++c) mean += y.data()[static_cast<std::size_t>(row * d + c)];
      mean /= static_cast<double>(d);
      for (std::int64_t c = 0; c < d; ++c) {
        const double diff = y.data()[static_cast<std::size_t>(row * d + c)] - mean;
        var += diff * diff;
      }
      var /= static_cast<double>(d);
      if (std::abs(mean) > 1e-8 || std::abs(var - 1.0) > 1e-8) {
        return result("nn.primitive_invariants", false,
                      "layer_norm stats off: mean " + fmt(mean) + " var " + fmt(var));
      }
    }
  }
  // depthwise delta kernel is the identity, exactly.
  {
    const std::int64_t channels = 6, k = 5;
    nn::DepthwiseConvParams p;
    p.kernel = Tensor::zeros({channels, k});
    for (std::int64_t c = 0; c < channels; ++c) {
      p.kernel.data()[static_cast<std::size_t>(c * k + (k - 1) / 2)] = 1.0;
    }
    p.bias = Tensor::zeros({channels});
    Tensor x = randn({2, 7, channels}, rng);
    SeqMask mask = SeqMask::full(2, 7);
    Tensor y = nn::depthwise_conv1d(x, p, mask);
    if (y.data() != x.data()) {
      return result("nn.primitive_invariants", false, "delta depthwise kernel not exact identity");
    }
  }
  // batch_norm train: per-channel stats over valid frames are (0,1).
  {
    const std::int64_t channels = 5;
    nn::BatchNormParams p = nn::BatchNormParams::init(channels);
    Tensor x = randn({3, 9, channels}, rng, 3.0);
    SeqMask mask = SeqMask::from_lengths({9, 5, 7}, 9);
    Tensor y = nn::batch_norm(x, p, Mode::train, mask);
    for (std::int64_t c = 0; c < channels; ++c) {
      double mean = 0.0, var = 0.0;
      std::int64_t n = 0;
      for (std::int64_t b = 0; b < 3; ++b) {
        for (std::int64_t t = 0; t < mask.lengths[static_cast<std::size_t>(b)]; ++t) {
          mean += y.data()[static_cast<std::size_t>((b * 9 + t) * channels + c)];
          ++n;
        }
      }
      mean /= static_cast<double>(n);
      for (std::int64_t b = 0; b < 3; ++b) {
        for (std::int64_t t = 0; t < mask.lengths[static_cast<std::size_t>(b)]; ++t) {
          const double diff = y.data()[static_cast<std::size_t>((b * 9 + t) * channels + c)] - mean;
          var += diff * diff;
        }
      }
      var /= static_cast<double>(n);
      if (std::abs(mean) > 1e-6 || std::abs(var - 1.0) > 1e-4) {
        return result("nn.primitive_invariants", false,
                      "batch_norm stats off: mean " + fmt(mean) + " var " + fmt(var));
      }
    }
  }
  return result("nn.primitive_invariants", true, "ok");
}

CheckResult check_mask_hygiene() {
  std::mt19937_64 rng(11);
  const std::int64_t d = 8, frames = 10;
  SeqMask mask = SeqMask::from_lengths({10, 6, 3}, frames);
  Tensor x = randn({3, frames, d}, rng);
  double worst = 0.0;

  nn::DepthwiseConvParams dw = nn::DepthwiseConvParams::init(d, 5, rng);
  worst = std::max(worst, padding_opacity(
                              [&](const Tensor& in) { return nn::depthwise_conv1d(in, dw, mask); },
                              x, mask, rng));

  nn::BatchNormParams bn = nn::BatchNormParams::init(d);
  worst = std::max(worst, padding_opacity(
                              [&](const Tensor& in) {
                                nn::BatchNormParams copy = bn;
                                return nn::batch_norm(in, copy, Mode::train, mask);
                              },
                              x, mask, rng));

  nn::RelPosMHAParams mha = nn::RelPosMHAParams::init(d, 2, 0.0, rng);
  worst = std::max(worst, padding_opacity(
                              [&](const Tensor& in) {
                                return nn::mha_forward(in, mha, mask, Mode::eval, nullptr);
                              },
                              x, mask, rng));

  nn::ConvModuleParams conv = nn::ConvModuleParams::init(d, 5, 0.0, rng);
  worst = std::max(worst, padding_opacity(
                              [&](const Tensor& in) {
                                nn::ConvModuleParams copy = conv;
                                return nn::conv_module_forward(in, copy, mask, Mode::eval);
                              },
                              x, mask, rng));

  nn::CgMLPParams cg = nn::CgMLPParams::init(d, 12, 3, 0.0, false, rng);
  worst = std::max(worst, padding_opacity(
                              [&](const Tensor& in) {
                                return nn::cgmlp_forward(in, cg, mask, Mode::eval, nullptr);
                              },
                              x, mask, rng));

  nn::MergeParams merge = nn::MergeParams::init(d, 3, rng);
  worst = std::max(worst, padding_opacity(
                              [&](const Tensor& in) {
                                return nn::merge_branches(in, in, merge, mask);
                              },
                              x, mask, rng));

  return result("nn.mask_hygiene", worst <= 1e-10, "max valid-frame deviation " + fmt(worst));
}

CheckResult check_attention_invariants() {
  std::mt19937_64 rng(23);
  const std::int64_t batch = 2, frames = 4, d = 8, heads = 2;
  SeqMask mask = SeqMask::from_lengths({4, 3}, frames);
  nn::RelPosMHAParams p = nn::RelPosMHAParams::init(d, heads, 0.0, rng);
  Tensor x = randn({batch, frames, d}, rng);

  Tensor attn;
  nn::mha_forward(x, p, mask, Mode::eval, nullptr, &attn);
  // Rows over valid keys sum to 1; masked keys weigh exactly 0.
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t valid = mask.lengths[static_cast<std::size_t>(b)];
    for (std::int64_t h = 0; h < heads; ++h) {
      for (std::int64_t i = 0; i < frames; ++i) {
        double sum = 0.0;
        for (std::int64_t j = 0; j < frames; ++j) {
          const double w =
              attn.data()[static_cast<std::size_t>(((b * heads + h) * frames + i) * frames + j)];
          if (j >= valid && w != 0.0) {
            return result("attention.invariants", false, "masked key has nonzero weight");
          }
          sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-10) {
          return result("attention.invariants", false, "softmax row sums to " + fmt(sum));
        }
      }
    }
  }
  // Against the brute-force per-pair oracle.
  const auto naive = naive_relpos_attention_weights(x, p, mask.lengths);
  double worst = 0.0;
  for (std::size_t i = 0; i < naive.size(); ++i) {
    worst = std::max(worst, std::abs(naive[i] - attn.data()[i]));
  }
  if (worst > 1e-10) {
    return result("attention.invariants", false, "oracle weight mismatch " + fmt(worst));
  }
  // With W_pos = 0 and u = v = 0 the output equals plain scaled dot-product
  // attention computed independently.
  nn::RelPosMHAParams vanilla = p;
  zero_tensor(vanilla.wpos);
  zero_tensor(vanilla.bias_u);
  zero_tensor(vanilla.bias_v);
  Tensor out = nn::mha_forward(x, vanilla, mask, Mode::eval, nullptr);
  {
    const std::int64_t dh = d / heads;
    auto proj = [&](const nn::LinearParams& lin, std::int64_t b, std::int64_t t, std::int64_t j) {
      double acc = lin.bias.data()[static_cast<std::size_t>(j)];
      for (std::int64_t i = 0; i < d; ++i) {
        acc += x.data()[static_cast<std::size_t>((b * frames + t) * d + i)] *
               lin.weight.data()[static_cast<std::size_t>(i * d + j)];
      }
      return acc;
    };
    for (std::int64_t b = 0; b < batch; ++b) {
      const std::int64_t valid = mask.lengths[static_cast<std::size_t>(b)];
      for (std::int64_t i = 0; i < frames; ++i) {
        std::vector<double> ctx(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t h = 0; h < heads; ++h) {
          std::vector<double> score(static_cast<std::size_t>(valid), 0.0);
          for (std::int64_t j = 0; j < valid; ++j) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < dh; ++c) {
              acc += proj(vanilla.wq, b, i, h * dh + c) * proj(vanilla.wk, b, j, h * dh + c);
            }
            score[static_cast<std::size_t>(j)] = acc / std::sqrt(static_cast<double>(dh));
          }
          double m = score[0];
          for (double s : score) m = std::max(m, s);
          double z = 0.0;
          for (double s : score) z += std::exp(s - m);
          for (std::int64_t j = 0; j < valid; ++j) {
            const double w = std::exp(score[static_cast<std::size_t>(j)] - m) / z;
            for (std::int64_t c = 0; c < dh; ++c) {
              ctx[static_cast<std::size_t>(h * dh + c)] += w * proj(vanilla.wv, b, j, h * dh + c);
            }
          }
        }
        for (std::int64_t j = 0; j < d; ++j) {
          double acc = vanilla.wout.bias.data()[static_cast<std::size_t>(j)];
          for (std::int64_t c = 0; c < d; ++c) {
            acc += ctx[static_cast<std::size_t>(c)] *
                   vanilla.wout.weight.data()[static_cast<std::size_t>(c * d + j)];
          }
          worst = std::max(worst, std::abs(acc - out.data()[static_cast<std::size_t>(
                                                     (b * frames + i) * d + j)]));
        }
      }
    }
  }
  if (worst > 1e-10) {
    return result("attention.invariants", false, "vanilla-attention mismatch " + fmt(worst));
  }
  // rel_scores agrees with the matmul + rel_shift realization.
  {
    Tensor q = randn({batch, heads, frames, d / heads}, rng);
    Tensor emb = nn::sinusoidal_rel_embeddings(frames, d);
    Tensor emb_heads = ad::transpose(ad::reshape(emb, {2 * frames - 1, heads, d / heads}), {1, 0, 2});
    Tensor direct = nn::rel_scores(q, emb_heads);
    Tensor via_shift = nn::rel_shift(ad::matmul(q, emb_heads, false, true));
    worst = std::max(worst, max_abs_diff(direct, via_shift));
  }
  return result("attention.invariants", worst <= 1e-10, "max deviation " + fmt(worst));
}

CheckResult check_structural_identities() {
  std::mt19937_64 rng(31);
  const std::int64_t batch = 2, frames = 9, d = 8;
  SeqMask mask = SeqMask::from_lengths({9, 6}, frames);
  Tensor x = randn({batch, frames, d}, rng);
  double worst = 0.0;

  // Zero-parameter layers reduce to LayerNorm(x).
  {
    nn::EncoderConfig cfg = toy_config(nn::LayerKind::conformer);
    std::mt19937_64 r2(1);
    auto enc = nn::EncoderParams::init(cfg, r2);
    auto& layer = std::get<nn::ConformerLayerParams>(enc.layers[0]);
    zero_submodules(layer);
    Tensor y = nn::conformer_layer(x, layer, mask, Mode::eval, nullptr);
    Tensor ref = nn::layer_norm(x, layer.norm_final);
    worst = std::max(worst, max_abs_diff(y, ref));
  }
  {
    nn::EncoderConfig cfg = toy_config(nn::LayerKind::e_branchformer);
    std::mt19937_64 r2(2);
    auto enc = nn::EncoderParams::init(cfg, r2);
    auto& layer = std::get<nn::EBranchformerLayerParams>(enc.layers[0]);
    zero_submodules(layer);
    Tensor y = nn::ebranchformer_layer(x, layer, mask, Mode::eval, nullptr);
    Tensor ref = nn::layer_norm(x, layer.norm_final);
    worst = std::max(worst, max_abs_diff(y, ref));
  }
  if (worst > 1e-10) {
    return result("encoder.structural", false, "zero-parameter reduction off by " + fmt(worst));
  }

  // Merge with zero depthwise kernel equals an independent concat+linear.
  {
    nn::MergeParams merge = nn::MergeParams::init(d, 3, rng);
    zero_tensor(merge.dw.kernel);
    zero_tensor(merge.dw.bias);
    Tensor a = randn({batch, frames, d}, rng);
    Tensor b = randn({batch, frames, d}, rng);
    Tensor y = nn::merge_branches(a, b, merge, mask);
    double diff = 0.0;
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      for (std::int64_t t = 0; t < frames; ++t) {
        for (std::int64_t j = 0; j < d; ++j) {
          double acc = merge.proj.bias.data()[static_cast<std::size_t>(j)];
          for (std::int64_t c = 0; c < 2 * d; ++c) {
            const double v = c < d
                                 ? a.data()[static_cast<std::size_t>((bi * frames + t) * d + c)]
                                 : b.data()[static_cast<std::size_t>((bi * frames + t) * d + c - d)];
            acc += v * merge.proj.weight.data()[static_cast<std::size_t>(c * d + j)];
          }
          diff = std::max(diff, std::abs(acc - y.data()[static_cast<std::size_t>(
                                                   (bi * frames + t) * d + j)]));
        }
      }
    }
    if (diff > 1e-12) {
      return result("encoder.structural", false, "merge reduction off by " + fmt(diff));
    }
  }

  // Macaron halving: doubling FFN1's output linear adds exactly the previous
  // half-step contribution.
  {
    nn::EncoderConfig cfg = toy_config(nn::LayerKind::conformer);
    std::mt19937_64 r2(3);
    auto enc = nn::EncoderParams::init(cfg, r2);
    auto& layer = std::get<nn::ConformerLayerParams>(enc.layers[0]);
    zero_submodules(layer);
    std::mt19937_64 r3(4);
    layer.ffn1 = nn::FFNParams::init(d, cfg.d_ff(), 0.0, r3);
    Tensor contrib = nn::ffn_forward(nn::layer_norm(x, layer.norm_ffn1), layer.ffn1, Mode::eval,
                                     nullptr);
    Tensor y1 = nn::conformer_layer(x, layer, mask, Mode::eval, nullptr);
    Tensor ref1 = nn::layer_norm(ad::add(x, ad::scale(contrib, 0.5)), layer.norm_final);
    double diff = max_abs_diff(y1, ref1);
    for (auto& v : layer.ffn1.out.weight.data()) v *= 2.0;
    for (auto& v : layer.ffn1.out.bias.data()) v *= 2.0;
    Tensor y2 = nn::conformer_layer(x, layer, mask, Mode::eval, nullptr);
    Tensor ref2 = nn::layer_norm(ad::add(x, contrib), layer.norm_final);
    diff = std::max(diff, max_abs_diff(y2, ref2));
    if (diff > 1e-12) {
      return result("encoder.structural", false, "macaron half-step off by " + fmt(diff));
    }
  }

  // Full-stack padding opacity in eval mode.
  for (auto kind : {nn::LayerKind::conformer, nn::LayerKind::e_branchformer}) {
    nn::EncoderConfig cfg = toy_config(kind, 2);
    std::mt19937_64 r2(5);
    auto enc = nn::EncoderParams::init(cfg, r2);
    Tensor feats = randn({2, 16, cfg.feat_dim}, rng);
    const std::vector<std::int64_t> lengths{16, 9};
    auto clean = nn::encoder_forward(feats, lengths, enc, Mode::eval, nullptr);
    Tensor dirty_feats = Tensor::from_data(feats.shape(), feats.data());
    std::normal_distribution<double> noise(0.0, 100.0);
    for (std::int64_t t = 9; t < 16; ++t) {
      for (std::int64_t f = 0; f < cfg.feat_dim; ++f) {
        dirty_feats.data()[static_cast<std::size_t>((1 * 16 + t) * cfg.feat_dim + f)] = noise(rng);
      }
    }
    auto dirty = nn::encoder_forward(dirty_feats, lengths, enc, Mode::eval, nullptr);
    double diff = 0.0;
    const std::int64_t out_frames = clean.first.extent(1);
    for (std::int64_t b = 0; b < 2; ++b) {
      for (std::int64_t t = 0; t < clean.second[static_cast<std::size_t>(b)]; ++t) {
        for (std::int64_t c = 0; c < d; ++c) {
          const auto i = static_cast<std::size_t>((b * out_frames + t) * d + c);
          diff = std::max(diff, std::abs(clean.first.data()[i] - dirty.first.data()[i]));
        }
      }
    }
    if (diff > 1e-8) {
      return result("encoder.structural", false, "full-stack padding leak " + fmt(diff));
    }
    worst = std::max(worst, diff);
  }

  // Batch-vs-single consistency in eval mode.
  {
    nn::EncoderConfig cfg = toy_config(nn::LayerKind::e_branchformer, 2);
    std::mt19937_64 r2(6);
    auto enc = nn::EncoderParams::init(cfg, r2);
    Tensor feats = randn({2, 14, cfg.feat_dim}, rng);
    const std::vector<std::int64_t> lengths{14, 8};
    auto batched = nn::encoder_forward(feats, lengths, enc, Mode::eval, nullptr);
    double diff = 0.0;
    for (std::int64_t b = 0; b < 2; ++b) {
      const std::int64_t len = lengths[static_cast<std::size_t>(b)];
      Tensor single = Tensor::zeros({1, len, cfg.feat_dim});
      for (std::int64_t t = 0; t < len; ++t) {
        for (std::int64_t f = 0; f < cfg.feat_dim; ++f) {
          single.data()[static_cast<std::size_t>(t * cfg.feat_dim + f)] =
              feats.data()[static_cast<std::size_t>((b * 14 + t) * cfg.feat_dim + f)];
        }
      }
      auto alone = nn::encoder_forward(single, {len}, enc, Mode::eval, nullptr);
      const std::int64_t out_len = alone.second[0];
      const std::int64_t bt = batched.first.extent(1);
      for (std::int64_t t = 0; t < out_len; ++t) {
        for (std::int64_t c = 0; c < d; ++c) {
          diff = std::max(diff, std::abs(alone.first.data()[static_cast<std::size_t>(t * d + c)] -
                                         batched.first.data()[static_cast<std::size_t>(
                                             (b * bt + t) * d + c)]));
        }
      }
    }
    if (diff > 1e-6) {
      return result("encoder.structural", false, "batch-vs-single deviation " + fmt(diff));
    }
  }
  return result("encoder.structural", true, "ok");
}

CheckResult check_gradient_suite(int seeds_per_case) {
  double worst = 0.0;
  std::string worst_case = "";
  auto track = [&](const std::string& name, double err) {
    if (err > worst) {
      worst = err;
      worst_case = name;
    }
  };

  for (int seed = 0; seed < seeds_per_case; ++seed) {
    std::mt19937_64 rng(2000 + static_cast<unsigned>(seed));
    const std::int64_t d = 6, frames = 5, batch = 2;
    SeqMask mask = SeqMask::from_lengths({frames, frames - 2}, frames);

    {
      nn::LinearParams p = nn::LinearParams::init(d, 4, true, rng);
      Tensor x = randn({batch, frames, d}, rng);
      track("linear", ad::grad_check(
                          [&p](const std::vector<Tensor>& in) {
                            return ad::sum_all(nn::linear(in[0], p));
                          },
                          {x, p.weight, p.bias}));
    }
    {
      Tensor x = randn({batch, frames, d}, rng);
      track("activations", ad::grad_check(
                               [](const std::vector<Tensor>& in) {
                                 Tensor s = nn::swish(in[0]);
                                 Tensor g = nn::gelu(in[0]);
                                 return ad::sum_all(ad::add(s, g));
                               },
                               {x}));
    }
    {
      Tensor x = randn({batch, frames, 2 * d}, rng);
      track("glu", ad::grad_check(
                       [](const std::vector<Tensor>& in) { return ad::sum_all(nn::glu(in[0])); },
                       {x}));
    }
    {
      nn::LayerNormParams p = nn::LayerNormParams::init(d);
      Tensor x = randn({batch, frames, d}, rng);
      track("layer_norm", ad::grad_check(
                              [&p](const std::vector<Tensor>& in) {
                                return ad::sum_all(nn::layer_norm(in[0], p));
                              },
                              {x, p.gain, p.shift}));
    }
    {
      nn::BatchNormParams p = nn::BatchNormParams::init(d);
      std::normal_distribution<double> dist(0.0, 1.0);
      for (auto& v : p.running_mean.data()) v = dist(rng);
      for (auto& v : p.running_var.data()) v = 0.5 + std::abs(dist(rng));
      Tensor x = randn({batch, frames, d}, rng);
      track("batch_norm_eval", ad::grad_check(
                                   [&](const std::vector<Tensor>& in) {
                                     nn::BatchNormParams copy = p;
                                     return ad::sum_all(
                                         nn::batch_norm(in[0], copy, Mode::eval, mask));
                                   },
                                   {x, p.gain, p.shift}));
      track("batch_norm_train", ad::grad_check(
                                    [&](const std::vector<Tensor>& in) {
                                      nn::BatchNormParams copy = p;
                                      return ad::sum_all(
                                          nn::batch_norm(in[0], copy, Mode::train, mask));
                                    },
                                    {x, p.gain, p.shift}));
    }
    {
      nn::DepthwiseConvParams p = nn::DepthwiseConvParams::init(d, 3, rng);
      Tensor x = randn({batch, frames, d}, rng);
      track("depthwise_conv1d", ad::grad_check(
                                    [&](const std::vector<Tensor>& in) {
                                      return ad::sum_all(nn::depthwise_conv1d(in[0], p, mask));
                                    },
                                    {x, p.kernel, p.bias}));
    }
    {
      std::mt19937_64 r2(rng());
      nn::SubsamplingParams p = nn::SubsamplingParams::init(8, 4, r2);
      Tensor feats = randn({1, 9, 8}, rng);
      nn::ParamMap pm;
      p.collect("s", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(feats);
      track("conv2d_subsample", ad::grad_check(
                                    [&](const std::vector<Tensor>& in) {
                                      return ad::sum_all(
                                          nn::conv2d_subsample(in.back(), {9}, p).first);
                                    },
                                    inputs));
    }
    {
      nn::RelPosMHAParams p = nn::RelPosMHAParams::init(8, 2, 0.0, rng);
      Tensor x = randn({batch, frames, 8}, rng);
      nn::ParamMap pm;
      p.collect("m", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(x);
      track("mha", ad::grad_check(
                       [&](const std::vector<Tensor>& in) {
                         return ad::sum_all(
                             nn::mha_forward(in.back(), p, mask, Mode::eval, nullptr));
                       },
                       inputs));
    }
    {
      nn::ConvModuleParams p = nn::ConvModuleParams::init(d, 3, 0.0, rng);
      std::normal_distribution<double> dist(0.0, 1.0);
      for (auto& v : p.bn.running_mean.data()) v = dist(rng);
      for (auto& v : p.bn.running_var.data()) v = 0.5 + std::abs(dist(rng));
      Tensor x = randn({batch, frames, d}, rng);
      nn::ParamMap pm;
      p.collect("c", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(x);
      track("conv_module", ad::grad_check(
                               [&](const std::vector<Tensor>& in) {
                                 nn::ConvModuleParams copy = p;
                                 return ad::sum_all(
                                     nn::conv_module_forward(in.back(), copy, mask, Mode::eval));
                               },
                               inputs));
    }
    {
      nn::CgMLPParams p = nn::CgMLPParams::init(d, 8, 3, 0.0, false, rng);
      Tensor x = randn({batch, 4, d}, rng);
      SeqMask m4 = SeqMask::from_lengths({4, 3}, 4);
      nn::ParamMap pm;
      p.collect("g", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(x);
      track("cgmlp", ad::grad_check(
                         [&](const std::vector<Tensor>& in) {
                           return ad::sum_all(nn::cgmlp_forward(in.back(), p, m4, Mode::eval,
                                                                nullptr));
                         },
                         inputs));
    }
    {
      nn::MergeParams p = nn::MergeParams::init(d, 3, rng);
      Tensor a = randn({batch, frames, d}, rng);
      Tensor b = randn({batch, frames, d}, rng);
      nn::ParamMap pm;
      p.collect("mg", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(a);
      inputs.push_back(b);
      track("merge", ad::grad_check(
                         [&](const std::vector<Tensor>& in) {
                           return ad::sum_all(nn::merge_branches(in[in.size() - 2], in.back(), p,
                                                                 mask));
                         },
                         inputs));
    }
    {
      nn::EncoderConfig cfg = toy_config(nn::LayerKind::conformer, 1, 8);
      std::mt19937_64 r2(rng());
      auto enc = nn::EncoderParams::init(cfg, r2);
      auto& layer = std::get<nn::ConformerLayerParams>(enc.layers[0]);
      layer.dropout = 0.0;
      layer.ffn1.dropout = layer.ffn2.dropout = 0.0;
      std::normal_distribution<double> dist(0.0, 1.0);
      for (auto& v : layer.conv.bn.running_mean.data()) v = dist(rng);
      for (auto& v : layer.conv.bn.running_var.data()) v = 0.5 + std::abs(dist(rng));
      SeqMask m4 = SeqMask::from_lengths({4, 3}, 4);
      Tensor x = randn({2, 4, 8}, rng);
      nn::ParamMap pm;
      layer.collect("l", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(x);
      track("conformer_layer", ad::grad_check(
                                   [&](const std::vector<Tensor>& in) {
                                     nn::ConformerLayerParams copy = layer;
                                     return ad::sum_all(nn::conformer_layer(in.back(), copy, m4,
                                                                            Mode::eval, nullptr));
                                   },
                                   inputs));
    }
    {
      nn::EncoderConfig cfg = toy_config(nn::LayerKind::e_branchformer, 1, 8);
      std::mt19937_64 r2(rng());
      auto enc = nn::EncoderParams::init(cfg, r2);
      auto& layer = std::get<nn::EBranchformerLayerParams>(enc.layers[0]);
      layer.dropout = 0.0;
      layer.ffn1.dropout = layer.ffn2.dropout = 0.0;
      layer.cgmlp.dropout = 0.0;
      SeqMask m4 = SeqMask::from_lengths({4, 3}, 4);
      Tensor x = randn({2, 4, 8}, rng);
      nn::ParamMap pm;
      layer.collect("l", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(x);
      track("ebranchformer_layer",
            ad::grad_check(
                [&](const std::vector<Tensor>& in) {
                  return ad::sum_all(
                      nn::ebranchformer_layer(in.back(), layer, m4, Mode::eval, nullptr));
                },
                inputs));
    }
    {
      // ctc_loss through log_softmax on raw scores
      const std::int64_t frames_c = 5, classes = 4;
      Tensor logits = randn({1, frames_c, classes}, rng);
      const std::vector<std::vector<int>> labels{{1, 2, 1}};
      track("ctc_loss", ad::grad_check(
                            [&](const std::vector<Tensor>& in) {
                              return ctc::ctc_loss(ctc::log_softmax_lastaxis(in[0]), labels,
                                                   {frames_c});
                            },
                            {logits}));
    }
    if (seed == 0) {
      // full stack: subsampling + two layers running at subsampled length 6
      nn::EncoderConfig cfg = toy_config(nn::LayerKind::e_branchformer, 2, 8);
      std::mt19937_64 r2(rng());
      auto enc = nn::EncoderParams::init(cfg, r2);
      Tensor feats = randn({1, 30, cfg.feat_dim}, rng);
      nn::ParamMap pm;
      enc.collect("e", pm);
      std::vector<Tensor> inputs = tensors_of(pm);
      inputs.push_back(feats);
      track("full_stack", ad::grad_check(
                              [&](const std::vector<Tensor>& in) {
                                auto [y, lengths] =
                                    nn::encoder_forward(in.back(), {30}, enc, Mode::eval, nullptr);
                                return ad::sum_all(y);
                              },
                              inputs));
    }
  }
  return result("gradients.suite", worst < 1e-4, "max rel err " + fmt(worst) + " (" + worst_case + ")");
}

CheckResult check_ctc_equivalence(int instances) {
  std::mt19937_64 rng(77);
  double worst = 0.0;
  int done = 0;
  while (done < instances) {
    std::uniform_int_distribution<std::int64_t> t_dist(1, 8);
    std::uniform_int_distribution<std::int64_t> v_dist(1, 4);
    const std::int64_t frames = t_dist(rng);
    const std::int64_t vocab = v_dist(rng);
    // random normalized log-probs
    Tensor logits = randn({1, frames, vocab + 1}, rng);
    Tensor lp = ctc::log_softmax_lastaxis(logits);
    // random admissible label
    std::uniform_int_distribution<std::int64_t> l_dist(0, frames);
    std::vector<int> labels;
    const std::int64_t want = l_dist(rng);
    std::uniform_int_distribution<int> tok(1, static_cast<int>(vocab));
    for (std::int64_t i = 0; i < want; ++i) labels.push_back(tok(rng));
    if (ctc::min_frames_for(labels) > frames) continue;

    const double fast = ctc::ctc_loss(lp, {labels}, {frames}).item();
    Tensor single = ad::reshape(lp, {frames, vocab + 1});
    const double brute = ctc::ctc_brute_force(single, labels);
    worst = std::max(worst, std::abs(fast - brute));
    ++done;
  }
  return result("ctc.equivalence", worst <= 1e-9,
                "max |loss difference| " + fmt(worst) + " over " + std::to_string(instances) +
                    " instances");
}

CheckResult check_ctc_properties() {
  std::mt19937_64 rng(99);
  // Permutation covariance: relabeling tokens in both log-probs and labels
  // leaves the loss bit-identical.
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t frames = 6, vocab = 4;
    Tensor lp = ctc::log_softmax_lastaxis(randn({1, frames, vocab + 1}, rng));
    std::vector<int> labels{1, 3, 2};
    std::vector<int> perm{0, 2, 3, 4, 1};  // blank fixed
    Tensor permuted = Tensor::zeros(lp.shape());
    for (std::int64_t t = 0; t < frames; ++t) {
      for (std::int64_t c = 0; c <= vocab; ++c) {
        permuted.data()[static_cast<std::size_t>(t * (vocab + 1) + perm[static_cast<std::size_t>(c)])] =
            lp.data()[static_cast<std::size_t>(t * (vocab + 1) + c)];
      }
    }
    std::vector<int> relabeled;
    for (int tok : labels) relabeled.push_back(perm[static_cast<std::size_t>(tok)]);
    const double a = ctc::ctc_loss(lp, {labels}, {frames}).item();
    const double b = ctc::ctc_loss(permuted, {relabeled}, {frames}).item();
    if (a != b) {
      return result("ctc.properties", false, "relabeling changed the loss");
    }
  }
  // Monotone admissibility: appending a uniform frame keeps the loss finite.
  for (int trial = 0; trial < 30; ++trial) {
    const std::int64_t frames = 4, vocab = 3;
    Tensor lp = ctc::log_softmax_lastaxis(randn({1, frames, vocab + 1}, rng));
    std::vector<int> labels{2, 2};
    const double base = ctc::ctc_loss(lp, {labels}, {frames}).item();
    Tensor extended = Tensor::full({1, frames + 1, vocab + 1},
                                   -std::log(static_cast<double>(vocab + 1)));
    std::copy(lp.data().begin(), lp.data().end(), extended.data().begin());
    const double more = ctc::ctc_loss(extended, {labels}, {frames + 1}).item();
    if (!std::isfinite(base) || !std::isfinite(more)) {
      return result("ctc.properties", false, "loss not finite on admissible instance");
    }
  }
  // Inadmissible instances raise the defined error.
  {
    Tensor lp = ctc::log_softmax_lastaxis(randn({1, 2, 3}, rng));
    bool threw = false;
    try {
      ctc::ctc_loss(lp, {{1, 1}}, {2});
    } catch (const ctc::AdmissibilityError&) {
      threw = true;
    }
    if (!threw) return result("ctc.properties", false, "missing admissibility error");
  }
  return result("ctc.properties", true, "ok");
}

CheckResult check_profiler_exactness(bool include_large_preset) {
  std::vector<std::string> presets{"medium-conformer-deep", "medium-conformer-wide",
                                   "medium-ebranchformer"};
  if (include_large_preset) presets.push_back("large-ebranchformer");
  for (const auto& name : presets) {
    nn::EncoderConfig cfg = nn::EncoderConfig::preset(name);
    const std::int64_t analytic = prof::count_params(cfg, 500);
    const std::int64_t enumerated = prof::count_params_enumerated(cfg, 500);
    if (analytic != enumerated) {
      return result("profiler.exactness", false,
                    name + ": analytic " + std::to_string(analytic) + " != enumerated " +
                        std::to_string(enumerated));
    }
  }
  for (auto kind : {nn::LayerKind::conformer, nn::LayerKind::e_branchformer}) {
    for (std::int64_t layers : {1, 2}) {
      nn::EncoderConfig cfg = toy_config(kind, layers, 8);
      for (std::int64_t frames : {10, 17}) {
        const std::int64_t analytic = prof::count_macs(cfg, frames);
        const std::int64_t counted = prof::mac_oracle(cfg, frames);
        if (analytic != counted) {
          return result("profiler.exactness", false,
                        std::string(kind == nn::LayerKind::conformer ? "conformer" : "ebf") +
                            " layers=" + std::to_string(layers) + " T=" + std::to_string(frames) +
                            ": analytic " + std::to_string(analytic) + " != instrumented " +
                            std::to_string(counted));
        }
      }
      const std::int64_t param_analytic = prof::count_params(cfg, 11);
      const std::int64_t param_enum = prof::count_params_enumerated(cfg, 11);
      if (param_analytic != param_enum) {
        return result("profiler.exactness", false, "toy config parameter mismatch");
      }
    }
  }
  return result("profiler.exactness", true, "analytic == instrumented for all checked configs");
}

CheckResult check_profiler_properties() {
  nn::EncoderConfig base = toy_config(nn::LayerKind::e_branchformer, 2, 8);
  const std::int64_t ref = prof::count_macs(base, 20);
  // Monotone in T, d, expansions and layer count.
  {
    nn::EncoderConfig c = base;
    if (prof::count_macs(c, 24) < ref) return result("profiler.properties", false, "not monotone in T");
    c = base;
    c.d = 12;
    c.heads = 2;
    if (prof::count_macs(c, 20) < ref) return result("profiler.properties", false, "not monotone in d");
    c = base;
    c.ffn_expansion = 4.0;
    if (prof::count_macs(c, 20) < ref) {
      return result("profiler.properties", false, "not monotone in d_ff");
    }
    c = base;
    c.mlp_expansion = 4.0;
    if (prof::count_macs(c, 20) < ref) {
      return result("profiler.properties", false, "not monotone in d_mlp");
    }
    c = base;
    c.num_layers = 3;
    if (prof::count_macs(c, 20) < ref) {
      return result("profiler.properties", false, "not monotone in layers");
    }
  }
  // FFN MACs scale linearly in d_ff at fixed T.
  {
    auto ffn_macs = [&](double expansion) {
      nn::EncoderConfig c = base;
      c.ffn_expansion = expansion;
      const auto report = prof::profile_report(c, "x", 0.2, 100, 11);
      for (const auto& row : report.modules) {
        if (row.name == "encoder.ffn") return row.macs;
      }
      return std::int64_t{-1};
    };
    const std::int64_t a = ffn_macs(2.0), b = ffn_macs(4.0), c3 = ffn_macs(6.0);
    if (b - a != c3 - b || 2 * a != b) {
      return result("profiler.properties", false, "FFN MACs not linear in d_ff");
    }
  }
  // Encoder-only parameter ordering across the medium presets.
  {
    auto layers_params = [](const char* name) {
      nn::EncoderConfig cfg = nn::EncoderConfig::preset(name);
      const auto report = prof::profile_report(cfg, name, 10.0, 100, 500);
      std::int64_t total = 0;
      for (const auto& row : report.modules) {
        if (row.name.rfind("encoder.", 0) == 0) total += row.params;
      }
      return total;
    };
    const std::int64_t ebf = layers_params("medium-ebranchformer");
    const std::int64_t deep = layers_params("medium-conformer-deep");
    const std::int64_t wide = layers_params("medium-conformer-wide");
    if (!(ebf < deep && deep < wide)) {
      return result("profiler.properties", false,
                    "encoder param ordering violated: " + std::to_string(ebf) + ", " +
                        std::to_string(deep) + ", " + std::to_string(wide));
    }
  }
  return result("profiler.properties", true, "ok");
}

CheckResult check_schedule_and_adam() {
  harness::WarmupSchedule sched{1e-3, 400};
  if (ad::rel_err(sched.lr_at(400), 1e-3) > 1e-12) {
    return result("harness.schedule_adam", false, "lr at warmup != peak");
  }
  if (ad::rel_err(sched.lr_at(100), 0.25e-3) > 1e-12 ||
      ad::rel_err(sched.lr_at(1600), 0.5e-3) > 1e-12) {
    return result("harness.schedule_adam", false, "ramp/decay values wrong");
  }
  double prev = 0.0;
  for (std::int64_t s = 1; s <= 4000; ++s) {
    const double lr = sched.lr_at(s);
    if (s <= 400 && lr + 1e-15 < prev) {
      return result("harness.schedule_adam", false, "lr not non-decreasing during warmup");
    }
    if (s > 400 && lr > prev + 1e-15) {
      return result("harness.schedule_adam", false, "lr not non-increasing after warmup");
    }
    prev = lr;
  }

  // Scalar hand-computed first Adam step.
  {
    Tensor p = Tensor::zeros({1}, true);
    p.grad()[0] = 1.0;
    harness::Adam adam({{"p", p}}, harness::AdamConfig{});
    adam.step(0.1);
    const double m_hat = (0.1 * 1.0) / (1.0 - 0.9);
    const double v_hat = (0.02 * 1.0) / (1.0 - 0.98);
    const double expect = -0.1 * m_hat / (std::sqrt(v_hat) + 1e-9);
    if (ad::rel_err(p.data()[0], expect) > 1e-12) {
      return result("harness.schedule_adam", false, "first Adam step mismatch");
    }
  }
  // Zero gradient from a fresh state leaves parameters unchanged.
  {
    Tensor p = Tensor::from_data({2}, {1.5, -2.0}, true);
    harness::Adam adam({{"p", p}}, harness::AdamConfig{});
    adam.step(0.1);
    if (p.data()[0] != 1.5 || p.data()[1] != -2.0) {
      return result("harness.schedule_adam", false, "zero-grad step moved parameters");
    }
  }
  // Identical parameters with identical gradients stay identical.
  {
    Tensor a = Tensor::from_data({3}, {0.3, -0.7, 2.0}, true);
    Tensor b = Tensor::from_data({3}, {0.3, -0.7, 2.0}, true);
    harness::Adam adam({{"a", a}, {"b", b}}, harness::AdamConfig{});
    for (int i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        a.grad()[j] = 0.25 * static_cast<double>(j + 1);
        b.grad()[j] = 0.25 * static_cast<double>(j + 1);
      }
      adam.step(0.05);
      adam.zero_grad();
    }
    if (a.data() != b.data()) {
      return result("harness.schedule_adam", false, "twin parameters diverged");
    }
  }
  return result("harness.schedule_adam", true, "ok");
}

CheckResult check_sampling_statistics() {
  std::mt19937_64 rng(123);
  // Inverted dropout keeps the expectation.
  {
    const double rate = 0.3;
    double sum = 0.0;
    const int n = 100000;
    Tensor one = Tensor::full({1}, 1.0);
    for (int i = 0; i < n; ++i) {
      sum += nn::dropout(one, rate, Mode::train, &rng).data()[0];
    }
    const double mean = sum / n;
    if (std::abs(mean - 1.0) > 0.02) {
      return result("harness.sampling", false, "dropout mean " + fmt(mean));
    }
  }
  // Stochastic depth skip rate.
  {
    const double p_drop = 0.1;
    int skipped = 0;
    const int n = 10000;
    Tensor x = Tensor::full({1}, 1.0);
    auto bump = [](const Tensor& in) { return ad::shift(in, 1.0); };
    for (int i = 0; i < n; ++i) {
      Tensor y = nn::stochastic_depth(bump, x, p_drop, Mode::train, &rng);
      if (y.data()[0] == 1.0) ++skipped;
    }
    const double rate = static_cast<double>(skipped) / n;
    if (std::abs(rate - p_drop) > 0.01) {
      return result("harness.sampling", false, "stochastic depth skip rate " + fmt(rate));
    }
  }
  // SpecAugment masked fraction: one time mask and one frequency mask give
  // E[frac] = pt + pf - pt*pf with p = E[width]/extent.
  {
    const std::int64_t frames = 20, fdim = 12;
    nn::SpecAugmentConfig cfg{1, 10, 1, 6};
    const double pt = (10.0 / 2.0) / static_cast<double>(frames);
    const double pf = (6.0 / 2.0) / static_cast<double>(fdim);
    const double expect = pt + pf - pt * pf;
    double masked = 0.0;
    const int n = 4000;
    Tensor feats = Tensor::full({1, frames, fdim}, 1.0);
    for (int i = 0; i < n; ++i) {
      Tensor out = nn::spec_augment(feats, cfg, rng);
      std::int64_t zeros = 0;
      for (double v : out.data()) zeros += v == 0.0 ? 1 : 0;
      masked += static_cast<double>(zeros) / static_cast<double>(frames * fdim);
    }
    masked /= n;
    if (std::abs(masked - expect) > 0.02) {
      return result("harness.sampling", false,
                    "specaugment fraction " + fmt(masked) + " vs expected " + fmt(expect));
    }
  }
  return result("harness.sampling", true, "ok");
}

CheckResult check_determinism() {
  harness::SyntheticTaskSpec spec;
  spec.vocab = 5;
  spec.feat_dim = 8;
  std::mt19937_64 a(5), b(5);
  harness::Batch ba = harness::gen_synthetic_batch(spec, a, 6);
  harness::Batch bb = harness::gen_synthetic_batch(spec, b, 6);
  if (ba.feats.data() != bb.feats.data() || ba.labels != bb.labels || ba.lengths != bb.lengths) {
    return result("harness.determinism", false, "same-seed batches differ");
  }
  std::mt19937_64 c(9), d(9);
  nn::SpecAugmentConfig cfg{2, 4, 1, 3};
  Tensor f = harness::gen_synthetic_batch(spec, a, 3).feats;
  if (nn::spec_augment(f, cfg, c).data() != nn::spec_augment(f, cfg, d).data()) {
    return result("harness.determinism", false, "spec_augment not seed-deterministic");
  }
  return result("harness.determinism", true, "ok");
}

std::vector<CheckResult> run_all() {
  std::vector<CheckResult> out;
  out.push_back(check_tensor_properties());
  out.push_back(check_composite_gradients(100));
  out.push_back(check_primitive_invariants());
  out.push_back(check_mask_hygiene());
  out.push_back(check_attention_invariants());
  out.push_back(check_structural_identities());
  out.push_back(check_gradient_suite(10));
  out.push_back(check_ctc_equivalence(200));
  out.push_back(check_ctc_properties());
  out.push_back(check_profiler_exactness(false));
  out.push_back(check_profiler_properties());
  out.push_back(check_schedule_and_adam());
  out.push_back(check_sampling_statistics());
  out.push_back(check_determinism());
  return out;
}

}  // namespace branchkit::verify
