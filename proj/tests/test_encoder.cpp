#include <cmath>
#include <random>

#include "branchkit/encoder.hpp"
#include "branchkit/gradcheck.hpp"
#include "branchkit/verify.hpp"
#include "doctest.h"

using namespace branchkit;
using ad::Tensor;
using nn::Mode;
using nn::SeqMask;

namespace {

Tensor randn(const ad::Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("ffn_forward") {
  std::mt19937_64 rng(1);
  nn::FFNParams zero = nn::FFNParams::init(4, 8, 0.0, rng);
  std::fill(zero.in.weight.data().begin(), zero.in.weight.data().end(), 0.0);
  std::fill(zero.in.bias.data().begin(), zero.in.bias.data().end(), 0.0);
  std::fill(zero.out.weight.data().begin(), zero.out.weight.data().end(), 0.0);
  std::fill(zero.out.bias.data().begin(), zero.out.bias.data().end(), 0.0);
  Tensor x = randn({2, 3, 4}, rng);
  const Tensor zero_out = nn::ffn_forward(x, zero, Mode::eval, nullptr);
  for (double v : zero_out.data()) CHECK(v == 0.0);

  // scalar chain: d = d_ff = 1, unit weights, zero biases, x = 1
  nn::FFNParams unit;
  unit.in.weight = Tensor::from_data({1, 1}, {1.0});
  unit.in.bias = Tensor::from_data({1}, {0.0});
  unit.out.weight = Tensor::from_data({1, 1}, {1.0});
  unit.out.bias = Tensor::from_data({1}, {0.0});
  unit.dropout = 0.0;
  const double swish1 = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(nn::ffn_forward(Tensor::from_data({1, 1, 1}, {1.0}), unit, Mode::eval, nullptr).item() ==
        doctest::Approx(swish1).epsilon(1e-12));
  CHECK(swish1 == doctest::Approx(0.731058).epsilon(1e-5));
}

TEST_CASE("conv_module op order") {
  std::mt19937_64 rng(3);
  const std::int64_t d = 6, frames = 5;
  nn::ConvModuleParams p = nn::ConvModuleParams::init(d, 3, 0.0, rng);
  std::normal_distribution<double> dist;
  for (auto& v : p.bn.running_mean.data()) v = dist(rng);
  for (auto& v : p.bn.running_var.data()) v = 0.5 + std::abs(dist(rng));
  SeqMask mask = SeqMask::from_lengths({frames, 3}, frames);
  Tensor x = randn({2, frames, d}, rng);

  nn::ConvModuleParams copy = p;
  Tensor got = nn::conv_module_forward(x, copy, mask, Mode::eval);

  // step-by-step reference in the cited order
  nn::ConvModuleParams ref = p;
  Tensor h = nn::pointwise_conv(x, ref.pw1);
  h = nn::glu(h);
  h = nn::depthwise_conv1d(h, ref.dw, mask);
  h = nn::batch_norm(h, ref.bn, Mode::eval, mask);
  h = nn::swish(h);
  h = nn::pointwise_conv(h, ref.pw2);
  CHECK(got.data() == h.data());

  // permuting the order (swish before batch norm) changes the output
  nn::ConvModuleParams perm = p;
  Tensor g = nn::pointwise_conv(x, perm.pw1);
  g = nn::glu(g);
  g = nn::depthwise_conv1d(g, perm.dw, mask);
  g = nn::swish(g);
  g = nn::batch_norm(g, perm.bn, Mode::eval, mask);
  g = nn::pointwise_conv(g, perm.pw2);
  double diff = 0.0;
  for (std::size_t i = 0; i < g.data().size(); ++i) {
    diff = std::max(diff, std::abs(g.data()[i] - got.data()[i]));
  }
  CHECK(diff > 1e-6);

  // all-zero parameters with running stats (0,1) collapse to zeros
  nn::ConvModuleParams zeros = nn::ConvModuleParams::init(d, 3, 0.0, rng);
  std::fill(zeros.pw1.weight.data().begin(), zeros.pw1.weight.data().end(), 0.0);
  std::fill(zeros.pw1.bias.data().begin(), zeros.pw1.bias.data().end(), 0.0);
  std::fill(zeros.dw.kernel.data().begin(), zeros.dw.kernel.data().end(), 0.0);
  std::fill(zeros.dw.bias.data().begin(), zeros.dw.bias.data().end(), 0.0);
  std::fill(zeros.pw2.weight.data().begin(), zeros.pw2.weight.data().end(), 0.0);
  std::fill(zeros.pw2.bias.data().begin(), zeros.pw2.bias.data().end(), 0.0);
  const Tensor conv_zero = nn::conv_module_forward(x, zeros, mask, Mode::eval);
  for (double v : conv_zero.data()) CHECK(v == 0.0);
}

TEST_CASE("cgmlp hand-evaluated example") {
  // d=2, d_mlp=4, one frame x=[1,-1], U=[[1,0,1,0],[0,1,0,1]], delta kernel,
  // V=I: output = [GeLU(1), -GeLU(-1)] = [0.841345..., 0.158655...]
  nn::CgMLPParams p;
  p.pre_norm = nn::LayerNormParams::init(2);
  p.u.weight = Tensor::from_data({2, 4}, {1, 0, 1, 0, 0, 1, 0, 1});
  p.u.bias = Tensor::zeros({4});
  p.gate_norm = nn::LayerNormParams::init(2);
  p.dw.kernel = Tensor::from_data({2, 3}, {0, 1, 0, 0, 1, 0});
  p.dw.bias = Tensor::zeros({2});
  p.v.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  p.v.bias = Tensor::zeros({2});
  p.dropout = 0.0;

  Tensor x = Tensor::from_data({1, 1, 2}, {1.0, -1.0});
  Tensor y = nn::cgmlp_forward(x, p, SeqMask::full(1, 1), Mode::eval, nullptr);
  CHECK(y.data()[0] == doctest::Approx(0.841345).epsilon(1e-5));
  CHECK(y.data()[1] == doctest::Approx(0.158655).epsilon(1e-4));

  // V = 0 kills the output
  std::fill(p.v.weight.data().begin(), p.v.weight.data().end(), 0.0);
  const Tensor gated_zero = nn::cgmlp_forward(x, p, SeqMask::full(1, 1), Mode::eval, nullptr);
  for (double v : gated_zero.data()) {
    CHECK(v == 0.0);
  }

  std::mt19937_64 rng(5);
  CHECK_THROWS_AS(nn::CgMLPParams::init(4, 5, 3, 0.0, false, rng), std::invalid_argument);
}

TEST_CASE("merge_branches") {
  std::mt19937_64 rng(7);
  const std::int64_t d = 4, frames = 3;
  nn::MergeParams p = nn::MergeParams::init(d, 3, rng);
  SeqMask mask = SeqMask::full(1, frames);
  Tensor a = randn({1, frames, d}, rng);
  Tensor b = randn({1, frames, d}, rng);

  // equality with an explicit step-by-step evaluation
  Tensor got = nn::merge_branches(a, b, p, mask);
  Tensor c = ad::concat({a, b}, 2);
  Tensor ref = nn::linear(ad::add(c, nn::depthwise_conv1d(c, p.dw, mask)), p.proj);
  double diff = 0.0;
  for (std::size_t i = 0; i < ref.data().size(); ++i) {
    diff = std::max(diff, std::abs(ref.data()[i] - got.data()[i]));
  }
  CHECK(diff <= 1e-12);

  // zero projection gives zeros
  nn::MergeParams zp = p;
  std::fill(zp.proj.weight.data().begin(), zp.proj.weight.data().end(), 0.0);
  std::fill(zp.proj.bias.data().begin(), zp.proj.bias.data().end(), 0.0);
  const Tensor merged_zero = nn::merge_branches(a, b, zp, mask);
  for (double v : merged_zero.data()) CHECK(v == 0.0);

  // conv_in_place variant drops the additive path
  Tensor in_place = nn::merge_branches(a, b, p, mask, nn::MergeMode::conv_in_place);
  Tensor ref2 = nn::linear(nn::depthwise_conv1d(c, p.dw, mask), p.proj);
  CHECK(in_place.data() == ref2.data());

  CHECK_THROWS_AS(nn::merge_branches(a, randn({1, frames, d + 1}, rng), p, mask),
                  std::invalid_argument);
}

TEST_CASE("e-branchformer branch independence") {
  std::mt19937_64 rng(9);
  nn::EncoderConfig cfg;
  cfg.kind = nn::LayerKind::e_branchformer;
  cfg.num_layers = 1;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.ffn_expansion = 2.0;
  cfg.mlp_expansion = 2.0;
  cfg.k_conv = cfg.k_mlp = 3;
  cfg.dropout = 0.0;
  cfg.attn_dropout = 0.0;
  cfg.feat_dim = 8;
  auto enc = nn::EncoderParams::init(cfg, rng);
  auto& layer = std::get<nn::EBranchformerLayerParams>(enc.layers[0]);
  // zero both FFNs so x1 == x, and zero the MHA branch
  for (auto* lin : {&layer.ffn1.in, &layer.ffn1.out, &layer.ffn2.in, &layer.ffn2.out,
                    &layer.mha.wout}) {
    std::fill(lin->weight.data().begin(), lin->weight.data().end(), 0.0);
    std::fill(lin->bias.data().begin(), lin->bias.data().end(), 0.0);
  }

  SeqMask mask = SeqMask::full(2, 5);
  Tensor x = randn({2, 5, 8}, rng);
  Tensor y = nn::ebranchformer_layer(x, layer, mask, Mode::eval, nullptr);

  // reference: merge of (0, cgMLP(x)) around the same residual and norms
  Tensor mlp = nn::cgmlp_forward(x, layer.cgmlp, mask, Mode::eval, nullptr);
  Tensor merged = nn::merge_branches(Tensor::zeros({2, 5, 8}), mlp, layer.merge, mask,
                                     layer.merge_mode);
  Tensor ref = nn::layer_norm(ad::add(x, merged), layer.norm_final);
  for (std::size_t i = 0; i < y.data().size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-10));
  }
}

TEST_CASE("stochastic depth") {
  Tensor x = Tensor::full({2}, 1.0);
  auto bump = [](const Tensor& in) { return ad::shift(in, 1.0); };
  std::mt19937_64 rng(11);
  for (int i = 0; i < 50; ++i) {
    CHECK(nn::stochastic_depth(bump, x, 0.0, Mode::train, &rng).data()[0] == 2.0);
    CHECK(nn::stochastic_depth(bump, x, 0.9, Mode::eval, nullptr).data()[0] == 2.0);
  }
  CHECK_THROWS_AS(nn::stochastic_depth(bump, x, 1.0, Mode::train, &rng), std::invalid_argument);
}

TEST_CASE("spec_augment") {
  std::mt19937_64 rng(13);
  Tensor feats = Tensor::full({2, 6, 5}, 1.0);
  nn::SpecAugmentConfig none{0, 0, 0, 0};
  CHECK(nn::spec_augment(feats, none, rng).data() == feats.data());

  // a frequency mask of full width wipes the whole map
  nn::SpecAugmentConfig full{0, 0, 1, 0};
  full.max_freq_width = 5;
  bool saw_all_zero = false;
  for (int i = 0; i < 64 && !saw_all_zero; ++i) {
    Tensor out = nn::spec_augment(feats, full, rng);
    bool all_zero = true;
    for (double v : out.data()) all_zero = all_zero && v == 0.0;
    saw_all_zero = all_zero;
  }
  CHECK(saw_all_zero);  // width F is sampled with positive probability

  // oversized widths are clipped, never an error
  nn::SpecAugmentConfig clipped{1, 1000, 1, 1000};
  CHECK_NOTHROW(nn::spec_augment(feats, clipped, rng));
}

TEST_CASE("encoder_forward") {
  std::mt19937_64 rng(15);
  nn::EncoderConfig cfg;
  cfg.kind = nn::LayerKind::conformer;
  cfg.num_layers = 0;
  cfg.d = 4;
  cfg.heads = 2;
  cfg.feat_dim = 8;
  cfg.dropout = 0.0;
  auto enc = nn::EncoderParams::init(cfg, rng);
  Tensor feats = randn({1, 11, 8}, rng);

  // zero layers: output is exactly the subsampler output
  auto [y, lengths] = nn::encoder_forward(feats, {11}, enc, Mode::eval, nullptr);
  auto [ref, ref_lengths] = nn::conv2d_subsample(feats, {11}, enc.subsample);
  CHECK(y.data() == ref.data());
  CHECK(lengths == ref_lengths);

  CHECK_THROWS_AS(nn::encoder_forward(randn({1, 11, 9}, rng), {11}, enc, Mode::eval, nullptr),
                  std::invalid_argument);
}

TEST_CASE("ffn gradcheck") {
  std::mt19937_64 rng(21);
  nn::FFNParams p = nn::FFNParams::init(6, 12, 0.0, rng);
  Tensor x = randn({2, 3, 6}, rng);
  const double err = ad::grad_check(
      [&](const std::vector<Tensor>& in) {
        return ad::sum_all(nn::ffn_forward(in.back(), p, Mode::eval, nullptr));
      },
      {p.in.weight, p.in.bias, p.out.weight, p.out.bias, x});
  CHECK(err < 1e-4);
}

TEST_CASE("full-stack gradcheck, two layers at subsampled length 6") {
  std::mt19937_64 rng(23);
  nn::EncoderConfig cfg;
  cfg.kind = nn::LayerKind::e_branchformer;
  cfg.num_layers = 2;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.ffn_expansion = 2.0;
  cfg.mlp_expansion = 2.0;
  cfg.k_conv = 3;
  cfg.k_mlp = 3;
  cfg.k_merge = 3;
  cfg.dropout = 0.0;
  cfg.attn_dropout = 0.0;
  cfg.feat_dim = 8;
  auto enc = nn::EncoderParams::init(cfg, rng);
  Tensor feats = randn({1, 30, 8}, rng);  // 30 frames subsample to 6
  nn::ParamMap pm;
  enc.collect("e", pm);
  std::vector<Tensor> inputs;
  for (auto& [name, t] : pm) inputs.push_back(t);
  inputs.push_back(feats);
  const double err = ad::grad_check(
      [&](const std::vector<Tensor>& in) {
        auto [y, lengths] = nn::encoder_forward(in.back(), {30}, enc, Mode::eval, nullptr);
        CHECK(lengths == std::vector<std::int64_t>{6});
        return ad::sum_all(y);
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("structural identities") {
  auto r = verify::check_structural_identities();
  CHECK_MESSAGE(r.pass, r.detail);
}
