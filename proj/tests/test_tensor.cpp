#include <cmath>
#include <random>

#include "branchkit/encoder.hpp"
#include "branchkit/gradcheck.hpp"
#include "branchkit/ops.hpp"
#include "branchkit/verify.hpp"
#include "doctest.h"

using namespace branchkit;
using ad::Tensor;

TEST_CASE("elementwise binaries") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {3, 4});
  Tensor p = ad::mul(a, b);
  CHECK(p.data() == std::vector<double>{3, 8});

  Tensor x = Tensor::from_data({2, 2}, {1, -2, 0.5, 7});
  Tensor same = ad::add(x, Tensor::zeros({2, 2}));
  CHECK(same.data() == x.data());

  CHECK_THROWS_WITH_AS(ad::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})),
                       doctest::Contains("[3,2]"), std::invalid_argument);
}

TEST_CASE("grad of sum(a*b) w.r.t. a equals b") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> dist;
  Tensor a = Tensor::zeros({3, 4}, true);
  Tensor b = Tensor::zeros({3, 4});
  for (auto& v : a.data()) v = dist(rng);
  for (auto& v : b.data()) v = dist(rng);
  ad::Tape tape;
  {
    ad::Tape::Scope scope(tape);
    tape.backward(ad::sum_all(ad::mul(a, b)));
  }
  for (std::size_t i = 0; i < 12; ++i) CHECK(a.grad()[i] == b.data()[i]);
}

TEST_CASE("matmul") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(ad::matmul(eye, m).data() == m.data());

  Tensor row = Tensor::from_data({1, 2}, {1, 2});
  Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(ad::matmul(row, col).data() == std::vector<double>{11});

  CHECK_THROWS_AS(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})),
                  std::invalid_argument);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist;
  Tensor a = Tensor::zeros({4, 3});
  Tensor b = Tensor::zeros({3, 5});
  for (auto& v : a.data()) v = dist(rng);
  for (auto& v : b.data()) v = dist(rng);
  const double err = ad::grad_check(
      [](const std::vector<Tensor>& in) { return ad::sum_all(ad::matmul(in[0], in[1])); }, {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("unary ops") {
  CHECK(ad::unary(Tensor::scalar(0.0), ad::Unary::sigmoid).item() == 0.5);
  CHECK(ad::unary(Tensor::scalar(0.0), ad::Unary::erf).item() == 0.0);

  Tensor x = Tensor::scalar(1.0);
  const double err = ad::grad_check(
      [](const std::vector<Tensor>& in) { return ad::unary(in[0], ad::Unary::sigmoid); }, {x});
  CHECK(err < 1e-7);

  CHECK_THROWS_AS(ad::unary(Tensor::scalar(-1.0), ad::Unary::log), std::domain_error);
  CHECK_THROWS_AS(ad::unary(Tensor::scalar(0.0), ad::Unary::log), std::domain_error);
}

TEST_CASE("reduce") {
  Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(ad::reduce(x, 1, ad::Reduce::sum).data() == std::vector<double>{3, 7});
  CHECK(ad::reduce(Tensor::full({3, 5}, 2.5), 0, ad::Reduce::mean).data() ==
        std::vector<double>(5, 2.5));
  CHECK_THROWS_AS(ad::reduce(x, 2, ad::Reduce::sum), std::invalid_argument);

  Tensor y = Tensor::zeros({4}, true);
  ad::Tape tape;
  {
    ad::Tape::Scope scope(tape);
    tape.backward(ad::reduce(y, 0, ad::Reduce::mean, true));
  }
  for (double g : y.grad()) CHECK(g == 0.25);
}

TEST_CASE("split and concat") {
  Tensor z = Tensor::from_data({4}, {1, 2, 3, 4});
  auto [a, b] = ad::split2(z, 0);
  CHECK(a.data() == std::vector<double>{1, 2});
  CHECK(b.data() == std::vector<double>{3, 4});
  CHECK(ad::concat({a, b}, 0).data() == z.data());
  CHECK_THROWS_AS(ad::split2(Tensor::zeros({3}), 0), std::invalid_argument);
  CHECK_THROWS_AS(ad::concat({Tensor::zeros({2, 2}), Tensor::zeros({3, 3})}, 0),
                  std::invalid_argument);

  Tensor zz = Tensor::from_data({4}, {1, 2, 3, 4}, true);
  ad::Tape tape;
  {
    ad::Tape::Scope scope(tape);
    auto [first, second] = ad::split2(zz, 0);
    tape.backward(ad::sum_all(first));
  }
  CHECK(zz.grad() == std::vector<double>{1, 1, 0, 0});
}

TEST_CASE("backward semantics") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  ad::Tape tape;
  {
    ad::Tape::Scope scope(tape);
    Tensor loss = ad::sum_all(ad::mul(x, x));
    tape.backward(loss);
  }
  CHECK(x.grad() == std::vector<double>{2, 4});

  // a tape runs backward once until reset
  ad::Tape tape2;
  Tensor loss2;
  {
    ad::Tape::Scope scope(tape2);
    loss2 = ad::sum_all(ad::mul(x, x));
  }
  tape2.backward(loss2);
  CHECK_THROWS_AS(tape2.backward(loss2), std::runtime_error);
  tape2.reset();
  CHECK(tape2.size() == 0);

  // loss independent of x leaves its gradient zero
  Tensor unused = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor other = Tensor::from_data({3}, {1, 2, 3}, true);
  ad::Tape tape3;
  {
    ad::Tape::Scope scope(tape3);
    Tensor loss = ad::sum_all(ad::mul(other, other));
    tape3.backward(loss);
  }
  CHECK_FALSE(unused.has_grad());

  // non-scalar loss is rejected
  ad::Tape tape4;
  {
    ad::Tape::Scope scope(tape4);
    Tensor y = ad::mul(x, x);
    CHECK_THROWS_AS(tape4.backward(y), std::invalid_argument);
  }

  // backward on a tensor never recorded on the tape
  ad::Tape tape5;
  CHECK_THROWS_AS(tape5.backward(Tensor::scalar(1.0)), std::invalid_argument);
}

TEST_CASE("grad_check oracle behaviors") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> dist;
  Tensor a = Tensor::zeros({3, 3});
  Tensor b = Tensor::zeros({3, 3});
  for (auto& v : a.data()) v = dist(rng);
  for (auto& v : b.data()) v = dist(rng);
  const double chain = ad::grad_check(
      [](const std::vector<Tensor>& in) {
        return ad::sum_all(ad::matmul(ad::matmul(in[0], in[1]), in[0]));
      },
      {a, b});
  CHECK(chain < 1e-6);

  const double constant = ad::grad_check(
      [](const std::vector<Tensor>& in) {
        (void)in;
        return Tensor::scalar(4.0);
      },
      {a});
  CHECK(constant == 0.0);

  // non-determinism is detected by double evaluation
  CHECK_THROWS_AS(ad::grad_check(
                      [&rng, &dist](const std::vector<Tensor>& in) {
                        return ad::scale(ad::sum_all(in[0]), dist(rng));
                      },
                      {a}),
                  std::runtime_error);
}

TEST_CASE("tensor property suites") {
  auto r = verify::check_tensor_properties();
  CHECK_MESSAGE(r.pass, r.detail);
  auto g = verify::check_composite_gradients(25);
  CHECK_MESSAGE(g.pass, g.detail);
}

TEST_CASE("backward through a full layer matches finite differences") {
  // d=8, T=5, all parameters differentiated at once
  std::mt19937_64 rng(77);
  nn::EncoderConfig cfg;
  cfg.kind = nn::LayerKind::e_branchformer;
  cfg.num_layers = 1;
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
  auto& layer = std::get<nn::EBranchformerLayerParams>(enc.layers[0]);
  layer.ffn1.dropout = layer.ffn2.dropout = layer.cgmlp.dropout = 0.0;
  nn::SeqMask mask = nn::SeqMask::from_lengths({5, 4}, 5);
  std::normal_distribution<double> dist;
  Tensor x = Tensor::zeros({2, 5, 8});
  for (auto& v : x.data()) v = dist(rng);
  nn::ParamMap pm;
  layer.collect("l", pm);
  std::vector<Tensor> inputs;
  for (auto& [name, t] : pm) inputs.push_back(t);
  inputs.push_back(x);
  const double err = ad::grad_check(
      [&](const std::vector<Tensor>& in) {
        return ad::sum_all(nn::ebranchformer_layer(in.back(), layer, mask, nn::Mode::eval,
                                                   nullptr));
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("verification mode flags non-finite outputs") {
  ad::set_verify_mode(true);
  Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(ad::add(big, big), std::runtime_error);
  ad::set_verify_mode(false);
  Tensor inf = ad::add(big, big);
  CHECK(std::isinf(inf.data()[0]));
}
