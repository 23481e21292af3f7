#include <cmath>
#include <random>

#include "branchkit/gradcheck.hpp"
#include "branchkit/nn.hpp"
#include "branchkit/serialize.hpp"
#include "branchkit/verify.hpp"
#include "doctest.h"

using namespace branchkit;
using ad::Tensor;
using nn::Mode;
using nn::SeqMask;

TEST_CASE("linear") {
  nn::LinearParams p;
  p.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::from_data({1, 2}, {1, 0});
  CHECK(nn::linear(x, p).data() == std::vector<double>{1, 0});

  p.weight = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  p.bias = Tensor::from_data({2}, {1, 1});
  CHECK(nn::linear(Tensor::from_data({1, 2}, {1, 1}), p).data() == std::vector<double>{5, 7});

  CHECK_THROWS_AS(nn::linear(Tensor::zeros({1, 3}), p), std::invalid_argument);

  std::mt19937_64 rng(2);
  nn::LinearParams q = nn::LinearParams::init(3, 5, true, rng);
  Tensor in = Tensor::zeros({2, 4, 3});
  std::normal_distribution<double> dist;
  for (auto& v : in.data()) v = dist(rng);
  const double err = ad::grad_check(
      [&q](const std::vector<Tensor>& t) { return ad::sum_all(nn::linear(t[0], q)); },
      {in, q.weight, q.bias});
  CHECK(err < 1e-6);
}

TEST_CASE("activations") {
  CHECK(nn::swish(Tensor::scalar(0.0)).item() == 0.0);
  const double sig1 = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(nn::swish(Tensor::scalar(1.0)).item() == doctest::Approx(sig1).epsilon(1e-12));
  std::mt19937_64 rng(4);
  std::normal_distribution<double> dist;
  for (int i = 0; i < 20; ++i) {
    const double x = dist(rng);
    const double sx = 1.0 / (1.0 + std::exp(-x));
    CHECK(nn::swish(Tensor::scalar(x)).item() == doctest::Approx(x * sx).epsilon(1e-12));
  }

  CHECK(nn::gelu(Tensor::scalar(0.0)).item() == 0.0);
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  CHECK(nn::gelu(Tensor::scalar(1.0)).item() == doctest::Approx(phi1).epsilon(1e-12));
  CHECK(nn::gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.841345).epsilon(1e-5));
  const double phim1 = 0.5 * (1.0 + std::erf(-1.0 / std::sqrt(2.0)));
  CHECK(nn::gelu(Tensor::scalar(-1.0)).item() == doctest::Approx(-phim1).epsilon(1e-12));
  CHECK(nn::gelu(Tensor::scalar(-1.0)).item() == doctest::Approx(-0.158655).epsilon(1e-4));
}

TEST_CASE("glu") {
  Tensor x = Tensor::from_data({1, 2}, {3.0, 0.0});
  CHECK(nn::glu(x).item() == doctest::Approx(1.5).epsilon(1e-12));
  Tensor big = Tensor::from_data({1, 2}, {2.0, 40.0});
  CHECK(nn::glu(big).item() == doctest::Approx(2.0).epsilon(1e-9));
  CHECK_THROWS_AS(nn::glu(Tensor::zeros({2, 3})), std::invalid_argument);

  std::mt19937_64 rng(6);
  std::normal_distribution<double> dist;
  Tensor in = Tensor::zeros({3, 8});
  for (auto& v : in.data()) v = dist(rng);
  const double err = ad::grad_check(
      [](const std::vector<Tensor>& t) { return ad::sum_all(nn::glu(t[0])); }, {in});
  CHECK(err < 1e-6);
}

TEST_CASE("layer_norm") {
  nn::LayerNormParams p = nn::LayerNormParams::init(3);
  Tensor constant = Tensor::full({1, 3}, 4.2);
  const Tensor ln_const = nn::layer_norm(constant, p);
  for (double v : ln_const.data()) CHECK(std::abs(v) < 1e-5);

  nn::LayerNormParams p2 = nn::LayerNormParams::init(2);
  Tensor x = Tensor::from_data({1, 2}, {1, -1});
  Tensor y = nn::layer_norm(x, p2);
  CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(y.data()[1] == doctest::Approx(-1.0).epsilon(1e-9));

  nn::LayerNormParams p3 = nn::LayerNormParams::init(2);
  std::fill(p3.gain.data().begin(), p3.gain.data().end(), 0.0);
  p3.shift = Tensor::from_data({2}, {7.0, -3.0});
  Tensor shifted = nn::layer_norm(Tensor::from_data({2, 2}, {1, 2, 3, 4}), p3);
  CHECK(shifted.data() == std::vector<double>{7, -3, 7, -3});
}

TEST_CASE("batch_norm") {
  nn::BatchNormParams p = nn::BatchNormParams::init(3);
  SeqMask mask = SeqMask::full(2, 4);
  Tensor x = Tensor::zeros({2, 4, 3});
  std::mt19937_64 rng(8);
  std::normal_distribution<double> dist;
  for (auto& v : x.data()) v = dist(rng);
  // eval with running stats (0,1) and unit affine is the identity up to eps
  Tensor y = nn::batch_norm(x, p, Mode::eval, mask);
  for (std::size_t i = 0; i < x.data().size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
  }

  // a single valid frame normalizes itself to zero
  nn::BatchNormParams p1 = nn::BatchNormParams::init(2);
  SeqMask one = SeqMask::from_lengths({1}, 3);
  Tensor xx = Tensor::from_data({1, 3, 2}, {5, -2, 9, 9, 9, 9});
  Tensor yy = nn::batch_norm(xx, p1, Mode::train, one);
  CHECK(std::abs(yy.data()[0]) < 1e-3);
  CHECK(std::abs(yy.data()[1]) < 1e-3);

  // zero valid frames is a defined error
  nn::BatchNormParams p2 = nn::BatchNormParams::init(2);
  SeqMask none = SeqMask::from_lengths({0}, 2);
  CHECK_THROWS_AS(nn::batch_norm(Tensor::zeros({1, 2, 2}), p2, Mode::train, none),
                  std::invalid_argument);

  // padded frames never enter the statistics
  nn::BatchNormParams pa = nn::BatchNormParams::init(2);
  nn::BatchNormParams pb = nn::BatchNormParams::init(2);
  SeqMask partial = SeqMask::from_lengths({2}, 4);
  Tensor clean = Tensor::from_data({1, 4, 2}, {1, 2, 3, 4, 0, 0, 0, 0});
  Tensor dirty = Tensor::from_data({1, 4, 2}, {1, 2, 3, 4, 999, -777, 123, 5e6});
  Tensor ya = nn::batch_norm(clean, pa, Mode::train, partial);
  Tensor yb = nn::batch_norm(dirty, pb, Mode::train, partial);
  for (std::int64_t i = 0; i < 4; ++i) {  // valid frames only
    CHECK(ya.data()[static_cast<std::size_t>(i)] ==
          doctest::Approx(yb.data()[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
  CHECK(pa.running_mean.data() == pb.running_mean.data());
  CHECK(pa.running_var.data() == pb.running_var.data());
}

TEST_CASE("depthwise_conv1d") {
  const std::int64_t channels = 2;
  nn::DepthwiseConvParams delta;
  delta.kernel = Tensor::from_data({channels, 3}, {0, 1, 0, 0, 1, 0});
  delta.bias = Tensor::zeros({channels});
  SeqMask mask = SeqMask::full(1, 5);
  Tensor x = Tensor::zeros({1, 5, channels});
  std::mt19937_64 rng(10);
  std::normal_distribution<double> dist;
  for (auto& v : x.data()) v = dist(rng);
  CHECK(nn::depthwise_conv1d(x, delta, mask).data() == x.data());

  nn::DepthwiseConvParams box;
  box.kernel = Tensor::full({1, 3}, 1.0);
  box.bias = Tensor::zeros({1});
  Tensor impulse = Tensor::zeros({1, 5, 1});
  impulse.data()[2] = 1.0;
  Tensor spread = nn::depthwise_conv1d(impulse, box, SeqMask::full(1, 5));
  CHECK(spread.data() == std::vector<double>{0, 1, 1, 1, 0});

  nn::DepthwiseConvParams bad;
  bad.kernel = Tensor::zeros({1, 4});
  bad.bias = Tensor::zeros({1});
  CHECK_THROWS_AS(nn::depthwise_conv1d(impulse, bad, SeqMask::full(1, 5)), std::invalid_argument);
}

TEST_CASE("pointwise_conv is linear, bit for bit") {
  std::mt19937_64 rng(12);
  nn::LinearParams p = nn::LinearParams::init(4, 6, true, rng);
  Tensor x = Tensor::zeros({2, 5, 4});
  std::normal_distribution<double> dist;
  for (auto& v : x.data()) v = dist(rng);
  CHECK(nn::pointwise_conv(x, p).data() == nn::linear(x, p).data());
}

TEST_CASE("dropout") {
  Tensor x = Tensor::from_data({4}, {1, 2, 3, 4});
  std::mt19937_64 rng(14);
  CHECK(nn::dropout(x, 0.0, Mode::train, &rng).data() == x.data());
  CHECK(nn::dropout(x, 0.9, Mode::eval, nullptr).data() == x.data());
  CHECK_THROWS_AS(nn::dropout(x, 1.0, Mode::train, &rng), std::invalid_argument);
  CHECK_THROWS_AS(nn::dropout(x, -0.1, Mode::train, &rng), std::invalid_argument);
}

TEST_CASE("conv2d_subsample") {
  CHECK(nn::subsampled_extent(1000) == 249);
  CHECK(nn::subsampled_extent(7) == 1);
  CHECK_THROWS_AS(nn::subsampled_extent(6), std::invalid_argument);

  // frequency recurrence: 80 mel bins -> 19
  CHECK(nn::subsampled_extent(80) == 19);

  std::mt19937_64 rng(16);
  nn::SubsamplingParams p = nn::SubsamplingParams::init(8, 4, rng);
  Tensor feats = Tensor::zeros({2, 11, 8});
  std::normal_distribution<double> dist;
  for (auto& v : feats.data()) v = dist(rng);
  auto [out, lengths] = nn::conv2d_subsample(feats, {11, 9}, p);
  CHECK(out.shape() == ad::Shape{2, 2, 4});
  CHECK(lengths == std::vector<std::int64_t>{2, 1});

  // monotone length mapping
  std::int64_t prev = 1;
  for (std::int64_t t = 7; t <= 64; ++t) {
    const std::int64_t cur = nn::subsampled_extent(t);
    CHECK(cur >= prev);
    prev = cur;
  }

  CHECK_THROWS_AS(nn::conv2d_subsample(feats, {11, 5}, p), std::invalid_argument);
}

TEST_CASE("primitive invariants and mask hygiene") {
  auto inv = verify::check_primitive_invariants();
  CHECK_MESSAGE(inv.pass, inv.detail);
  auto hyg = verify::check_mask_hygiene();
  CHECK_MESSAGE(hyg.pass, hyg.detail);
}

TEST_CASE("checkpoint round trip") {
  std::mt19937_64 rng(18);
  nn::LinearParams p = nn::LinearParams::init(3, 4, true, rng);
  nn::ParamMap params;
  p.collect("layer", params);
  const auto dir = std::filesystem::temp_directory_path() / "branchkit_ckpt_test";
  std::filesystem::remove_all(dir);
  nn::save_checkpoint(params, dir);

  nn::LinearParams q = nn::LinearParams::init(3, 4, true, rng);
  nn::ParamMap loaded;
  q.collect("layer", loaded);
  nn::load_checkpoint(loaded, dir);
  CHECK(q.weight.data() == p.weight.data());
  CHECK(q.bias.data() == p.bias.data());

  // mismatched names and shapes are rejected
  nn::LinearParams other = nn::LinearParams::init(3, 4, true, rng);
  nn::ParamMap renamed;
  other.collect("different", renamed);
  CHECK_THROWS_AS(nn::load_checkpoint(renamed, dir), std::runtime_error);

  nn::LinearParams wrong = nn::LinearParams::init(4, 4, true, rng);
  nn::ParamMap misshaped;
  wrong.collect("layer", misshaped);
  CHECK_THROWS_AS(nn::load_checkpoint(misshaped, dir), std::runtime_error);
  std::filesystem::remove_all(dir);
}
