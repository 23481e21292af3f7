#include <cmath>
#include <random>

#include "branchkit/attention.hpp"
#include "branchkit/verify.hpp"
#include "doctest.h"

using namespace branchkit;
using ad::Tensor;
using nn::SeqMask;

TEST_CASE("sinusoidal relative embeddings") {
  const std::int64_t frames = 5, d = 8;
  Tensor emb = nn::sinusoidal_rel_embeddings(frames, d);
  CHECK(emb.shape() == ad::Shape{2 * frames - 1, d});

  // the offset-0 row sits in the middle: sin components 0, cos components 1
  for (std::int64_t j = 0; j < d; ++j) {
    const double v = emb.at({frames - 1, j});
    if (j % 2 == 0) {
      CHECK(v == 0.0);
    } else {
      CHECK(v == 1.0);
    }
  }
  CHECK(nn::sinusoidal_rel_embeddings(1, d).shape() == ad::Shape{1, d});
}

TEST_CASE("rel_shift") {
  // T=2: per-query rows [a_{-1}, a_0, a_{+1}]; out[i,j] = in[i, (T-1)+(j-i)]
  Tensor scores = Tensor::from_data({1, 1, 2, 3}, {10, 11, 12, 20, 21, 22});
  Tensor shifted = nn::rel_shift(scores);
  CHECK(shifted.shape() == ad::Shape{1, 1, 2, 2});
  // query 0 takes columns (1,2); query 1 takes columns (0,1)
  CHECK(shifted.data() == std::vector<double>{11, 12, 20, 21});

  Tensor one = Tensor::from_data({1, 1, 1, 1}, {5});
  CHECK(nn::rel_shift(one).data() == std::vector<double>{5});

  // diagonal invariance: out[i,i] = in[i, T-1]
  std::mt19937_64 rng(1);
  std::normal_distribution<double> dist;
  Tensor big = Tensor::zeros({1, 2, 4, 7});
  for (auto& v : big.data()) v = dist(rng);
  Tensor out = nn::rel_shift(big);
  for (std::int64_t h = 0; h < 2; ++h) {
    for (std::int64_t i = 0; i < 4; ++i) {
      CHECK(out.at({0, h, i, i}) == big.at({0, h, i, 3}));
    }
  }

  CHECK_THROWS_AS(nn::rel_shift(Tensor::zeros({1, 1, 3, 4})), std::invalid_argument);
}

TEST_CASE("mha degenerate cases") {
  std::mt19937_64 rng(2);
  const std::int64_t d = 6;
  nn::RelPosMHAParams p = nn::RelPosMHAParams::init(d, 2, 0.0, rng);

  // single key: the attention weight is 1 and the output is W_out of the
  // value projection of that frame
  Tensor x = Tensor::zeros({1, 1, d});
  std::normal_distribution<double> dist;
  for (auto& v : x.data()) v = dist(rng);
  SeqMask mask = SeqMask::full(1, 1);
  Tensor attn;
  Tensor y = nn::mha_forward(x, p, mask, nn::Mode::eval, nullptr, &attn);
  for (double w : attn.data()) CHECK(w == 1.0);
  Tensor expected = nn::linear(nn::linear(x, p.wv), p.wout);
  for (std::size_t i = 0; i < y.data().size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-12));
  }

  // zero output projection kills the output regardless of input
  nn::RelPosMHAParams zp = nn::RelPosMHAParams::init(d, 2, 0.0, rng);
  std::fill(zp.wout.weight.data().begin(), zp.wout.weight.data().end(), 0.0);
  std::fill(zp.wout.bias.data().begin(), zp.wout.bias.data().end(), 0.0);
  Tensor x2 = Tensor::zeros({2, 3, d});
  for (auto& v : x2.data()) v = dist(rng);
  Tensor y2 = nn::mha_forward(x2, zp, SeqMask::full(2, 3), nn::Mode::eval, nullptr);
  for (double v : y2.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(nn::RelPosMHAParams::init(7, 2, 0.0, rng), std::invalid_argument);
}

TEST_CASE("attention invariants and oracles") {
  auto r = verify::check_attention_invariants();
  CHECK_MESSAGE(r.pass, r.detail);
}
