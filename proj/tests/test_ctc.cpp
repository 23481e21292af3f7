#include <cmath>
#include <random>

#include "branchkit/ctc.hpp"
#include "branchkit/gradcheck.hpp"
#include "branchkit/verify.hpp"
#include "doctest.h"

using namespace branchkit;
using ad::Tensor;

namespace {

// uniform per-frame log distribution over V+1 classes
Tensor uniform_log_probs(std::int64_t frames, std::int64_t vocab) {
  return Tensor::full({1, frames, vocab + 1}, -std::log(static_cast<double>(vocab + 1)));
}

}  // namespace

TEST_CASE("ctc_loss closed-form cases") {
  // T=1, V=1, uniform: only path "a", p = 1/2
  CHECK(ctc::ctc_loss(uniform_log_probs(1, 1), {{1}}, {1}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // T=2, V=1, uniform, label [a]: paths (a,-),(-,a),(a,a), p = 3/4
  CHECK(ctc::ctc_loss(uniform_log_probs(2, 1), {{1}}, {2}).item() ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(-std::log(0.75) == doctest::Approx(0.287682).epsilon(1e-5));

  // T=2, uniform, empty label: only (-,-), p = 1/4
  CHECK(ctc::ctc_loss(uniform_log_probs(2, 1), {{}}, {2}).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(std::log(4.0) == doctest::Approx(1.386294).epsilon(1e-5));
}

TEST_CASE("ctc_brute_force") {
  Tensor lp = uniform_log_probs(2, 1);
  Tensor single = ad::reshape(lp, {2, 2});
  CHECK(ctc::ctc_brute_force(single, {1}) == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(std::abs(ctc::ctc_brute_force(single, {1}) - ctc::ctc_loss(lp, {{1}}, {2}).item()) <
        1e-12);

  // label longer than T: admissibility error
  CHECK_THROWS_AS(ctc::ctc_brute_force(single, {1, 1, 1}), ctc::AdmissibilityError);

  // single frame, arbitrary distribution: loss = -log p(a)
  std::mt19937_64 rng(3);
  std::normal_distribution<double> dist;
  Tensor logits = Tensor::zeros({1, 1, 4});
  for (auto& v : logits.data()) v = dist(rng);
  Tensor norm = ctc::log_softmax_lastaxis(logits);
  const double expect = -norm.data()[2];
  CHECK(ctc::ctc_brute_force(ad::reshape(norm, {1, 4}), {2}) ==
        doctest::Approx(expect).epsilon(1e-12));

  // enumeration bounds are enforced
  CHECK_THROWS_AS(ctc::ctc_brute_force(Tensor::zeros({9, 2}), {1}), std::invalid_argument);
  CHECK_THROWS_AS(ctc::ctc_brute_force(Tensor::zeros({4, 6}), {1}), std::invalid_argument);
}

TEST_CASE("ctc admissibility") {
  // repeated label needs a separating blank: [a,a] needs 3 frames
  CHECK(ctc::min_frames_for({1, 1}) == 3);
  CHECK(ctc::min_frames_for({1, 2}) == 2);
  CHECK(ctc::min_frames_for({}) == 0);
  CHECK_THROWS_AS(ctc::ctc_loss(uniform_log_probs(2, 2), {{1, 1}}, {2}), ctc::AdmissibilityError);
  CHECK_NOTHROW(ctc::ctc_loss(uniform_log_probs(3, 2), {{1, 1}}, {3}));

  // out-of-range label ids are rejected
  CHECK_THROWS_AS(ctc::ctc_loss(uniform_log_probs(3, 2), {{3}}, {3}), std::invalid_argument);
  CHECK_THROWS_AS(ctc::ctc_loss(uniform_log_probs(3, 2), {{0}}, {3}), std::invalid_argument);
}

TEST_CASE("ctc gradient through the recursion") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist;
  Tensor logits = Tensor::zeros({2, 5, 4});
  for (auto& v : logits.data()) v = dist(rng);
  const std::vector<std::vector<int>> labels{{1, 2}, {3, 3}};
  const double err = ad::grad_check(
      [&labels](const std::vector<Tensor>& in) {
        return ctc::ctc_loss(ctc::log_softmax_lastaxis(in[0]), labels, {5, 4});
      },
      {logits});
  CHECK(err < 1e-4);
}

TEST_CASE("greedy decode") {
  // framewise argmax [-, a, a, -, b] -> [a, b]
  const double hi = 0.0, lo = -10.0;
  std::vector<double> v;
  auto frame = [&](int cls) {
    for (int c = 0; c < 3; ++c) v.push_back(c == cls ? hi : lo);
  };
  frame(0);
  frame(1);
  frame(1);
  frame(0);
  frame(2);
  Tensor lp = Tensor::from_data({1, 5, 3}, v);
  CHECK(ctc::ctc_greedy_decode(lp, {5}) == std::vector<std::vector<int>>{{1, 2}});

  // all blank decodes to the empty sequence
  CHECK(ctc::ctc_greedy_decode(Tensor::from_data({1, 2, 2}, {0, -5, 0, -5}), {2}) ==
        std::vector<std::vector<int>>{{}});

  // a blank separates a genuine repeat: [a, -, a] -> [a, a]
  v.clear();
  frame(1);
  frame(0);
  frame(1);
  CHECK(ctc::ctc_greedy_decode(Tensor::from_data({1, 3, 3}, v), {3}) ==
        std::vector<std::vector<int>>{{1, 1}});
}

TEST_CASE("ctc equivalence and properties") {
  auto eq = verify::check_ctc_equivalence(60);
  CHECK_MESSAGE(eq.pass, eq.detail);
  auto props = verify::check_ctc_properties();
  CHECK_MESSAGE(props.pass, props.detail);
}
