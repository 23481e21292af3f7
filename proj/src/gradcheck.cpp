#include "branchkit/gradcheck.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace branchkit::ad {

double rel_err(double a, double b) {
  const double aa = std::abs(a), ab = std::abs(b);
  if (aa < 1e-12 && ab < 1e-12) return 0.0;
  return std::abs(a - b) / std::max({aa, ab, 1e-8});
}

namespace {

// Fixed signed weights keep the projection sensitive to every output
// coordinate without letting sum cancellation hide sign errors.
std::vector<double> projection_weights(std::int64_t n) {
  std::mt19937_64 rng(0x5eedb1a5u);
  std::uniform_real_distribution<double> mag(0.25, 1.0);
  std::vector<double> w(static_cast<std::size_t>(n));
  for (auto& v : w) v = (rng() & 1 ? 1.0 : -1.0) * mag(rng);
  return w;
}

double project(const Tensor& y, const std::vector<double>& w) {
  const auto& v = y.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += w[i] * v[i];
  return acc;
}

}  // namespace

double grad_check(const TensorFn& f, std::vector<Tensor> inputs, double eps) {
  if (Tape::active() != nullptr) {
    throw std::runtime_error("grad_check: must not run under an active tape");
  }
  Tensor probe = f(inputs);
  Tensor probe2 = f(inputs);
  if (probe.data() != probe2.data()) {
    throw std::runtime_error("grad_check: non-deterministic function (double evaluation mismatch)");
  }
  const auto w = projection_weights(probe.numel());

  // Analytic pass.
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape tape;
  std::vector<std::vector<double>> analytic;
  {
    Tape::Scope scope(tape);
    Tensor y = f(inputs);
    Tensor wt = Tensor::from_data(y.shape(), std::vector<double>(w));
    Tensor loss = sum_all(mul(y, wt));
    // A loss disconnected from every input (constant f) has all-zero grads.
    if (loss.requires_grad()) tape.backward(loss);
  }
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    analytic.push_back(t.has_grad() ? t.grad()
                                    : std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0));
    t.set_requires_grad(false);
    t.zero_grad();
  }

  // Numeric pass. The denominator floor is wider than rel_err's general one:
  // central differences on a loss of magnitude L resolve a gradient only to
  // about L * 2^-52 / eps in absolute terms, so coordinates below that would
  // otherwise report pure cancellation noise. A floor of 1e-5 at the 1e-4
  // acceptance threshold equals an absolute tolerance of 1e-9.
  const double floor = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& data = inputs[k].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = project(f(inputs), w);
      data[i] = orig - eps;
      const double down = project(f(inputs), w);
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = std::abs(analytic[k][i]), b = std::abs(numeric);
      if (a < 1e-12 && b < 1e-12) continue;
      worst = std::max(worst, std::abs(analytic[k][i] - numeric) / std::max({a, b, floor}));
    }
  }
  return worst;
}

}  // namespace branchkit::ad
