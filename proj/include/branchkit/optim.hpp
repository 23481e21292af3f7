#pragma once

#include "branchkit/nn.hpp"

namespace branchkit::harness {

// lr(s) = peak_lr * min(s/w, sqrt(w/s)): linear ramp to the peak at step w,
// inverse-sqrt decay afterwards.
struct WarmupSchedule {
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 1000;

  double lr_at(std::int64_t step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.0;  // decoupled; off by default
};

class Adam {
 public:
  explicit Adam(nn::ParamMap params, AdamConfig cfg = {});

  // Bias-corrected update from the gradients currently accumulated on the
  // parameters; missing gradients count as zero.
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return t_; }
  const nn::ParamMap& params() const { return params_; }

 private:
  nn::ParamMap params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

double grad_global_norm(const nn::ParamMap& params);

// Scales all gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_grad_norm(nn::ParamMap& params, double max_norm);

}  // namespace branchkit::harness
