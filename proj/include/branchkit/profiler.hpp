#pragma once

#include <string>

#include "branchkit/encoder.hpp"

namespace branchkit::prof {

struct ProfileAssumptions {
  double seconds = 0.0;
  std::int64_t frame_rate = 100;
  std::int64_t frames = 0;
  std::int64_t subsampled_frames = 0;
  std::int64_t feat_dim = 80;
  std::int64_t vocab = 500;
  std::string conventions;
};

struct ModuleCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

struct ProfileReport {
  std::string model;
  ProfileAssumptions assumptions;
  std::vector<ModuleCost> modules;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;

  std::string to_text() const;
  std::string to_json() const;
};

// Exact analytic parameter count for subsampling frontend + encoder + CTC
// head (pure-CTC scope).
std::int64_t count_params(const nn::EncoderConfig& cfg, std::int64_t vocab);

// Instantiates the model and sums tensor sizes; must agree with count_params
// exactly.
std::int64_t count_params_enumerated(const nn::EncoderConfig& cfg, std::int64_t vocab);

// Analytic multiply-accumulate count of frontend + encoder for an input of
// `frames` feature frames. Matmuls and convolutions only; activations, norms
// and softmax are excluded. The CTC head is outside the MAC scope.
std::int64_t count_macs(const nn::EncoderConfig& cfg, std::int64_t frames);

// Instrumented forward pass counting every matmul/conv multiply; must equal
// count_macs exactly.
std::int64_t mac_oracle(const nn::EncoderConfig& cfg, std::int64_t frames);

ProfileReport profile_report(const nn::EncoderConfig& cfg, const std::string& model_name,
                             double seconds, std::int64_t frame_rate, std::int64_t vocab);

}  // namespace branchkit::prof
