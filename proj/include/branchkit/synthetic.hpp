#pragma once

#include <random>

#include "branchkit/nn.hpp"

namespace branchkit::harness {

// Desk-scale labeled-sequence task: every vocabulary token has a fixed
// Gaussian template vector; an utterance emits each label token as a run of
// noisy copies of its template.
struct SyntheticTaskSpec {
  std::int64_t vocab = 10;
  std::int64_t feat_dim = 8;
  std::int64_t min_label_len = 2;
  std::int64_t max_label_len = 8;
  std::int64_t min_frames_per_token = 8;
  std::int64_t max_frames_per_token = 12;
  double noise_std = 0.1;
  double min_template_dist = 1.0;
  std::int64_t train_utts = 300;
  std::int64_t val_utts = 60;
  std::uint64_t template_seed = 7;
  std::uint64_t train_seed = 11;
  std::uint64_t val_seed = 13;

  void validate() const;
};

struct Utterance {
  std::vector<int> labels;
  std::vector<double> feats;  // frames x feat_dim, row-major
  std::int64_t frames = 0;
};

struct Batch {
  ad::Tensor feats;  // [B, maxT, F], zero padded
  std::vector<std::int64_t> lengths;
  std::vector<std::vector<int>> labels;
};

class SyntheticTask {
 public:
  explicit SyntheticTask(const SyntheticTaskSpec& spec);

  const SyntheticTaskSpec& spec() const { return spec_; }
  const std::vector<std::vector<double>>& templates() const { return templates_; }

  Utterance sample_utterance(std::mt19937_64& rng) const;
  std::vector<Utterance> generate(std::int64_t count, std::uint64_t seed) const;

  static Batch assemble(const std::vector<const Utterance*>& utts, std::int64_t feat_dim);

 private:
  SyntheticTaskSpec spec_;
  std::vector<std::vector<double>> templates_;  // vocab entries of feat_dim
};

// One freshly sampled batch of `count` utterances, padded to the longest.
Batch gen_synthetic_batch(const SyntheticTaskSpec& spec, std::mt19937_64& rng, std::int64_t count);

}  // namespace branchkit::harness
