#pragma once

#include <stdexcept>

#include "branchkit/nn.hpp"

namespace branchkit::ctc {

using ad::Tensor;

// Label/input length combination admits no alignment.
struct AdmissibilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kBlank = 0;

struct CtcHead {
  nn::LinearParams proj;  // d -> vocab+1, blank at index 0
  std::int64_t vocab = 0;

  static CtcHead init(std::int64_t d, std::int64_t vocab, std::mt19937_64& rng);
  void collect(const std::string& prefix, nn::ParamMap& out) const;
};

Tensor log_softmax_lastaxis(const Tensor& logits);

// Frames needed for an alignment of `labels`: length plus one blank between
// each adjacent repeat.
std::int64_t min_frames_for(const std::vector<int>& labels);

// Negative log-probability of all alignments, averaged over the batch.
// log_probs[B,T,V+1] must be log-softmax normalized per frame; labels hold
// ids in [1..V]. Differentiable through the tape. Throws AdmissibilityError
// when some item cannot be aligned.
Tensor ctc_loss(const Tensor& log_probs, const std::vector<std::vector<int>>& labels,
                const std::vector<std::int64_t>& input_lengths);

// Exhaustive-enumeration oracle for a single instance: sums the probability
// of every frame labeling of log_probs [T,V+1] that collapses to `labels`.
// Bounds: T <= 8, V <= 4.
double ctc_brute_force(const Tensor& log_probs, const std::vector<int>& labels);

// Framewise argmax, collapse repeats, strip blanks.
std::vector<std::vector<int>> ctc_greedy_decode(const Tensor& log_probs,
                                                const std::vector<std::int64_t>& lengths);

}  // namespace branchkit::ctc
