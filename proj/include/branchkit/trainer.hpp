#pragma once

#include <filesystem>

#include "branchkit/config.hpp"
#include "branchkit/ctc.hpp"
#include "branchkit/encoder.hpp"
#include "branchkit/synthetic.hpp"

namespace branchkit::harness {

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double val_loss = 0.0;
  double val_ter = 0.0;
};

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double initial_val_loss = 0.0;
  double initial_val_ter = 0.0;
  bool diverged = false;
  double wall_time_sec = 0.0;

  std::string to_json() const;
  std::string metrics_csv() const;  // step,lr,loss
};

struct Model {
  nn::EncoderParams encoder;
  ctc::CtcHead head;

  static Model init(const nn::EncoderConfig& cfg, std::int64_t vocab, std::uint64_t seed);
  nn::ParamMap named_params();
};

// Encoder + CTC head forward to per-frame log-probabilities [B,T',V+1];
// subsampled lengths are written to out_lengths.
ad::Tensor model_log_probs(Model& m, const ad::Tensor& feats,
                           const std::vector<std::int64_t>& lengths, nn::Mode mode,
                           std::mt19937_64* rng, std::vector<std::int64_t>* out_lengths);

double token_error_rate(const std::vector<std::vector<int>>& hyp,
                        const std::vector<std::vector<int>>& ref);

// Runs the full CTC training loop and persists run.json, metrics.csv, the
// resolved config and the best checkpoint under out_dir. A run that diverges
// (non-finite loss, or validation loss above 10x its initial value) stops
// gracefully with diverged=true.
RunRecord train(const TrainConfig& cfg, const std::filesystem::path& out_dir);

// Greedy decode of a freshly sampled synthetic split using the checkpoint in
// a directory written by train(). Returns (hypotheses, references).
std::pair<std::vector<std::vector<int>>, std::vector<std::vector<int>>> decode_run(
    const std::filesystem::path& run_dir, const std::string& split, std::int64_t count);

}  // namespace branchkit::harness
