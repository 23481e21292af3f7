#pragma once

#include "branchkit/trainer.hpp"

namespace branchkit::harness {

struct StabilityRunResult {
  std::string arch;
  double peak_lr = 0.0;
  std::uint64_t seed = 0;
  bool diverged = false;
  double first_val_loss = 0.0;  // validation loss after epoch 1
  double final_val_loss = 0.0;
  double final_ter = 0.0;
};

struct StabilitySummary {
  std::vector<StabilityRunResult> runs;  // ordered by (arch, peak_lr, seed)

  std::string to_csv() const;  // arch,peak_lr,seed,diverged,final_val_loss,final_ter
  int divergences(const std::string& arch, double peak_lr) const;
  std::string table() const;  // per-cell divergence counts and early validation loss
};

// Trains n_seeds runs per (architecture, peak learning rate) cell, each in
// its own subdirectory of out_dir, and writes summary.csv. Individual
// diverged runs are recorded, never fatal. `threads` caps run-level
// parallelism; run results are aggregated in deterministic order.
StabilitySummary stability_experiment(const TrainConfig& base, const std::vector<std::string>& archs,
                                      const std::vector<double>& peak_lrs, int n_seeds,
                                      const std::filesystem::path& out_dir, int threads);

}  // namespace branchkit::harness
