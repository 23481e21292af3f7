#include "branchkit/stability.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace branchkit::harness {

std::string StabilitySummary::to_csv() const {
  std::string out = "arch,peak_lr,seed,diverged,final_val_loss,final_ter\n";
  char line[160];
  for (const auto& r : runs) {
    std::snprintf(line, sizeof(line), "%s,%.17g,%llu,%d,%.17g,%.17g\n", r.arch.c_str(), r.peak_lr,
                  static_cast<unsigned long long>(r.seed), r.diverged ? 1 : 0, r.final_val_loss,
                  r.final_ter);
    out += line;
  }
  return out;
}

int StabilitySummary::divergences(const std::string& arch, double peak_lr) const {
  int n = 0;
  for (const auto& r : runs) {
    if (r.arch == arch && r.peak_lr == peak_lr && r.diverged) ++n;
  }
  return n;
}

std::string StabilitySummary::table() const {
  std::ostringstream os;
  os << "arch              peak_lr    diverged/seeds   mean epoch-1 val loss\n";
  std::vector<std::pair<std::string, double>> cells;
  for (const auto& r : runs) {
    std::pair<std::string, double> cell{r.arch, r.peak_lr};
    bool seen = false;
    for (const auto& c : cells) seen = seen || c == cell;
    if (!seen) cells.push_back(cell);
  }
  for (const auto& [arch, lr] : cells) {
    int total = 0;
    double first_sum = 0.0;
    int first_n = 0;
    for (const auto& r : runs) {
      if (r.arch != arch || r.peak_lr != lr) continue;
      ++total;
      if (std::isfinite(r.first_val_loss)) {
        first_sum += r.first_val_loss;
        ++first_n;
      }
    }
    char line[160];
    if (first_n > 0) {
      std::snprintf(line, sizeof(line), "%-17s %-10.4g %d/%-14d %.4g\n", arch.c_str(), lr,
                    divergences(arch, lr), total, first_sum / first_n);
    } else {
      std::snprintf(line, sizeof(line), "%-17s %-10.4g %d/%-14d -\n", arch.c_str(), lr,
                    divergences(arch, lr), total);
    }
    os << line;
  }
  return os.str();
}

StabilitySummary stability_experiment(const TrainConfig& base, const std::vector<std::string>& archs,
                                      const std::vector<double>& peak_lrs, int n_seeds,
                                      const std::filesystem::path& out_dir, int threads) {
  if (n_seeds < 2) throw std::invalid_argument("stability_experiment: n_seeds must be >= 2");
  if (archs.empty() || peak_lrs.empty()) {
    throw std::invalid_argument("stability_experiment: empty sweep axis");
  }

  struct Job {
    TrainConfig cfg;
    std::filesystem::path dir;
    std::string arch;
  };
  std::vector<Job> jobs;
  for (const auto& arch : archs) {
    for (double lr : peak_lrs) {
      for (int s = 0; s < n_seeds; ++s) {
        TrainConfig cfg = base;
        if (arch == "conformer") {
          cfg.model.kind = nn::LayerKind::conformer;
        } else if (arch == "e_branchformer") {
          cfg.model.kind = nn::LayerKind::e_branchformer;
        } else {
          throw std::invalid_argument("stability_experiment: unknown architecture '" + arch + "'");
        }
        cfg.peak_lr = lr;
        cfg.seed = base.seed + static_cast<std::uint64_t>(s);
        std::ostringstream dir;
        dir << arch << "-lr" << lr << "-seed" << cfg.seed;
        jobs.push_back({cfg, out_dir / dir.str(), arch});
      }
    }
  }

  std::vector<RunRecord> records(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        records[i] = train(jobs[i].cfg, jobs[i].dir);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!errors[i].empty()) {
      throw std::runtime_error("stability run " + jobs[i].dir.string() + " failed: " + errors[i]);
    }
  }

  StabilitySummary summary;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    StabilityRunResult r;
    r.arch = jobs[i].arch;
    r.peak_lr = jobs[i].cfg.peak_lr;
    r.seed = jobs[i].cfg.seed;
    r.diverged = records[i].diverged;
    if (!records[i].epochs.empty()) {
      r.first_val_loss = records[i].epochs.front().val_loss;
      r.final_val_loss = records[i].epochs.back().val_loss;
      r.final_ter = records[i].epochs.back().val_ter;
    } else {
      r.first_val_loss = std::numeric_limits<double>::quiet_NaN();
      r.final_val_loss = std::numeric_limits<double>::quiet_NaN();
      r.final_ter = std::numeric_limits<double>::quiet_NaN();
    }
    summary.runs.push_back(r);
  }
  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "summary.csv", std::ios::trunc) << summary.to_csv();
  return summary;
}

}  // namespace branchkit::harness
