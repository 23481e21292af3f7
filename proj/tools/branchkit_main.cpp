#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "branchkit/profiler.hpp"
#include "branchkit/stability.hpp"
#include "branchkit/trainer.hpp"
#include "branchkit/verify.hpp"

namespace {

int env_threads() {
  const char* v = std::getenv("BRANCHKIT_THREADS");
  if (v == nullptr) return 1;
  const int n = std::atoi(v);
  return n > 0 ? n : 1;
}

int print_checks(const std::vector<branchkit::verify::CheckResult>& results) {
  bool all_pass = true;
  for (const auto& r : results) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
    all_pass = all_pass && r.pass;
  }
  std::cout << (all_pass ? "verification passed" : "verification FAILED") << "\n";
  return all_pass ? 0 : 2;
}

std::vector<std::string> load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open vocab file " + path);
  std::vector<std::string> symbols;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    symbols.push_back(line);
  }
  return symbols;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"branchkit: a Conformer / E-Branchformer encoder laboratory with CTC training"};
  app.require_subcommand(1);

  // profile
  auto* profile = app.add_subcommand("profile", "parameter and MAC accounting for a model config");
  std::string preset = "medium-ebranchformer";
  double seconds = 10.0;
  std::int64_t frame_rate = 100;
  std::int64_t vocab = 500;
  std::int64_t feat_dim = 80;
  std::string format = "text";
  profile->add_option("--preset", preset,
                      "medium-conformer-deep | medium-conformer-wide | medium-ebranchformer | "
                      "large-ebranchformer");
  profile->add_option("--seconds", seconds, "audio duration");
  profile->add_option("--frame-rate", frame_rate, "feature frames per second");
  profile->add_option("--vocab", vocab, "vocabulary size for the CTC head");
  profile->add_option("--feat-dim", feat_dim, "mel feature bins");
  profile->add_option("--format", format)->check(CLI::IsMember({"text", "json"}));

  // train
  auto* train_cmd = app.add_subcommand("train", "train one run on the synthetic CTC task");
  std::string config_path;
  std::string out_dir = "runs/run";
  train_cmd->add_option("--config", config_path, "TOML config file")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();

  // stability
  auto* stab = app.add_subcommand("stability", "seed sweep over architectures and peak lrs");
  std::string stab_config;
  std::string stab_out = "runs/stability";
  int n_seeds = 5;
  std::vector<double> lrs{1e-3, 10.0};
  std::vector<std::string> archs{"conformer", "e_branchformer"};
  stab->add_option("--config", stab_config, "base TOML config file")->required();
  stab->add_option("--out", stab_out, "output directory")->required();
  stab->add_option("--seeds", n_seeds, "seeds per cell (>= 2)");
  stab->add_option("--lrs", lrs, "peak learning rates")->delimiter(',');
  stab->add_option("--archs", archs, "architectures")->delimiter(',');

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  int gc_seeds = 10;
  gc->add_option("--seeds", gc_seeds, "random seeds per case");

  // decode
  auto* dec = app.add_subcommand("decode", "greedy-decode a synthetic split with a trained run");
  std::string run_dir;
  std::string split = "val";
  std::int64_t num_utts = 20;
  std::string vocab_file;
  bool show_ter = false;
  dec->add_option("--run", run_dir, "run directory written by train")->required();
  dec->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  dec->add_option("--num", num_utts, "utterances to decode");
  dec->add_option("--vocab-file", vocab_file, "optional symbol table, one symbol per line");
  dec->add_flag("--show-ter", show_ter, "print token error rate to stderr");

  // verify
  app.add_subcommand("verify", "run the full invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (profile->parsed()) {
      branchkit::nn::EncoderConfig cfg = branchkit::nn::EncoderConfig::preset(preset);
      cfg.feat_dim = feat_dim;
      const auto report =
          branchkit::prof::profile_report(cfg, preset, seconds, frame_rate, vocab);
      std::cout << (format == "json" ? report.to_json() + "\n" : report.to_text());
      return 0;
    }
    if (train_cmd->parsed()) {
      const auto cfg = branchkit::harness::TrainConfig::from_file(config_path);
      const auto rec = branchkit::harness::train(cfg, out_dir);
      std::cout << "run " << rec.run_id << (rec.diverged ? " DIVERGED" : " finished") << " in "
                << rec.wall_time_sec << " s";
      if (!rec.epochs.empty()) {
        std::cout << ", final val loss " << rec.epochs.back().val_loss << ", TER "
                  << rec.epochs.back().val_ter;
      }
      std::cout << "\noutputs in " << out_dir << "\n";
      return 0;
    }
    if (stab->parsed()) {
      const auto cfg = branchkit::harness::TrainConfig::from_file(stab_config);
      const auto summary = branchkit::harness::stability_experiment(cfg, archs, lrs, n_seeds,
                                                                    stab_out, env_threads());
      std::cout << summary.table();
      std::cout << "summary written to " << (std::filesystem::path(stab_out) / "summary.csv")
                << "\n";
      return 0;
    }
    if (gc->parsed()) {
      return print_checks({branchkit::verify::check_composite_gradients(gc_seeds),
                           branchkit::verify::check_gradient_suite(gc_seeds)});
    }
    if (dec->parsed()) {
      auto [hyps, refs] = branchkit::harness::decode_run(run_dir, split, num_utts);
      std::vector<std::string> symbols;
      if (!vocab_file.empty()) symbols = load_vocab(vocab_file);
      for (const auto& hyp : hyps) {
        for (std::size_t i = 0; i < hyp.size(); ++i) {
          if (i) std::cout << ' ';
          const auto id = static_cast<std::size_t>(hyp[i]);
          if (!symbols.empty() && id >= 1 && id <= symbols.size()) {
            std::cout << symbols[id - 1];
          } else {
            std::cout << hyp[i];
          }
        }
        std::cout << "\n";
      }
      if (show_ter) {
        std::cerr << "ter " << branchkit::harness::token_error_rate(hyps, refs) << "\n";
      }
      return 0;
    }
    // verify
    return print_checks(branchkit::verify::run_all());
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
