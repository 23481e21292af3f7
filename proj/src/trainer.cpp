#include "branchkit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "branchkit/optim.hpp"
#include "branchkit/serialize.hpp"
#include "json.hpp"

namespace branchkit::harness {

std::string RunRecord::to_json() const {
  nlohmann::json j;
  j["run_id"] = run_id;
  j["seed"] = seed;
  j["config_digest"] = config_digest;
  j["initial_val_loss"] = initial_val_loss;
  j["initial_val_ter"] = initial_val_ter;
  j["diverged"] = diverged;
  j["wall_time_sec"] = wall_time_sec;
  j["steps"] = nlohmann::json::array();
  for (const auto& s : steps) {
    j["steps"].push_back({{"step", s.step}, {"lr", s.lr}, {"loss", s.loss}});
  }
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) {
    j["epochs"].push_back({{"epoch", e.epoch}, {"val_loss", e.val_loss}, {"val_ter", e.val_ter}});
  }
  return j.dump(2);
}

std::string RunRecord::metrics_csv() const {
  std::string out = "step,lr,loss\n";
  char line[96];
  for (const auto& s : steps) {
    std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g\n", static_cast<long long>(s.step), s.lr,
                  s.loss);
    out += line;
  }
  return out;
}

Model Model::init(const nn::EncoderConfig& cfg, std::int64_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model m{nn::EncoderParams::init(cfg, rng), ctc::CtcHead::init(cfg.d, vocab, rng)};
  return m;
}

nn::ParamMap Model::named_params() {
  nn::ParamMap params;
  encoder.collect("encoder", params);
  head.collect("ctc_head", params);
  return params;
}

ad::Tensor model_log_probs(Model& m, const ad::Tensor& feats,
                           const std::vector<std::int64_t>& lengths, nn::Mode mode,
                           std::mt19937_64* rng, std::vector<std::int64_t>* out_lengths) {
  auto [enc, enc_lengths] = nn::encoder_forward(feats, lengths, m.encoder, mode, rng);
  if (out_lengths != nullptr) *out_lengths = enc_lengths;
  return ctc::log_softmax_lastaxis(nn::linear(enc, m.head.proj));
}

namespace {

std::int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::int64_t> row(m + 1);
  std::iota(row.begin(), row.end(), 0);
  for (std::size_t i = 1; i <= n; ++i) {
    std::int64_t diag = row[0];
    row[0] = static_cast<std::int64_t>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const std::int64_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1,
                         diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[m];
}

// Deterministic length-sorted packing with a cap on padded batch area.
std::vector<std::vector<std::size_t>> pack_batches(const std::vector<Utterance>& utts,
                                                   std::int64_t batch_frames) {
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return utts[a].frames > utts[b].frames;
  });
  std::vector<std::vector<std::size_t>> batches;
  std::size_t i = 0;
  while (i < order.size()) {
    const std::int64_t max_len = utts[order[i]].frames;
    std::size_t count = 1;
    while (i + count < order.size() &&
           static_cast<std::int64_t>(count + 1) * max_len <= batch_frames) {
      ++count;
    }
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(i + count));
    i += count;
  }
  return batches;
}

Batch make_batch(const std::vector<Utterance>& utts, const std::vector<std::size_t>& idx,
                 std::int64_t feat_dim) {
  std::vector<const Utterance*> ptrs;
  ptrs.reserve(idx.size());
  for (auto i : idx) ptrs.push_back(&utts[i]);
  return SyntheticTask::assemble(ptrs, feat_dim);
}

struct EvalResult {
  double loss = 0.0;
  double ter = 0.0;
};

EvalResult evaluate(Model& model, const std::vector<Utterance>& utts, std::int64_t batch_frames,
                    std::int64_t feat_dim) {
  double loss_sum = 0.0;
  std::int64_t items = 0;
  std::int64_t errors = 0, ref_tokens = 0;
  for (const auto& idx : pack_batches(utts, batch_frames)) {
    Batch batch = make_batch(utts, idx, feat_dim);
    std::vector<std::int64_t> enc_lengths;
    ad::Tensor lp = model_log_probs(model, batch.feats, batch.lengths, nn::Mode::eval, nullptr,
                                    &enc_lengths);
    const double loss = ctc::ctc_loss(lp, batch.labels, enc_lengths).item();
    loss_sum += loss * static_cast<double>(idx.size());
    items += static_cast<std::int64_t>(idx.size());
    const auto hyps = ctc::ctc_greedy_decode(lp, enc_lengths);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      errors += edit_distance(hyps[b], batch.labels[b]);
      ref_tokens += static_cast<std::int64_t>(batch.labels[b].size());
    }
  }
  EvalResult r;
  r.loss = loss_sum / static_cast<double>(items);
  r.ter = ref_tokens > 0 ? static_cast<double>(errors) / static_cast<double>(ref_tokens) : 0.0;
  return r;
}

}  // namespace

double token_error_rate(const std::vector<std::vector<int>>& hyp,
                        const std::vector<std::vector<int>>& ref) {
  if (hyp.size() != ref.size()) throw std::invalid_argument("token_error_rate: size mismatch");
  std::int64_t errors = 0, tokens = 0;
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    errors += edit_distance(hyp[i], ref[i]);
    tokens += static_cast<std::int64_t>(ref[i].size());
  }
  return tokens > 0 ? static_cast<double>(errors) / static_cast<double>(tokens) : 0.0;
}

RunRecord train(const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  const auto t_start = std::chrono::steady_clock::now();
  if (std::filesystem::exists(out_dir / "run.json")) {
    throw std::invalid_argument("train: output directory already holds a run: " +
                                out_dir.string());
  }
  std::filesystem::create_directories(out_dir);

  RunRecord rec;
  rec.seed = cfg.seed;
  rec.config_digest = cfg.digest();
  rec.run_id = rec.config_digest.substr(0, 8) + "-s" + std::to_string(cfg.seed);

  SyntheticTask task(cfg.task);
  const auto train_utts = task.generate(cfg.task.train_utts, cfg.task.train_seed);
  const auto val_utts = task.generate(cfg.task.val_utts, cfg.task.val_seed);
  const auto batches = pack_batches(train_utts, cfg.batch_frames);

  Model model = Model::init(cfg.model, cfg.vocab, cfg.seed);
  nn::ParamMap params = model.named_params();
  Adam adam(params, AdamConfig{0.9, 0.98, 1e-9, cfg.weight_decay});
  WarmupSchedule schedule{cfg.peak_lr, cfg.warmup_steps};

  std::mt19937_64 order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::mt19937_64 run_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4full);

  const EvalResult initial = evaluate(model, val_utts, cfg.batch_frames, cfg.task.feat_dim);
  rec.initial_val_loss = initial.loss;
  rec.initial_val_ter = initial.ter;
  const double divergence_threshold = 10.0 * initial.loss;

  double best_val = std::numeric_limits<double>::infinity();
  std::int64_t global_step = 0;
  std::vector<std::size_t> batch_order(batches.size());
  std::iota(batch_order.begin(), batch_order.end(), 0);

  for (std::int64_t epoch = 1; epoch <= cfg.epochs && !rec.diverged; ++epoch) {
    std::shuffle(batch_order.begin(), batch_order.end(), order_rng);
    for (std::size_t bi : batch_order) {
      Batch batch = make_batch(train_utts, batches[bi], cfg.task.feat_dim);
      ad::Tensor feats = spec_augment(batch.feats, cfg.specaug, run_rng);

      ad::Tape tape;
      double loss_value = 0.0;
      {
        ad::Tape::Scope scope(tape);
        std::vector<std::int64_t> enc_lengths;
        ad::Tensor lp = model_log_probs(model, feats, batch.lengths, nn::Mode::train, &run_rng,
                                        &enc_lengths);
        ad::Tensor loss = ctc::ctc_loss(lp, batch.labels, enc_lengths);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          rec.diverged = true;
        } else {
          adam.zero_grad();
          tape.backward(loss);
        }
      }
      if (rec.diverged) {
        rec.steps.push_back({global_step + 1, schedule.lr_at(global_step + 1), loss_value});
        break;
      }
      ++global_step;
      const double lr = schedule.lr_at(global_step);
      clip_grad_norm(params, cfg.clip_norm);
      adam.step(lr);
      adam.zero_grad();
      if (global_step % cfg.log_every == 0) {
        rec.steps.push_back({global_step, lr, loss_value});
      }
    }
    if (rec.diverged) break;

    const EvalResult ev = evaluate(model, val_utts, cfg.batch_frames, cfg.task.feat_dim);
    rec.epochs.push_back({epoch, ev.loss, ev.ter});
    if (!std::isfinite(ev.loss) || ev.loss > divergence_threshold) {
      rec.diverged = true;
      break;
    }
    if (ev.loss < best_val) {
      best_val = ev.loss;
      nn::save_checkpoint(params, out_dir / "checkpoint");
    }
  }

  rec.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  std::ofstream(out_dir / "config.toml", std::ios::trunc) << cfg.canonical();
  std::ofstream(out_dir / "metrics.csv", std::ios::trunc) << rec.metrics_csv();
  std::ofstream(out_dir / "run.json", std::ios::trunc) << rec.to_json() << "\n";
  return rec;
}

std::pair<std::vector<std::vector<int>>, std::vector<std::vector<int>>> decode_run(
    const std::filesystem::path& run_dir, const std::string& split, std::int64_t count) {
  const TrainConfig cfg = TrainConfig::from_file(run_dir / "config.toml");
  Model model = Model::init(cfg.model, cfg.vocab, cfg.seed);
  nn::ParamMap params = model.named_params();
  nn::load_checkpoint(params, run_dir / "checkpoint");

  SyntheticTask task(cfg.task);
  std::uint64_t seed = cfg.task.val_seed;
  if (split == "train") {
    seed = cfg.task.train_seed;
  } else if (split == "test") {
    seed = cfg.task.val_seed ^ 0x5bd1e995u;
  } else if (split != "val") {
    throw std::invalid_argument("decode_run: unknown split '" + split + "'");
  }
  const auto utts = task.generate(count, seed);

  std::vector<std::vector<int>> hyps, refs;
  for (const auto& idx : pack_batches(utts, cfg.batch_frames)) {
    std::vector<const Utterance*> ptrs;
    std::vector<std::vector<int>> batch_refs;
    for (auto i : idx) ptrs.push_back(&utts[i]);
    Batch batch = SyntheticTask::assemble(ptrs, cfg.task.feat_dim);
    std::vector<std::int64_t> enc_lengths;
    ad::Tensor lp = model_log_probs(model, batch.feats, batch.lengths, nn::Mode::eval, nullptr,
                                    &enc_lengths);
    auto decoded = ctc::ctc_greedy_decode(lp, enc_lengths);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      hyps.push_back(decoded[b]);
      refs.push_back(batch.labels[b]);
    }
  }
  return {hyps, refs};
}

}  // namespace branchkit::harness
