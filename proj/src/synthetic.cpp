#include "branchkit/synthetic.hpp"

#include <cmath>
#include <stdexcept>

namespace branchkit::harness {

void SyntheticTaskSpec::validate() const {
  if (vocab < 1) throw std::invalid_argument("task: vocab must be >= 1");
  if (feat_dim < 7) throw std::invalid_argument("task: feat_dim must be >= 7 for subsampling");
  if (min_label_len < 0 || max_label_len < min_label_len) {
    throw std::invalid_argument("task: bad label length range");
  }
  if (min_frames_per_token < 1 || max_frames_per_token < min_frames_per_token) {
    throw std::invalid_argument("task: bad frames-per-token range");
  }
  // Repeated adjacent labels need a separating blank frame, so two frames per
  // token guarantee T >= 2L-1 whenever repeats can occur.
  if (max_label_len >= 2 && vocab >= 1 && min_frames_per_token < 2) {
    throw std::invalid_argument("task: min_frames_per_token must be >= 2 when repeats are possible");
  }
  if (noise_std < 0.0) throw std::invalid_argument("task: negative noise std");
  if (train_utts < 1 || val_utts < 1) {
    throw std::invalid_argument("task: train_utts and val_utts must be >= 1");
  }
}

SyntheticTask::SyntheticTask(const SyntheticTaskSpec& spec) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(spec_.template_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  templates_.resize(static_cast<std::size_t>(spec_.vocab));
  for (auto& tpl : templates_) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      tpl.resize(static_cast<std::size_t>(spec_.feat_dim));
      for (auto& v : tpl) v = gauss(rng);
      bool ok = true;
      for (const auto& other : templates_) {
        if (&other == &tpl) continue;
        if (other.empty()) break;
        double sq = 0.0;
        for (std::size_t i = 0; i < tpl.size(); ++i) {
          const double diff = tpl[i] - other[i];
          sq += diff * diff;
        }
        if (std::sqrt(sq) < spec_.min_template_dist) {
          ok = false;
          break;
        }
      }
      if (ok) break;
      if (attempt == 999) {
        throw std::runtime_error("synthetic task: could not place distinct templates");
      }
    }
  }
}

Utterance SyntheticTask::sample_utterance(std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::int64_t> len_dist(spec_.min_label_len, spec_.max_label_len);
  std::uniform_int_distribution<int> tok_dist(1, static_cast<int>(spec_.vocab));
  std::uniform_int_distribution<std::int64_t> rep_dist(spec_.min_frames_per_token,
                                                       spec_.max_frames_per_token);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Utterance u;
  const std::int64_t len = len_dist(rng);
  u.labels.reserve(static_cast<std::size_t>(len));
  for (std::int64_t i = 0; i < len; ++i) u.labels.push_back(tok_dist(rng));
  for (int tok : u.labels) {
    const std::int64_t reps = rep_dist(rng);
    const auto& tpl = templates_[static_cast<std::size_t>(tok - 1)];
    for (std::int64_t r = 0; r < reps; ++r) {
      for (double base : tpl) u.feats.push_back(base + spec_.noise_std * gauss(rng));
      ++u.frames;
    }
  }
  // Zero-label utterances still need enough frames for the frontend.
  while (u.frames < 7) {
    for (std::int64_t f = 0; f < spec_.feat_dim; ++f) {
      u.feats.push_back(spec_.noise_std * gauss(rng));
    }
    ++u.frames;
  }
  return u;
}

std::vector<Utterance> SyntheticTask::generate(std::int64_t count, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<Utterance> utts;
  utts.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) utts.push_back(sample_utterance(rng));
  return utts;
}

Batch SyntheticTask::assemble(const std::vector<const Utterance*>& utts, std::int64_t feat_dim) {
  if (utts.empty()) throw std::invalid_argument("assemble: empty batch");
  std::int64_t max_frames = 0;
  for (const auto* u : utts) max_frames = std::max(max_frames, u->frames);
  const std::int64_t batch = static_cast<std::int64_t>(utts.size());
  std::vector<double> data(static_cast<std::size_t>(batch * max_frames * feat_dim), 0.0);
  Batch b;
  b.lengths.reserve(utts.size());
  b.labels.reserve(utts.size());
  for (std::int64_t i = 0; i < batch; ++i) {
    const Utterance* u = utts[static_cast<std::size_t>(i)];
    std::copy(u->feats.begin(), u->feats.end(), data.begin() + i * max_frames * feat_dim);
    b.lengths.push_back(u->frames);
    b.labels.push_back(u->labels);
  }
  b.feats = ad::Tensor::from_data({batch, max_frames, feat_dim}, std::move(data));
  return b;
}

Batch gen_synthetic_batch(const SyntheticTaskSpec& spec, std::mt19937_64& rng, std::int64_t count) {
  SyntheticTask task(spec);
  std::vector<Utterance> utts;
  utts.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) utts.push_back(task.sample_utterance(rng));
  std::vector<const Utterance*> ptrs;
  ptrs.reserve(utts.size());
  for (const auto& u : utts) ptrs.push_back(&u);
  return SyntheticTask::assemble(ptrs, spec.feat_dim);
}

}  // namespace branchkit::harness
