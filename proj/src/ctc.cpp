#include "branchkit/ctc.hpp"

#include <algorithm>
#include <cmath>

namespace branchkit::ctc {

CtcHead CtcHead::init(std::int64_t d, std::int64_t vocab, std::mt19937_64& rng) {
  CtcHead h;
  h.vocab = vocab;
  h.proj = nn::LinearParams::init(d, vocab + 1, true, rng);
  return h;
}

void CtcHead::collect(const std::string& prefix, nn::ParamMap& out) const {
  proj.collect(prefix + ".proj", out);
}

Tensor log_softmax_lastaxis(const Tensor& logits) {
  const int last = logits.rank() - 1;
  Tensor m = ad::reduce(logits, last, ad::Reduce::max, true);
  Tensor shifted = ad::sub(logits, m);
  Tensor lse = ad::unary(ad::reduce(ad::unary(shifted, ad::Unary::exp), last, ad::Reduce::sum, true),
                         ad::Unary::log);
  return ad::sub(shifted, lse);
}

std::int64_t min_frames_for(const std::vector<int>& labels) {
  std::int64_t need = static_cast<std::int64_t>(labels.size());
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++need;
  }
  return need;
}

namespace {

void validate_labels(const std::vector<int>& labels, std::int64_t vocab) {
  for (int tok : labels) {
    if (tok < 1 || tok > vocab) {
      throw std::invalid_argument("ctc: label id " + std::to_string(tok) + " outside [1, " +
                                  std::to_string(vocab) + "]");
    }
  }
}

// One utterance's forward recursion over the blank-interleaved sequence.
// Reachability windows keep every combined alpha finite, so no -inf sentinels
// ever enter the tape.
Tensor ctc_item_loss(const Tensor& log_probs, std::int64_t item, const std::vector<int>& labels,
                     std::int64_t frames) {
  const std::int64_t classes = log_probs.extent(2);
  const std::int64_t max_frames = log_probs.extent(1);
  const std::int64_t len = static_cast<std::int64_t>(labels.size());
  const std::int64_t states = 2 * len + 1;
  if (frames < 1 || frames > max_frames) {
    throw std::invalid_argument("ctc: input length " + std::to_string(frames) + " outside [1, " +
                                std::to_string(max_frames) + "]");
  }
  if (min_frames_for(labels) > frames) {
    throw AdmissibilityError("ctc: label of length " + std::to_string(len) + " needs " +
                             std::to_string(min_frames_for(labels)) + " frames, got " +
                             std::to_string(frames));
  }
  auto state_label = [&](std::int64_t s) {
    return s % 2 == 1 ? labels[static_cast<std::size_t>((s - 1) / 2)] : kBlank;
  };
  auto log_prob_at = [&](std::int64_t t, std::int64_t s) {
    const std::int64_t flat = (item * max_frames + t) * classes + state_label(s);
    return ad::pick(log_probs, {flat});
  };

  std::vector<Tensor> prev(static_cast<std::size_t>(states));
  std::vector<Tensor> cur(static_cast<std::size_t>(states));
  for (std::int64_t t = 0; t < frames; ++t) {
    const std::int64_t lo = std::max<std::int64_t>(0, states - 2 * (frames - t));
    const std::int64_t hi = std::min(2 * t + 1, states - 1);
    for (auto& c : cur) c = Tensor();
    for (std::int64_t s = lo; s <= hi; ++s) {
      if (t == 0) {
        cur[static_cast<std::size_t>(s)] = log_prob_at(0, s);
        continue;
      }
      Tensor acc;
      auto consider = [&](std::int64_t ps) {
        if (ps < 0) return;
        const Tensor& a = prev[static_cast<std::size_t>(ps)];
        if (!a.defined()) return;
        acc = acc.defined() ? ad::logaddexp(acc, a) : a;
      };
      consider(s);
      consider(s - 1);
      if (s % 2 == 1 && s >= 2 && state_label(s) != state_label(s - 2)) consider(s - 2);
      if (!acc.defined()) continue;  // structurally unreachable inside the window
      cur[static_cast<std::size_t>(s)] = ad::add(acc, log_prob_at(t, s));
    }
    std::swap(prev, cur);
  }

  Tensor total;
  if (prev[static_cast<std::size_t>(states - 1)].defined()) {
    total = prev[static_cast<std::size_t>(states - 1)];
  }
  if (states >= 2 && prev[static_cast<std::size_t>(states - 2)].defined()) {
    const Tensor& a = prev[static_cast<std::size_t>(states - 2)];
    total = total.defined() ? ad::logaddexp(total, a) : a;
  }
  if (!total.defined()) {
    throw AdmissibilityError("ctc: no admissible alignment");
  }
  return ad::scale(total, -1.0);
}

}  // namespace

Tensor ctc_loss(const Tensor& log_probs, const std::vector<std::vector<int>>& labels,
                const std::vector<std::int64_t>& input_lengths) {
  if (log_probs.rank() != 3) {
    throw std::invalid_argument("ctc_loss: expected [batch, frames, classes], got " +
                                ad::shape_str(log_probs.shape()));
  }
  const std::int64_t batch = log_probs.extent(0);
  const std::int64_t vocab = log_probs.extent(2) - 1;
  if (static_cast<std::int64_t>(labels.size()) != batch ||
      static_cast<std::int64_t>(input_lengths.size()) != batch) {
    throw std::invalid_argument("ctc_loss: batch size mismatch");
  }
  std::vector<Tensor> losses;
  losses.reserve(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    validate_labels(labels[static_cast<std::size_t>(b)], vocab);
    losses.push_back(ctc_item_loss(log_probs, b, labels[static_cast<std::size_t>(b)],
                                   input_lengths[static_cast<std::size_t>(b)]));
  }
  return ad::reduce(ad::concat(losses, 0), 0, ad::Reduce::mean, true);
}

double ctc_brute_force(const Tensor& log_probs, const std::vector<int>& labels) {
  if (log_probs.rank() != 2) {
    throw std::invalid_argument("ctc_brute_force: expected [frames, classes]");
  }
  const std::int64_t frames = log_probs.extent(0);
  const std::int64_t classes = log_probs.extent(1);
  if (frames > 8 || classes > 5) {
    throw std::invalid_argument("ctc_brute_force: enumeration bound exceeded (T<=8, V<=4)");
  }
  validate_labels(labels, classes - 1);

  const auto& lp = log_probs.data();
  std::vector<int> path(static_cast<std::size_t>(frames), 0);
  double total = 0.0;
  bool any = false;
  while (true) {
    // collapse: dedupe adjacent repeats, then strip blanks
    std::vector<int> collapsed;
    for (std::int64_t t = 0; t < frames; ++t) {
      if (t > 0 && path[static_cast<std::size_t>(t)] == path[static_cast<std::size_t>(t - 1)]) {
        continue;
      }
      if (path[static_cast<std::size_t>(t)] != kBlank) {
        collapsed.push_back(path[static_cast<std::size_t>(t)]);
      }
    }
    if (collapsed == labels) {
      double log_p = 0.0;
      for (std::int64_t t = 0; t < frames; ++t) {
        log_p += lp[static_cast<std::size_t>(t * classes + path[static_cast<std::size_t>(t)])];
      }
      total += std::exp(log_p);
      any = true;
    }
    // next path in lexicographic order
    std::int64_t pos = frames - 1;
    while (pos >= 0 && path[static_cast<std::size_t>(pos)] == classes - 1) {
      path[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
    ++path[static_cast<std::size_t>(pos)];
  }
  if (!any || total <= 0.0) {
    throw AdmissibilityError("ctc_brute_force: no path collapses to the label");
  }
  return -std::log(total);
}

std::vector<std::vector<int>> ctc_greedy_decode(const Tensor& log_probs,
                                                const std::vector<std::int64_t>& lengths) {
  if (log_probs.rank() != 3) {
    throw std::invalid_argument("ctc_greedy_decode: expected [batch, frames, classes]");
  }
  const std::int64_t batch = log_probs.extent(0);
  const std::int64_t frames = log_probs.extent(1);
  const std::int64_t classes = log_probs.extent(2);
  if (static_cast<std::int64_t>(lengths.size()) != batch) {
    throw std::invalid_argument("ctc_greedy_decode: batch size mismatch");
  }
  const auto& lp = log_probs.data();
  std::vector<std::vector<int>> out(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    const std::int64_t len = std::min(lengths[static_cast<std::size_t>(b)], frames);
    int prev = -1;
    for (std::int64_t t = 0; t < len; ++t) {
      const double* row = lp.data() + (b * frames + t) * classes;
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (best != prev && best != kBlank) out[static_cast<std::size_t>(b)].push_back(best);
      prev = best;
    }
  }
  return out;
}

}  // namespace branchkit::ctc
