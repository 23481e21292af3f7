#include "branchkit/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace branchkit::nn {

using ad::add_macs;
using ad::recording_for;
using ad::Tape;

RelPosMHAParams RelPosMHAParams::init(std::int64_t d, std::int64_t heads, double attn_dropout,
                                      std::mt19937_64& rng) {
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("mha: model dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  }
  RelPosMHAParams p;
  p.heads = heads;
  p.model_dim = d;
  p.attn_dropout = attn_dropout;
  p.wq = LinearParams::init(d, d, true, rng);
  p.wk = LinearParams::init(d, d, true, rng);
  p.wv = LinearParams::init(d, d, true, rng);
  p.wout = LinearParams::init(d, d, true, rng);
  p.wpos = Tensor::zeros({d, d}, true);
  xavier_uniform(p.wpos, d, d, rng);
  p.bias_u = Tensor::zeros({d}, true);
  p.bias_v = Tensor::zeros({d}, true);
  xavier_uniform(p.bias_u, heads, d / heads, rng);
  xavier_uniform(p.bias_v, heads, d / heads, rng);
  return p;
}

void RelPosMHAParams::collect(const std::string& prefix, ParamMap& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wout.collect(prefix + ".wout", out);
  out.emplace_back(prefix + ".wpos", wpos);
  out.emplace_back(prefix + ".bias_u", bias_u);
  out.emplace_back(prefix + ".bias_v", bias_v);
}

Tensor sinusoidal_rel_embeddings(std::int64_t frames, std::int64_t d) {
  if (frames < 1) throw std::invalid_argument("sinusoidal_rel_embeddings: frames < 1");
  const std::int64_t rows = 2 * frames - 1;
  std::vector<double> v(static_cast<std::size_t>(rows * d));
  for (std::int64_t p = 0; p < rows; ++p) {
    const double offset = static_cast<double>(frames - 1 - p);
    for (std::int64_t j = 0; j < d; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(j - (j % 2)) / static_cast<double>(d));
      v[static_cast<std::size_t>(p * d + j)] =
          (j % 2 == 0) ? std::sin(offset * freq) : std::cos(offset * freq);
    }
  }
  return Tensor::from_data({rows, d}, std::move(v));
}

Tensor rel_shift(const Tensor& scores) {
  if (scores.rank() != 4) {
    throw std::invalid_argument("rel_shift: expected rank-4 scores, got " +
                                ad::shape_str(scores.shape()));
  }
  const std::int64_t b = scores.extent(0), h = scores.extent(1), t = scores.extent(2);
  const std::int64_t cols = scores.extent(3);
  if (cols != 2 * t - 1) {
    throw std::invalid_argument("rel_shift: trailing extent " + std::to_string(cols) +
                                " != 2T-1 for T=" + std::to_string(t));
  }
  const auto& sv = scores.data();
  std::vector<double> out_v(static_cast<std::size_t>(b * h * t * t));
  std::vector<std::int64_t> src(static_cast<std::size_t>(b * h * t * t));
  std::int64_t w = 0;
  for (std::int64_t bh = 0; bh < b * h; ++bh) {
    for (std::int64_t i = 0; i < t; ++i) {
      const std::int64_t row = (bh * t + i) * cols;
      for (std::int64_t j = 0; j < t; ++j, ++w) {
        const std::int64_t s = row + (t - 1) + (j - i);
        out_v[w] = sv[s];
        src[w] = s;
      }
    }
  }
  Tensor out = Tensor::from_data({b, h, t, t}, std::move(out_v));
  if (recording_for({&scores})) {
    out.set_requires_grad(true);
    auto ss = scores.storage();
    auto os = out.storage();
    Tape::active()->record(os, [ss, os, src = std::move(src)]() {
      if (!ss->requires_grad) return;
      ss->ensure_grad();
      for (std::size_t i = 0; i < src.size(); ++i) ss->grad[src[i]] += os->grad[i];
    });
  }
  return out;
}

Tensor rel_scores(const Tensor& q, const Tensor& emb) {
  if (q.rank() != 4 || emb.rank() != 3) {
    throw std::invalid_argument("rel_scores: expected q [B,h,T,dh] and emb [h,2T-1,dh]");
  }
  const std::int64_t b = q.extent(0), h = q.extent(1), t = q.extent(2), dh = q.extent(3);
  if (emb.extent(0) != h || emb.extent(1) != 2 * t - 1 || emb.extent(2) != dh) {
    throw std::invalid_argument("rel_scores: emb shape " + ad::shape_str(emb.shape()) +
                                " incompatible with q " + ad::shape_str(q.shape()));
  }
  const auto& qv = q.data();
  const auto& ev = emb.data();
  std::vector<double> out_v(static_cast<std::size_t>(b * h * t * t));
  std::int64_t w = 0;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t hi = 0; hi < h; ++hi) {
      const double* eh = ev.data() + hi * (2 * t - 1) * dh;
      for (std::int64_t i = 0; i < t; ++i) {
        const double* qrow = qv.data() + ((bi * h + hi) * t + i) * dh;
        for (std::int64_t j = 0; j < t; ++j, ++w) {
          const double* erow = eh + ((t - 1) + (j - i)) * dh;
          double acc = 0.0;
          for (std::int64_t c = 0; c < dh; ++c) acc += qrow[c] * erow[c];
          out_v[w] = acc;
        }
      }
    }
  }
  add_macs(b * h * t * t * dh);

  Tensor out = Tensor::from_data({b, h, t, t}, std::move(out_v));
  if (recording_for({&q, &emb})) {
    out.set_requires_grad(true);
    auto qs = q.storage();
    auto es = emb.storage();
    auto os = out.storage();
    Tape::active()->record(os, [qs, es, os, b, h, t, dh]() {
      const bool need_q = qs->requires_grad;
      const bool need_e = es->requires_grad;
      if (need_q) qs->ensure_grad();
      if (need_e) es->ensure_grad();
      const auto& g = os->grad;
      std::int64_t w2 = 0;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t hi = 0; hi < h; ++hi) {
          const std::int64_t eoff = hi * (2 * t - 1) * dh;
          for (std::int64_t i = 0; i < t; ++i) {
            const std::int64_t qoff = ((bi * h + hi) * t + i) * dh;
            for (std::int64_t j = 0; j < t; ++j, ++w2) {
              const double gv = g[w2];
              if (gv == 0.0) continue;
              const std::int64_t erow = eoff + ((t - 1) + (j - i)) * dh;
              for (std::int64_t c = 0; c < dh; ++c) {
                if (need_q) qs->grad[qoff + c] += gv * es->value[erow + c];
                if (need_e) es->grad[erow + c] += gv * qs->value[qoff + c];
              }
            }
          }
        }
      }
    });
  }
  if (ad::verify_mode()) ad::check_finite(*out.storage(), "rel_scores");
  return out;
}

Tensor masked_softmax(const Tensor& scores, const SeqMask& mask) {
  if (scores.rank() != 4) {
    throw std::invalid_argument("masked_softmax: expected [B,h,Tq,Tk], got " +
                                ad::shape_str(scores.shape()));
  }
  const std::int64_t b = scores.extent(0), h = scores.extent(1), tq = scores.extent(2),
                     tk = scores.extent(3);
  if (mask.batch != b || mask.frames != tk) {
    throw std::invalid_argument("masked_softmax: mask/keys mismatch");
  }
  const auto& sv = scores.data();
  std::vector<double> out_v(static_cast<std::size_t>(b * h * tq * tk), 0.0);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const std::int64_t valid = mask.lengths[static_cast<std::size_t>(bi)];
    if (valid == 0) throw std::invalid_argument("masked_softmax: sequence with zero valid keys");
    for (std::int64_t hi = 0; hi < h; ++hi) {
      for (std::int64_t i = 0; i < tq; ++i) {
        const std::int64_t row = ((bi * h + hi) * tq + i) * tk;
        double m = sv[row];
        for (std::int64_t j = 1; j < valid; ++j) m = std::max(m, sv[row + j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < valid; ++j) {
          const double e = std::exp(sv[row + j] - m);
          out_v[row + j] = e;
          z += e;
        }
        const double inv = 1.0 / z;
        for (std::int64_t j = 0; j < valid; ++j) out_v[row + j] *= inv;
      }
    }
  }

  Tensor out = Tensor::from_data(scores.shape(), std::move(out_v));
  if (recording_for({&scores})) {
    out.set_requires_grad(true);
    auto ss = scores.storage();
    auto os = out.storage();
    auto lengths = mask.lengths;
    Tape::active()->record(os, [ss, os, lengths, b, h, tq, tk]() {
      if (!ss->requires_grad) return;
      ss->ensure_grad();
      const auto& g = os->grad;
      const auto& w = os->value;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const std::int64_t valid = lengths[static_cast<std::size_t>(bi)];
        for (std::int64_t hi = 0; hi < h; ++hi) {
          for (std::int64_t i = 0; i < tq; ++i) {
            const std::int64_t row = ((bi * h + hi) * tq + i) * tk;
            double dot = 0.0;
            for (std::int64_t j = 0; j < valid; ++j) dot += g[row + j] * w[row + j];
            for (std::int64_t j = 0; j < valid; ++j) {
              ss->grad[row + j] += w[row + j] * (g[row + j] - dot);
            }
          }
        }
      }
    });
  }
  if (ad::verify_mode()) ad::check_finite(*out.storage(), "masked_softmax");
  return out;
}

namespace {

Tensor to_heads(const Tensor& x, std::int64_t heads) {
  const std::int64_t b = x.extent(0), t = x.extent(1), d = x.extent(2);
  Tensor r = ad::reshape(x, {b, t, heads, d / heads});
  return ad::transpose(r, {0, 2, 1, 3});
}

}  // namespace

Tensor mha_forward(const Tensor& x, const RelPosMHAParams& p, const SeqMask& mask, Mode mode,
                   std::mt19937_64* rng, Tensor* attn) {
  if (x.rank() != 3 || x.extent(2) != p.model_dim) {
    throw std::invalid_argument("mha_forward: input " + ad::shape_str(x.shape()) +
                                " incompatible with model dim " + std::to_string(p.model_dim));
  }
  if (p.model_dim % p.heads != 0) {
    throw std::invalid_argument("mha_forward: model dim not divisible by heads");
  }
  const std::int64_t b = x.extent(0), t = x.extent(1), d = p.model_dim;
  const std::int64_t h = p.heads, dh = p.head_dim();

  Tensor q = linear(x, p.wq);
  Tensor k = to_heads(linear(x, p.wk), h);
  Tensor v = to_heads(linear(x, p.wv), h);

  // Content term: (q + u) . k, per head.
  Tensor qu = to_heads(ad::add(q, p.bias_u), h);
  Tensor content = ad::matmul(qu, k, false, true);  // [B,h,T,T]

  // Position term: sinusoids for every relative offset projected through
  // W_pos, head-split, and dotted with (q + v) per query/key pair.
  Tensor qv_heads = to_heads(ad::add(q, p.bias_v), h);
  Tensor emb = sinusoidal_rel_embeddings(t, d);
  Tensor projected = ad::matmul(emb, p.wpos);  // [2T-1, d]
  Tensor emb_heads = ad::transpose(ad::reshape(projected, {2 * t - 1, h, dh}), {1, 0, 2});
  Tensor position = rel_scores(qv_heads, emb_heads);  // [B,h,T,T]

  Tensor scores = ad::scale(ad::add(content, position), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = masked_softmax(scores, mask);
  if (attn != nullptr) *attn = weights;
  weights = dropout(weights, p.attn_dropout, mode, rng);

  Tensor ctx = ad::matmul(weights, v);  // [B,h,T,dh]
  Tensor merged = ad::reshape(ad::transpose(ctx, {0, 2, 1, 3}), {b, t, d});
  return linear(merged, p.wout);
}

}  // namespace branchkit::nn
