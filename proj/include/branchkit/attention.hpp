#pragma once

#include "branchkit/nn.hpp"

namespace branchkit::nn {

struct RelPosMHAParams {
  std::int64_t heads = 0;
  std::int64_t model_dim = 0;
  LinearParams wq, wk, wv, wout;  // d x d, with bias
  Tensor wpos;                    // d x d, no bias
  Tensor bias_u;                  // content bias, [d]
  Tensor bias_v;                  // position bias, [d]
  double attn_dropout = 0.0;

  static RelPosMHAParams init(std::int64_t d, std::int64_t heads, double attn_dropout,
                              std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamMap& out) const;
  std::int64_t head_dim() const { return model_dim / heads; }
};

// Sinusoidal embeddings for relative offsets T-1 ... -(T-1); row p encodes
// offset T-1-p at geometric frequencies with base 10000. Shape [2T-1, d].
Tensor sinusoidal_rel_embeddings(std::int64_t frames, std::int64_t d);

// Aligns per-offset scores to absolute key positions:
// out[..,i,j] = in[..,i,(T-1)+(j-i)] for scores of shape [B,h,T,2T-1].
Tensor rel_shift(const Tensor& scores);

// Relative-position score term computed directly per query/key pair:
// out[b,h,i,j] = q[b,h,i,:] . emb[h, (T-1)+(j-i), :]. Computes only the T*T
// entries the shifted score matrix needs, unlike the matmul + rel_shift
// realization which fills T*(2T-1).
Tensor rel_scores(const Tensor& q, const Tensor& emb);

// Softmax over the trailing key axis with key positions >= length masked out
// (-inf before normalization, so masked keys get weight exactly 0).
Tensor masked_softmax(const Tensor& scores, const SeqMask& mask);

// Multi-head self-attention with Transformer-XL relative positional encoding:
// score(i,j) = [(q_i+u).k_j + (q_i+v).r_{i-j}] / sqrt(d_h). If `attn` is given
// it receives the post-softmax (pre-dropout) weights [B,h,T,T].
Tensor mha_forward(const Tensor& x, const RelPosMHAParams& p, const SeqMask& mask, Mode mode,
                   std::mt19937_64* rng, Tensor* attn = nullptr);

}  // namespace branchkit::nn
