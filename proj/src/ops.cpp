#include "branchkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace branchkit::ad {

namespace {

// Per-axis strides of `b` aligned to the axes of `a`; 0 where b broadcasts.
struct BroadcastPlan {
  bool same = false;
  std::vector<std::int64_t> a_shape;
  std::vector<std::int64_t> b_stride;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.same = true;
    return plan;
  }
  if (b.size() > a.size()) {
    throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b) +
                                " to " + shape_str(a));
  }
  const std::size_t ra = a.size(), rb = b.size();
  plan.a_shape = a;
  plan.b_stride.assign(ra, 0);
  std::int64_t stride = 1;
  for (std::size_t i = 0; i < rb; ++i) {
    const std::size_t ax_a = ra - 1 - i;
    const std::size_t ax_b = rb - 1 - i;
    if (b[ax_b] == a[ax_a]) {
      plan.b_stride[ax_a] = stride;
    } else if (b[ax_b] == 1) {
      plan.b_stride[ax_a] = 0;
    } else {
      throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b) +
                                  " to " + shape_str(a));
    }
    stride *= b[ax_b];
  }
  return plan;
}

// Calls fn(flat_a, flat_b) for every element of a, walking b with the plan.
template <typename Fn>
void for_broadcast(const BroadcastPlan& plan, std::int64_t n, Fn&& fn) {
  const int rank = static_cast<int>(plan.a_shape.size());
  if (rank == 0) {
    for (std::int64_t i = 0; i < n; ++i) fn(i, std::int64_t{0});
    return;
  }
  std::vector<std::int64_t> counter(rank, 0);
  std::int64_t bi = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, bi);
    for (int ax = rank - 1; ax >= 0; --ax) {
      ++counter[ax];
      bi += plan.b_stride[ax];
      if (counter[ax] < plan.a_shape[ax]) break;
      bi -= plan.b_stride[ax] * plan.a_shape[ax];
      counter[ax] = 0;
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logaddexp_scalar(double x, double y) {
  const double m = std::max(x, y);
  return m + std::log1p(std::exp(std::min(x, y) - m));
}

const char* binary_name(Binary k) {
  switch (k) {
    case Binary::add: return "add";
    case Binary::sub: return "sub";
    case Binary::mul: return "mul";
    case Binary::logaddexp: return "logaddexp";
  }
  return "?";
}

// Accumulates op(A[m,k], B[k,n]) into C[m,n]; transpose flags give the
// effective orientation of the raw buffers.
void gemm_accum(const double* a, const double* b, double* c, std::int64_t m, std::int64_t n,
                std::int64_t k, bool trans_a, bool trans_b) {
  if (!trans_a && !trans_b) {
    for (std::int64_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      const double* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const double av = arow[p];
        if (av == 0.0) continue;
        const double* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::int64_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      double* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::int64_t p = 0; p < k; ++p) {
      const double* arow = a + p * m;
      const double* brow = b + p * n;
      for (std::int64_t i = 0; i < m; ++i) {
        const double av = arow[i];
        if (av == 0.0) continue;
        double* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
        crow[j] += acc;
      }
    }
  }
}

struct BatchMap {
  Shape out_batch;
  std::int64_t count = 1;
  std::vector<std::int64_t> a_stride;  // per out-batch axis, 0 where broadcast
  std::vector<std::int64_t> b_stride;
};

BatchMap plan_batch(const Shape& a_batch, const Shape& b_batch) {
  BatchMap map;
  const std::size_t r = std::max(a_batch.size(), b_batch.size());
  map.out_batch.assign(r, 1);
  map.a_stride.assign(r, 0);
  map.b_stride.assign(r, 0);
  std::int64_t as = 1, bs = 1;
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ax = r - 1 - i;
    const std::int64_t ae = i < a_batch.size() ? a_batch[a_batch.size() - 1 - i] : 1;
    const std::int64_t be = i < b_batch.size() ? b_batch[b_batch.size() - 1 - i] : 1;
    if (ae != be && ae != 1 && be != 1) {
      throw std::invalid_argument("matmul: incompatible batch extents " + std::to_string(ae) +
                                  " vs " + std::to_string(be));
    }
    map.out_batch[ax] = std::max(ae, be);
    map.a_stride[ax] = ae == 1 ? 0 : as;
    map.b_stride[ax] = be == 1 ? 0 : bs;
    as *= ae;
    bs *= be;
  }
  map.count = numel_of(map.out_batch);
  return map;
}

template <typename Fn>
void for_batch(const BatchMap& map, Fn&& fn) {
  const int rank = static_cast<int>(map.out_batch.size());
  std::vector<std::int64_t> counter(rank, 0);
  std::int64_t ai = 0, bi = 0;
  for (std::int64_t o = 0; o < map.count; ++o) {
    fn(o, ai, bi);
    for (int ax = rank - 1; ax >= 0; --ax) {
      ++counter[ax];
      ai += map.a_stride[ax];
      bi += map.b_stride[ax];
      if (counter[ax] < map.out_batch[ax]) break;
      ai -= map.a_stride[ax] * map.out_batch[ax];
      bi -= map.b_stride[ax] * map.out_batch[ax];
      counter[ax] = 0;
    }
  }
}

void maybe_check(const Tensor& out, const char* op) {
  if (verify_mode()) check_finite(*out.storage(), op);
}

}  // namespace

Tensor binary_elementwise(const Tensor& a, const Tensor& b, Binary kind) {
  const char* name = binary_name(kind);
  const auto plan = plan_broadcast(a.shape(), b.shape(), name);
  const auto& av = a.data();
  const auto& bv = b.data();
  const std::int64_t n = a.numel();
  std::vector<double> out_v(static_cast<std::size_t>(n));

  auto apply = [&](auto&& op) {
    if (plan.same) {
      for (std::int64_t i = 0; i < n; ++i) out_v[i] = op(av[i], bv[i]);
    } else {
      for_broadcast(plan, n, [&](std::int64_t i, std::int64_t bi) { out_v[i] = op(av[i], bv[bi]); });
    }
  };
  switch (kind) {
    case Binary::add: apply([](double x, double y) { return x + y; }); break;
    case Binary::sub: apply([](double x, double y) { return x - y; }); break;
    case Binary::mul: apply([](double x, double y) { return x * y; }); break;
    case Binary::logaddexp: apply(logaddexp_scalar); break;
  }

  Tensor out = Tensor::from_data(a.shape(), std::move(out_v));
  if (recording_for({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    Tape::active()->record(os, [as, bs, os, plan, kind, n]() {
      const auto& g = os->grad;
      const bool need_a = as->requires_grad;
      const bool need_b = bs->requires_grad;
      if (need_a) as->ensure_grad();
      if (need_b) bs->ensure_grad();
      auto accum = [&](auto&& da, auto&& db) {
        if (plan.same) {
          for (std::int64_t i = 0; i < n; ++i) {
            if (need_a) as->grad[i] += da(i, i);
            if (need_b) bs->grad[i] += db(i, i);
          }
        } else {
          for_broadcast(plan, n, [&](std::int64_t i, std::int64_t bi) {
            if (need_a) as->grad[i] += da(i, bi);
            if (need_b) bs->grad[bi] += db(i, bi);
          });
        }
      };
      switch (kind) {
        case Binary::add:
          accum([&](std::int64_t i, std::int64_t) { return g[i]; },
                [&](std::int64_t i, std::int64_t) { return g[i]; });
          break;
        case Binary::sub:
          accum([&](std::int64_t i, std::int64_t) { return g[i]; },
                [&](std::int64_t i, std::int64_t) { return -g[i]; });
          break;
        case Binary::mul:
          accum([&](std::int64_t i, std::int64_t bi) { return g[i] * bs->value[bi]; },
                [&](std::int64_t i, std::int64_t) { return g[i] * as->value[i]; });
          break;
        case Binary::logaddexp:
          accum(
              [&](std::int64_t i, std::int64_t) {
                return g[i] * std::exp(as->value[i] - os->value[i]);
              },
              [&](std::int64_t i, std::int64_t bi) {
                return g[i] * std::exp(bs->value[bi] - os->value[i]);
              });
          break;
      }
    });
  }
  maybe_check(out, name);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, Binary::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, Binary::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, Binary::mul); }
Tensor logaddexp(const Tensor& a, const Tensor& b) {
  return binary_elementwise(a, b, Binary::logaddexp);
}

Tensor unary(const Tensor& x, Unary kind) {
  const auto& xv = x.data();
  const std::int64_t n = x.numel();
  std::vector<double> out_v(static_cast<std::size_t>(n));
  const char* name = "unary";
  switch (kind) {
    case Unary::exp:
      name = "exp";
      for (std::int64_t i = 0; i < n; ++i) out_v[i] = std::exp(xv[i]);
      break;
    case Unary::log:
      name = "log";
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv[i] <= 0.0) {
          throw std::domain_error("log: non-positive input " + std::to_string(xv[i]));
        }
        out_v[i] = std::log(xv[i]);
      }
      break;
    case Unary::sigmoid:
      name = "sigmoid";
      for (std::int64_t i = 0; i < n; ++i) out_v[i] = stable_sigmoid(xv[i]);
      break;
    case Unary::tanh:
      name = "tanh";
      for (std::int64_t i = 0; i < n; ++i) out_v[i] = std::tanh(xv[i]);
      break;
    case Unary::erf:
      name = "erf";
      for (std::int64_t i = 0; i < n; ++i) out_v[i] = std::erf(xv[i]);
      break;
    case Unary::relu:
      name = "relu";
      for (std::int64_t i = 0; i < n; ++i) out_v[i] = xv[i] > 0.0 ? xv[i] : 0.0;
      break;
    case Unary::neg:
      name = "neg";
      for (std::int64_t i = 0; i < n; ++i) out_v[i] = -xv[i];
      break;
    case Unary::sqrt:
      name = "sqrt";
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv[i] < 0.0) throw std::domain_error("sqrt: negative input");
        out_v[i] = std::sqrt(xv[i]);
      }
      break;
    case Unary::rsqrt:
      name = "rsqrt";
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv[i] <= 0.0) throw std::domain_error("rsqrt: non-positive input");
        out_v[i] = 1.0 / std::sqrt(xv[i]);
      }
      break;
    case Unary::recip:
      name = "recip";
      for (std::int64_t i = 0; i < n; ++i) {
        if (xv[i] == 0.0) throw std::domain_error("recip: zero input");
        out_v[i] = 1.0 / xv[i];
      }
      break;
  }

  Tensor out = Tensor::from_data(x.shape(), std::move(out_v));
  if (recording_for({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto os = out.storage();
    Tape::active()->record(os, [xs, os, kind, n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      const auto& g = os->grad;
      const auto& xv2 = xs->value;
      const auto& ov = os->value;
      auto& xg = xs->grad;
      switch (kind) {
        case Unary::exp:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += g[i] * ov[i];
          break;
        case Unary::log:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += g[i] / xv2[i];
          break;
        case Unary::sigmoid:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += g[i] * ov[i] * (1.0 - ov[i]);
          break;
        case Unary::tanh:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += g[i] * (1.0 - ov[i] * ov[i]);
          break;
        case Unary::erf: {
          const double c = 2.0 / std::sqrt(std::acos(-1.0));
          for (std::int64_t i = 0; i < n; ++i) xg[i] += g[i] * c * std::exp(-xv2[i] * xv2[i]);
          break;
        }
        case Unary::relu:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += xv2[i] > 0.0 ? g[i] : 0.0;
          break;
        case Unary::neg:
          for (std::int64_t i = 0; i < n; ++i) xg[i] -= g[i];
          break;
        case Unary::sqrt:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += g[i] * 0.5 / ov[i];
          break;
        case Unary::rsqrt:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += g[i] * (-0.5) * ov[i] / xv2[i];
          break;
        case Unary::recip:
          for (std::int64_t i = 0; i < n; ++i) xg[i] += -g[i] * ov[i] * ov[i];
          break;
      }
    });
  }
  maybe_check(out, name);
  return out;
}

Tensor scale(const Tensor& x, double c) {
  const auto& xv = x.data();
  const std::int64_t n = x.numel();
  std::vector<double> out_v(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out_v[i] = c * xv[i];
  Tensor out = Tensor::from_data(x.shape(), std::move(out_v));
  if (recording_for({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto os = out.storage();
    Tape::active()->record(os, [xs, os, c, n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) xs->grad[i] += c * os->grad[i];
    });
  }
  maybe_check(out, "scale");
  return out;
}

Tensor shift(const Tensor& x, double c) { return add(x, Tensor::scalar(c)); }

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto& ash = a.shape();
  const auto& bsh = b.shape();
  const std::int64_t m = trans_a ? ash[ash.size() - 1] : ash[ash.size() - 2];
  const std::int64_t ka = trans_a ? ash[ash.size() - 2] : ash[ash.size() - 1];
  const std::int64_t kb = trans_b ? bsh[bsh.size() - 1] : bsh[bsh.size() - 2];
  const std::int64_t nn = trans_b ? bsh[bsh.size() - 2] : bsh[bsh.size() - 1];
  if (ka != kb) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(ash) + " x " +
                                shape_str(bsh));
  }
  const Shape a_batch(ash.begin(), ash.end() - 2);
  const Shape b_batch(bsh.begin(), bsh.end() - 2);
  const auto map = plan_batch(a_batch, b_batch);
  Shape out_shape = map.out_batch;
  out_shape.push_back(m);
  out_shape.push_back(nn);

  const std::int64_t a_block = m * ka;
  const std::int64_t b_block = kb * nn;
  const std::int64_t o_block = m * nn;
  std::vector<double> out_v(static_cast<std::size_t>(map.count * o_block), 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for_batch(map, [&](std::int64_t o, std::int64_t ai, std::int64_t bi) {
    gemm_accum(av.data() + ai * a_block, bv.data() + bi * b_block, out_v.data() + o * o_block, m,
               nn, ka, trans_a, trans_b);
  });
  add_macs(map.count * m * nn * ka);

  Tensor out = Tensor::from_data(out_shape, std::move(out_v));
  if (recording_for({&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    Tape::active()->record(os, [as, bs, os, map, m, nn, ka, a_block, b_block, o_block, trans_a,
                                trans_b]() {
      const bool need_a = as->requires_grad;
      const bool need_b = bs->requires_grad;
      if (need_a) as->ensure_grad();
      if (need_b) bs->ensure_grad();
      const auto& g = os->grad;
      for_batch(map, [&](std::int64_t o, std::int64_t ai, std::int64_t bi) {
        const double* gp = g.data() + o * o_block;
        const double* ap = as->value.data() + ai * a_block;
        const double* bp = bs->value.data() + bi * b_block;
        if (need_a) {
          double* agp = as->grad.data() + ai * a_block;
          if (!trans_a) {
            // dA = dC . Bop^T
            gemm_accum(gp, bp, agp, m, ka, nn, false, !trans_b);
          } else {
            // dA = Bop . dC^T
            gemm_accum(bp, gp, agp, ka, m, nn, trans_b, true);
          }
        }
        if (need_b) {
          double* bgp = bs->grad.data() + bi * b_block;
          if (!trans_b) {
            // dB = Aop^T . dC
            gemm_accum(ap, gp, bgp, ka, nn, m, !trans_a, false);
          } else {
            // dB = dC^T . Aop
            gemm_accum(gp, ap, bgp, nn, ka, m, true, trans_a);
          }
        }
      });
    });
  }
  maybe_check(out, "matmul");
  return out;
}

Tensor reduce(const Tensor& x, int axis, Reduce kind, bool keepdim) {
  const auto& sh = x.shape();
  if (axis < 0 || axis >= static_cast<int>(sh.size())) {
    throw std::invalid_argument("reduce: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(sh));
  }
  const std::int64_t extent = sh[static_cast<std::size_t>(axis)];
  if (extent == 0) throw std::invalid_argument("reduce over empty axis");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < sh.size(); ++i) inner *= sh[i];

  Shape out_shape;
  for (int i = 0; i < static_cast<int>(sh.size()); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(sh[static_cast<std::size_t>(i)]);
    }
  }

  const auto& xv = x.data();
  std::vector<double> out_v(static_cast<std::size_t>(outer * inner), 0.0);
  std::vector<std::int64_t> argmax;
  if (kind == Reduce::max) argmax.assign(static_cast<std::size_t>(outer * inner), 0);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * extent * inner + in;
      if (kind == Reduce::max) {
        double best = xv[base];
        std::int64_t best_i = 0;
        for (std::int64_t e = 1; e < extent; ++e) {
          const double v = xv[base + e * inner];
          if (v > best) {
            best = v;
            best_i = e;
          }
        }
        out_v[o * inner + in] = best;
        argmax[o * inner + in] = best_i;
      } else {
        double acc = 0.0;
        for (std::int64_t e = 0; e < extent; ++e) acc += xv[base + e * inner];
        out_v[o * inner + in] = kind == Reduce::mean ? acc / static_cast<double>(extent) : acc;
      }
    }
  }

  Tensor out = Tensor::from_data(out_shape, std::move(out_v));
  if (recording_for({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto os = out.storage();
    Tape::active()->record(os, [xs, os, kind, outer, inner, extent, argmax = std::move(argmax)]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      const auto& g = os->grad;
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * extent * inner + in;
          const double gv = g[o * inner + in];
          switch (kind) {
            case Reduce::sum:
              for (std::int64_t e = 0; e < extent; ++e) xs->grad[base + e * inner] += gv;
              break;
            case Reduce::mean: {
              const double s = gv / static_cast<double>(extent);
              for (std::int64_t e = 0; e < extent; ++e) xs->grad[base + e * inner] += s;
              break;
            }
            case Reduce::max:
              xs->grad[base + argmax[o * inner + in] * inner] += gv;
              break;
          }
        }
      }
    });
  }
  maybe_check(out, "reduce");
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor flat = reshape(x, {x.numel()});
  return reduce(flat, 0, Reduce::sum, true);
}

std::pair<Tensor, Tensor> split2(const Tensor& x, int axis) {
  const auto& sh = x.shape();
  if (axis < 0 || axis >= static_cast<int>(sh.size())) {
    throw std::invalid_argument("split2: axis out of range for shape " + shape_str(sh));
  }
  const std::int64_t extent = sh[static_cast<std::size_t>(axis)];
  if (extent % 2 != 0) {
    throw std::invalid_argument("split2: odd extent " + std::to_string(extent) + " along axis " +
                                std::to_string(axis));
  }
  const std::int64_t half = extent / 2;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < sh.size(); ++i) inner *= sh[i];

  Shape out_shape = sh;
  out_shape[static_cast<std::size_t>(axis)] = half;
  const auto& xv = x.data();
  std::vector<double> a_v(static_cast<std::size_t>(outer * half * inner));
  std::vector<double> b_v(a_v.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    const std::int64_t src = o * extent * inner;
    const std::int64_t dst = o * half * inner;
    std::copy_n(xv.begin() + src, half * inner, a_v.begin() + dst);
    std::copy_n(xv.begin() + src + half * inner, half * inner, b_v.begin() + dst);
  }
  Tensor a_t = Tensor::from_data(out_shape, std::move(a_v));
  Tensor b_t = Tensor::from_data(out_shape, std::move(b_v));
  if (recording_for({&x})) {
    a_t.set_requires_grad(true);
    b_t.set_requires_grad(true);
    auto xs = x.storage();
    auto as = a_t.storage();
    auto bs = b_t.storage();
    auto scatter = [xs, outer, inner, half, extent](const Storage& out_s, std::int64_t offset) {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        const std::int64_t dst = o * extent * inner + offset * inner;
        const std::int64_t src = o * half * inner;
        for (std::int64_t i = 0; i < half * inner; ++i) xs->grad[dst + i] += out_s.grad[src + i];
      }
    };
    Tape::active()->record(as, [as, scatter]() { scatter(*as, 0); });
    Tape::active()->record(bs, [bs, scatter, half]() { scatter(*bs, half); });
  }
  return {a_t, b_t};
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const auto& sh0 = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int>(sh0.size())) {
    throw std::invalid_argument("concat: axis out of range for shape " + shape_str(sh0));
  }
  std::int64_t total = 0;
  for (const auto& t : xs) {
    const auto& sh = t.shape();
    if (sh.size() != sh0.size()) {
      throw std::invalid_argument("concat: rank mismatch " + shape_str(sh) + " vs " +
                                  shape_str(sh0));
    }
    for (std::size_t i = 0; i < sh.size(); ++i) {
      if (static_cast<int>(i) != axis && sh[i] != sh0[i]) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(sh) + " vs " +
                                    shape_str(sh0));
      }
    }
    total += sh[static_cast<std::size_t>(axis)];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh0[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < sh0.size(); ++i) inner *= sh0[i];

  Shape out_shape = sh0;
  out_shape[static_cast<std::size_t>(axis)] = total;
  std::vector<double> out_v(static_cast<std::size_t>(outer * total * inner));
  std::int64_t offset = 0;
  for (const auto& t : xs) {
    const std::int64_t ext = t.shape()[static_cast<std::size_t>(axis)];
    const auto& tv = t.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(tv.begin() + o * ext * inner, ext * inner,
                  out_v.begin() + o * total * inner + offset * inner);
    }
    offset += ext;
  }

  Tensor out = Tensor::from_data(out_shape, std::move(out_v));
  bool any_grad = false;
  for (const auto& t : xs) any_grad = any_grad || t.requires_grad();
  if (Tape::active() != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<Storage>> ins;
    ins.reserve(xs.size());
    std::vector<std::int64_t> extents;
    for (const auto& t : xs) {
      ins.push_back(t.storage());
      extents.push_back(t.shape()[static_cast<std::size_t>(axis)]);
    }
    auto os = out.storage();
    Tape::active()->record(os, [ins, extents, os, outer, inner, total]() {
      const auto& g = os->grad;
      std::int64_t off = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const std::int64_t ext = extents[k];
        if (ins[k]->requires_grad) {
          ins[k]->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            const std::int64_t src = o * total * inner + off * inner;
            const std::int64_t dst = o * ext * inner;
            for (std::int64_t i = 0; i < ext * inner; ++i) ins[k]->grad[dst + i] += g[src + i];
          }
        }
        off += ext;
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor out = Tensor::from_data(shape, x.data());
  if (recording_for({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto os = out.storage();
    Tape::active()->record(os, [xs, os]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  const auto& sh = x.shape();
  const int rank = static_cast<int>(sh.size());
  if (static_cast<int>(perm.size()) != rank) {
    throw std::invalid_argument("transpose: permutation rank mismatch");
  }
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (int p : perm) {
    if (p < 0 || p >= rank || seen[static_cast<std::size_t>(p)]) {
      throw std::invalid_argument("transpose: invalid permutation");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) out_shape[static_cast<std::size_t>(i)] = sh[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

  std::vector<std::int64_t> in_stride(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i) {
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i + 1)] * sh[static_cast<std::size_t>(i + 1)];
  }
  // stride of the input walked in output order
  std::vector<std::int64_t> walk(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    walk[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }

  const std::int64_t n = x.numel();
  const auto& xv = x.data();
  std::vector<double> out_v(static_cast<std::size_t>(n));
  std::vector<std::int64_t> src_index(static_cast<std::size_t>(n));
  {
    std::vector<std::int64_t> counter(static_cast<std::size_t>(rank), 0);
    std::int64_t si = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      out_v[i] = xv[si];
      src_index[i] = si;
      for (int ax = rank - 1; ax >= 0; --ax) {
        ++counter[static_cast<std::size_t>(ax)];
        si += walk[static_cast<std::size_t>(ax)];
        if (counter[static_cast<std::size_t>(ax)] < out_shape[static_cast<std::size_t>(ax)]) break;
        si -= walk[static_cast<std::size_t>(ax)] * out_shape[static_cast<std::size_t>(ax)];
        counter[static_cast<std::size_t>(ax)] = 0;
      }
    }
  }

  Tensor out = Tensor::from_data(out_shape, std::move(out_v));
  if (recording_for({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto os = out.storage();
    Tape::active()->record(os, [xs, os, src_index = std::move(src_index), n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) xs->grad[src_index[i]] += os->grad[i];
    });
  }
  return out;
}

Tensor pick(const Tensor& x, const std::vector<std::int64_t>& flat_indices) {
  const std::int64_t n = x.numel();
  std::vector<double> out_v(flat_indices.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    const std::int64_t idx = flat_indices[i];
    if (idx < 0 || idx >= n) throw std::out_of_range("pick: flat index out of range");
    out_v[i] = xv[static_cast<std::size_t>(idx)];
  }
  Tensor out = Tensor::from_data({static_cast<std::int64_t>(flat_indices.size())}, std::move(out_v));
  if (recording_for({&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage();
    auto os = out.storage();
    Tape::active()->record(os, [xs, os, idx = flat_indices]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        xs->grad[static_cast<std::size_t>(idx[i])] += os->grad[i];
      }
    });
  }
  return out;
}

}  // namespace branchkit::ad
