#include "branchkit/profiler.hpp"

#include <cmath>
#include <sstream>

#include "branchkit/ctc.hpp"
#include "json.hpp"

namespace branchkit::prof {

using nn::EncoderConfig;
using nn::LayerKind;

namespace {

std::int64_t linear_params(std::int64_t d_in, std::int64_t d_out, bool bias = true) {
  return d_in * d_out + (bias ? d_out : 0);
}

std::int64_t norm_params(std::int64_t d) { return 2 * d; }

std::int64_t ffn_params(const EncoderConfig& c) {
  return linear_params(c.d, c.d_ff()) + linear_params(c.d_ff(), c.d);
}

std::int64_t mha_params(const EncoderConfig& c) {
  return 4 * linear_params(c.d, c.d) + c.d * c.d /* wpos, no bias */ + 2 * c.d /* u, v */;
}

std::int64_t conv_module_params(const EncoderConfig& c) {
  return linear_params(c.d, 2 * c.d) + (c.d * c.k_conv + c.d) + norm_params(c.d) +
         linear_params(c.d, c.d);
}

std::int64_t cgmlp_params(const EncoderConfig& c) {
  const std::int64_t half = c.d_mlp() / 2;
  return norm_params(c.d) + linear_params(c.d, c.d_mlp()) + norm_params(half) +
         (half * c.k_mlp + half) + (c.cgmlp_gate_bias ? half : 0) + linear_params(half, c.d);
}

std::int64_t merge_params(const EncoderConfig& c) {
  return (2 * c.d * c.k_merge + 2 * c.d) + linear_params(2 * c.d, c.d);
}

std::int64_t layer_norm_count(const EncoderConfig& c) {
  // Layer-level norms: pre-FFN1, pre-MHA, pre-FFN2, final, plus pre-Conv for
  // Conformer. The cgMLP-internal norms are counted inside the cgMLP row.
  return c.kind == LayerKind::conformer ? 5 : 4;
}

std::int64_t subsample_params(const EncoderConfig& c) {
  const std::int64_t f2 = nn::subsampled_extent(c.feat_dim);
  return (c.d * 1 * 9 + c.d) + (c.d * c.d * 9 + c.d) + linear_params(c.d * f2, c.d);
}

struct MacBreakdown {
  std::int64_t subsample = 0;
  std::int64_t ffn = 0;
  std::int64_t mha = 0;
  std::int64_t conv_module = 0;
  std::int64_t cgmlp = 0;
  std::int64_t merge = 0;

  std::int64_t total() const { return subsample + ffn + mha + conv_module + cgmlp + merge; }
};

MacBreakdown mac_breakdown(const EncoderConfig& c, std::int64_t frames) {
  MacBreakdown m;
  const std::int64_t t1 = (frames - 3) / 2 + 1;
  const std::int64_t f1 = (c.feat_dim - 3) / 2 + 1;
  const std::int64_t t  = nn::subsampled_extent(frames);
  const std::int64_t f2 = nn::subsampled_extent(c.feat_dim);
  m.subsample = t1 * f1 * c.d * 1 * 9 + t * f2 * c.d * c.d * 9 + t * (c.d * f2) * c.d;

  const std::int64_t layers = c.num_layers;
  m.ffn = layers * 2 * (2 * t * c.d * c.d_ff());
  // q,k,v,out projections (4 T d^2), positional projection over the 2T-1
  // relative offsets ((2T-1) d^2), content scores + context (2 T^2 d),
  // relative-position scores (T^2 d).
  m.mha = layers * (4 * t * c.d * c.d + (2 * t - 1) * c.d * c.d + 3 * t * t * c.d);
  if (c.kind == LayerKind::conformer) {
    m.conv_module = layers * (t * c.d * 2 * c.d + t * c.d * c.k_conv + t * c.d * c.d);
  } else {
    const std::int64_t half = c.d_mlp() / 2;
    m.cgmlp = layers * (t * c.d * c.d_mlp() + t * half * c.k_mlp + t * half * c.d);
    m.merge = layers * (t * 2 * c.d * c.k_merge + t * 2 * c.d * c.d);
  }
  return m;
}

const char* kConventions =
    "MACs count multiplies in matmuls and convolutions only; activations, "
    "normalizations, softmax and bias adds are excluded. Frontend: log-Mel "
    "frames at the stated rate, two 3x3 stride-2 valid convolutions plus an "
    "output linear. Parameter scope: frontend + encoder + CTC head; MAC "
    "scope: frontend + encoder.";

}  // namespace

std::int64_t count_params(const EncoderConfig& c, std::int64_t vocab) {
  std::int64_t per_layer = 2 * ffn_params(c) + mha_params(c) +
                           layer_norm_count(c) * norm_params(c.d);
  per_layer += c.kind == LayerKind::conformer ? conv_module_params(c)
                                              : cgmlp_params(c) + merge_params(c);
  return subsample_params(c) + c.num_layers * per_layer + linear_params(c.d, vocab + 1);
}

std::int64_t count_params_enumerated(const EncoderConfig& cfg, std::int64_t vocab) {
  std::mt19937_64 rng(1);
  nn::EncoderParams enc = nn::EncoderParams::init(cfg, rng);
  ctc::CtcHead head = ctc::CtcHead::init(cfg.d, vocab, rng);
  nn::ParamMap params;
  enc.collect("encoder", params);
  head.collect("ctc_head", params);
  std::int64_t total = 0;
  for (const auto& [name, tensor] : params) {
    if (tensor.requires_grad()) total += tensor.numel();  // buffers are not parameters
  }
  return total;
}

std::int64_t count_macs(const EncoderConfig& cfg, std::int64_t frames) {
  return mac_breakdown(cfg, frames).total();
}

std::int64_t mac_oracle(const EncoderConfig& cfg, std::int64_t frames) {
  std::mt19937_64 rng(1);
  nn::EncoderParams enc = nn::EncoderParams::init(cfg, rng);
  ad::Tensor feats = ad::Tensor::zeros({1, frames, cfg.feat_dim});
  ad::reset_mac_count();
  ad::set_mac_counting(true);
  nn::encoder_forward(feats, {frames}, enc, nn::Mode::eval, nullptr);
  ad::set_mac_counting(false);
  return ad::mac_count();
}

ProfileReport profile_report(const EncoderConfig& cfg, const std::string& model_name,
                             double seconds, std::int64_t frame_rate, std::int64_t vocab) {
  ProfileReport r;
  r.model = model_name;
  r.assumptions.seconds = seconds;
  r.assumptions.frame_rate = frame_rate;
  r.assumptions.frames = static_cast<std::int64_t>(std::llround(seconds * static_cast<double>(frame_rate)));
  r.assumptions.subsampled_frames = nn::subsampled_extent(r.assumptions.frames);
  r.assumptions.feat_dim = cfg.feat_dim;
  r.assumptions.vocab = vocab;
  r.assumptions.conventions = kConventions;

  const MacBreakdown m = mac_breakdown(cfg, r.assumptions.frames);
  const std::int64_t layers = cfg.num_layers;
  r.modules.push_back({"frontend.subsampling", subsample_params(cfg), m.subsample});
  r.modules.push_back({"encoder.ffn", layers * 2 * ffn_params(cfg), m.ffn});
  r.modules.push_back({"encoder.mha", layers * mha_params(cfg), m.mha});
  if (cfg.kind == LayerKind::conformer) {
    r.modules.push_back({"encoder.conv_module", layers * conv_module_params(cfg), m.conv_module});
  } else {
    r.modules.push_back({"encoder.cgmlp", layers * cgmlp_params(cfg), m.cgmlp});
    r.modules.push_back({"encoder.merge", layers * merge_params(cfg), m.merge});
  }
  r.modules.push_back(
      {"encoder.layer_norms", layers * layer_norm_count(cfg) * norm_params(cfg.d), 0});
  r.modules.push_back({"ctc_head", linear_params(cfg.d, vocab + 1), 0});
  for (const auto& row : r.modules) {
    r.total_params += row.params;
    r.total_macs += row.macs;
  }
  return r;
}

std::string ProfileReport::to_text() const {
  std::ostringstream os;
  os << "model: " << model << "\n";
  os << "input: " << assumptions.seconds << " s @ " << assumptions.frame_rate
     << " frames/s -> " << assumptions.frames << " frames (" << assumptions.subsampled_frames
     << " after subsampling), " << assumptions.feat_dim << " mel bins, vocab "
     << assumptions.vocab << "\n";
  os << "conventions: " << assumptions.conventions << "\n\n";
  char line[128];
  std::snprintf(line, sizeof(line), "%-24s %14s %16s\n", "module", "params", "macs");
  os << line;
  for (const auto& row : modules) {
    std::snprintf(line, sizeof(line), "%-24s %14lld %16lld\n", row.name.c_str(),
                  static_cast<long long>(row.params), static_cast<long long>(row.macs));
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-24s %14lld %16lld\n", "total",
                static_cast<long long>(total_params), static_cast<long long>(total_macs));
  os << line;
  std::snprintf(line, sizeof(line), "\nparams: %.2f M   macs: %.2f G\n",
                static_cast<double>(total_params) / 1e6, static_cast<double>(total_macs) / 1e9);
  os << line;
  return os.str();
}

std::string ProfileReport::to_json() const {
  nlohmann::json j;
  j["model"] = model;
  j["assumptions"] = {{"seconds", assumptions.seconds},
                      {"frame_rate", assumptions.frame_rate},
                      {"frames", assumptions.frames},
                      {"subsampled_frames", assumptions.subsampled_frames},
                      {"feat_dim", assumptions.feat_dim},
                      {"vocab", assumptions.vocab},
                      {"conventions", assumptions.conventions}};
  j["modules"] = nlohmann::json::array();
  for (const auto& row : modules) {
    j["modules"].push_back({{"name", row.name}, {"params", row.params}, {"macs", row.macs}});
  }
  j["totals"] = {{"params", total_params}, {"macs", total_macs}};
  return j.dump(2);
}

}  // namespace branchkit::prof
