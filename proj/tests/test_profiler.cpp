#include <random>

#include "branchkit/profiler.hpp"
#include "branchkit/verify.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace branchkit;
using ad::Tensor;

TEST_CASE("parameter counting building blocks") {
  std::mt19937_64 rng(1);
  // single linear 4 -> 8 with bias: 40 parameters
  nn::LinearParams lin = nn::LinearParams::init(4, 8, true, rng);
  nn::ParamMap pm;
  lin.collect("lin", pm);
  std::int64_t total = 0;
  for (auto& [n, t] : pm) total += t.numel();
  CHECK(total == 40);

  // layer_norm over d=256: gain + shift = 512
  nn::LayerNormParams ln = nn::LayerNormParams::init(256);
  pm.clear();
  ln.collect("ln", pm);
  total = 0;
  for (auto& [n, t] : pm) total += t.numel();
  CHECK(total == 512);
}

TEST_CASE("mac counting conventions") {
  std::mt19937_64 rng(2);
  // single linear over 250 frames, 256 -> 1024: 65,536,000 multiplies
  nn::LinearParams lin = nn::LinearParams::init(256, 1024, true, rng);
  Tensor x = Tensor::zeros({1, 250, 256});
  ad::reset_mac_count();
  ad::set_mac_counting(true);
  nn::linear(x, lin);
  ad::set_mac_counting(false);
  CHECK(ad::mac_count() == 65536000);

  // depthwise conv, T=250, c=512, k=31: 3,968,000
  nn::DepthwiseConvParams dw = nn::DepthwiseConvParams::init(512, 31, rng);
  Tensor y = Tensor::zeros({1, 250, 512});
  ad::reset_mac_count();
  ad::set_mac_counting(true);
  nn::depthwise_conv1d(y, dw, nn::SeqMask::full(1, 250));
  ad::set_mac_counting(false);
  CHECK(ad::mac_count() == 3968000);
}

TEST_CASE("reference-scale accounting") {
  // reference totals for the medium configs, 10 s of audio at 100 frames/s
  nn::EncoderConfig deep = nn::EncoderConfig::preset("medium-conformer-deep");
  const double deep_gmacs = static_cast<double>(prof::count_macs(deep, 1000)) / 1e9;
  CHECK(deep_gmacs == doctest::Approx(10.3).epsilon(0.10));

  nn::EncoderConfig ebf = nn::EncoderConfig::preset("medium-ebranchformer");
  const double ebf_gmacs = static_cast<double>(prof::count_macs(ebf, 1000)) / 1e9;
  CHECK(ebf_gmacs == doctest::Approx(9.9).epsilon(0.10));

  // 25.8M / 25.3M parameters with a 500-token CTC head
  CHECK(static_cast<double>(prof::count_params(deep, 500)) / 1e6 ==
        doctest::Approx(25.8).epsilon(0.03));
  CHECK(static_cast<double>(prof::count_params(ebf, 500)) / 1e6 ==
        doctest::Approx(25.3).epsilon(0.03));
}

TEST_CASE("report structure") {
  nn::EncoderConfig cfg = nn::EncoderConfig::preset("medium-ebranchformer");
  const auto report = prof::profile_report(cfg, "medium-ebranchformer", 10.0, 100, 500);
  CHECK(report.assumptions.frames == 1000);
  CHECK(report.assumptions.subsampled_frames == 249);

  std::int64_t params = 0, macs = 0;
  for (const auto& row : report.modules) {
    params += row.params;
    macs += row.macs;
  }
  CHECK(params == report.total_params);
  CHECK(macs == report.total_macs);
  CHECK(report.total_params == prof::count_params(cfg, 500));
  CHECK(report.total_macs == prof::count_macs(cfg, 1000));

  const auto j = nlohmann::json::parse(report.to_json());
  CHECK(j.contains("assumptions"));
  CHECK(j.contains("modules"));
  CHECK(j["totals"].contains("params"));
  CHECK(j["totals"].contains("macs"));
  CHECK(j["modules"].is_array());
  CHECK(j["modules"][0].contains("name"));
  CHECK(j["modules"][0].contains("params"));
  CHECK(j["modules"][0].contains("macs"));

  // two configs differing in one knob differ only in the affected module rows
  nn::EncoderConfig wider = cfg;
  wider.mlp_expansion = 6.0;
  const auto other = prof::profile_report(wider, "x", 10.0, 100, 500);
  REQUIRE(other.modules.size() == report.modules.size());
  for (std::size_t i = 0; i < report.modules.size(); ++i) {
    if (report.modules[i].name == "encoder.cgmlp") {
      CHECK(other.modules[i].params > report.modules[i].params);
      CHECK(other.modules[i].macs > report.modules[i].macs);
    } else {
      CHECK(other.modules[i].params == report.modules[i].params);
      CHECK(other.modules[i].macs == report.modules[i].macs);
    }
  }
}

TEST_CASE("profiler exactness and properties") {
  auto exact = verify::check_profiler_exactness(false);
  CHECK_MESSAGE(exact.pass, exact.detail);
  auto props = verify::check_profiler_properties();
  CHECK_MESSAGE(props.pass, props.detail);
}
