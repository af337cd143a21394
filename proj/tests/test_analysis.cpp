#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "hadanet/analysis.hpp"
#include "hadanet/network.hpp"
#include "hadanet/packing.hpp"

using hadanet::Tensor;

TEST_CASE("angle study returns exactly zero at beta 1") {
  const auto records = hadanet::angle_study(512, {1}, 50, 42);
  REQUIRE(records.size() == 1);
  REQUIRE(records[0].mean_deg == 0.0);
  REQUIRE(records[0].stderr_deg == 0.0);
}

TEST_CASE("angle study saturates at the single-scale limit") {
  // arccos(sqrt(2/pi)) ~ 37.04 degrees for one scale per whole vector
  const std::size_t n = 100000;
  const auto records = hadanet::angle_study(n, {n}, 10, 7);
  REQUIRE_THAT(records[0].mean_deg, Catch::Matchers::WithinAbs(37.0, 1.0));
}

TEST_CASE("mean angle is non-decreasing in beta") {
  const auto records =
      hadanet::angle_study(4096, {1, 2, 4, 8, 16, 32}, 100, 11);
  for (std::size_t i = 1; i < records.size(); ++i)
    REQUIRE(records[i].mean_deg >= records[i - 1].mean_deg);
}

TEST_CASE("angle study validates parameters") {
  REQUIRE_THROWS_AS(hadanet::angle_study(16, {32}, 5, 1),
                    hadanet::AnalysisError);
  REQUIRE_THROWS_AS(hadanet::angle_study(16, {4}, 0, 1),
                    hadanet::AnalysisError);
}

TEST_CASE("angle CSV contract") {
  std::ostringstream os;
  hadanet::write_angle_csv(hadanet::angle_study(64, {1, 4}, 5, 3), os);
  const std::string text = os.str();
  REQUIRE(text.rfind("beta,n,trials,mean_deg,stderr\n", 0) == 0);
}

TEST_CASE("pearson matches a brute-force covariance oracle") {
  std::mt19937 rng(21);
  std::uniform_real_distribution<float> dist(-5.0f, 5.0f);
  std::vector<float> x(4000), y(4000);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = dist(rng);
    y[i] = 0.25f * x[i] + dist(rng);
  }
  double r = 0.0;
  REQUIRE(hadanet::pearson(x, y, r));

  // brute force: expand the covariance sums directly
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += double(x[i]) * x[i];
    syy += double(y[i]) * y[i];
    sxy += double(x[i]) * y[i];
  }
  const double oracle = (sxy - sx * sy / n) /
                        std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
  REQUIRE_THAT(r, Catch::Matchers::WithinAbs(oracle, 1e-10));
}

TEST_CASE("pearson is undefined for constant input") {
  std::vector<float> x(10, 3.0f), y(10);
  std::iota(y.begin(), y.end(), 0.0f);
  double r = 0.0;
  REQUIRE_FALSE(hadanet::pearson(x, y, r));
}

TEST_CASE("single-layer memory ratio at beta 16") {
  const hadanet::MemoryReport rep =
      hadanet::memory_saving({{"layer", 1000000, true}}, 16, 32);
  REQUIRE_THAT(rep.ratio, Catch::Matchers::WithinRel(32.0 * 16 / 48.0, 0.01));
  REQUIRE_THAT(rep.ratio, Catch::Matchers::WithinRel(10.67, 0.01));
}

TEST_CASE("reference architecture ratios match the published accounting") {
  const double resnet =
      hadanet::memory_saving(hadanet::resnet18_table(), 16).ratio;
  REQUIRE_THAT(resnet, Catch::Matchers::WithinRel(7.43, 0.10));
  const double alexnet =
      hadanet::memory_saving(hadanet::alexnet_table(), 16).ratio;
  REQUIRE_THAT(alexnet, Catch::Matchers::WithinRel(6.51, 0.10));
}

TEST_CASE("memory accounting agrees with actually serialized payloads") {
  // the formula against the packed representation's real byte count
  const std::size_t params = 200000, rows = 100, cols = 2000;
  for (std::size_t beta : {4ul, 16ul, 32ul}) {
    Tensor w({rows, cols});
    for (std::size_t i = 0; i < w.numel(); ++i)
      w[i] = static_cast<float>((i % 13)) - 6.0f;
    const auto packed = hadanet::pack_matrix(w, beta);
    const double formula =
        static_cast<double>(params) *
        (1.0 / static_cast<double>(beta) + 1.0 / 32.0) * 4.0;
    const double actual = static_cast<double>(packed.payload_bytes());
    REQUIRE(std::fabs(actual - formula) / formula < 0.02);
  }
}

TEST_CASE("memory_saving validates inputs") {
  REQUIRE_THROWS_AS(hadanet::memory_saving({{"l", 10, true}}, 16, 12),
                    hadanet::AnalysisError);
  REQUIRE_THROWS_AS(hadanet::memory_saving({{"l", 0, true}}, 16, 32),
                    hadanet::AnalysisError);
}

TEST_CASE("memory CSV contract") {
  std::ostringstream os;
  hadanet::write_memory_csv(
      hadanet::memory_saving(hadanet::alexnet_table(), 16), os);
  REQUIRE(os.str().rfind("layer,params,beta_w,dense_bytes,packed_bytes,ratio\n",
                         0) == 0);
}

namespace {

hadanet::Network tiny_lenet(std::size_t beta_w, std::size_t beta_a) {
  hadanet::TrainConfig cfg;
  cfg.conv1_filters = 4;
  cfg.conv2_filters = 8;
  cfg.fc_hidden = 32;
  cfg.beta_w = static_cast<int>(beta_w);
  cfg.beta_a = static_cast<int>(beta_a);
  hadanet::Network net(hadanet::lenet_specs(cfg));
  net.init_params(5);
  return net;
}

}  // namespace

TEST_CASE("correlation study: the identity cell correlates at 1") {
  hadanet::Network net = tiny_lenet(4, 4);
  const hadanet::DataSplit batch = hadanet::synthetic_digits(64, 3);
  const auto widths = hadanet::hada_input_widths(net, batch.images);
  const auto records =
      hadanet::correlation_study(net, {1}, {1}, batch.images, widths);
  REQUIRE_FALSE(records.empty());
  for (const auto& rec : records) {
    REQUIRE(rec.valid);
    REQUIRE_THAT(rec.r, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("correlation study covers the grid and stays in range") {
  hadanet::Network net = tiny_lenet(2, 2);
  const hadanet::DataSplit batch = hadanet::synthetic_digits(32, 4);
  const auto widths = hadanet::hada_input_widths(net, batch.images);
  const auto records =
      hadanet::correlation_study(net, {1, 4}, {1, 4}, batch.images, widths);
  // two inner layers (conv2, fc1) x 4 cells
  REQUIRE(records.size() == 8);
  for (const auto& rec : records) {
    REQUIRE(rec.valid);
    REQUIRE(rec.r <= 1.0 + 1e-9);
    REQUIRE(rec.r >= -1.0 - 1e-9);
  }
  // the betas the network was built with are restored afterwards
  for (std::size_t idx : net.hada_layer_indices()) {
    const auto& s = net.layers()[idx]->spec();
    const bool edge = idx == net.hada_layer_indices().front() ||
                      idx == net.hada_layer_indices().back();
    if (!edge) {
      REQUIRE(s.beta_w == 2);
      REQUIRE(s.beta_a == 2);
    }
  }
}

TEST_CASE("correlation CSV contract") {
  hadanet::Network net = tiny_lenet(2, 2);
  const hadanet::DataSplit batch = hadanet::synthetic_digits(16, 5);
  const auto widths = hadanet::hada_input_widths(net, batch.images);
  std::ostringstream os;
  hadanet::write_correlation_csv(
      hadanet::correlation_study(net, {1, 2}, {1, 2}, batch.images, widths),
      os);
  REQUIRE(os.str().rfind("layer,beta_w,beta_a,pearson_r\n", 0) == 0);
}

TEST_CASE("square of a double sum round-trips through sqrt") {
  // the identity the exact-zero angle at beta 1 rests on
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> dist(1e-3, 1e6);
  for (int i = 0; i < 1000000; ++i) {
    const double x = dist(rng);
    REQUIRE(std::sqrt(x * x) == x);
  }
}
