#include "iflds/rand_dist.hpp"
#include "oracles.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <doctest.h>

#include <cmath>
#include <vector>

using namespace iflds;

namespace {

constexpr std::size_t kDraws = 100000;
constexpr double kKsLevel = 0.001;

}  // namespace

TEST_CASE("identical seed and stream reproduce the sequence") {
  RngHandle a(42, 7), b(42, 7), c(42, 8);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    double x = a.normal();
    CHECK(x == b.normal());
    differs |= (x != c.normal());
  }
  CHECK(differs);
}

TEST_CASE("distinct streams are uncorrelated") {
  RngHandle a(1, 0), b(1, 1);
  double sxy = 0.0;
  for (std::size_t i = 0; i < kDraws; ++i) sxy += a.normal() * b.normal();
  // correlation SE is 1/sqrt(N)
  CHECK(std::abs(sxy / kDraws) < 4.0 / std::sqrt(double(kDraws)));
}

TEST_CASE("uniform, normal and gamma pass KS") {
  RngHandle rng(3, 0);
  std::vector<double> u(kDraws), z(kDraws), g(kDraws), gs(kDraws);
  for (std::size_t i = 0; i < kDraws; ++i) {
    u[i] = rng.uniform();
    CHECK_UNARY(u[i] > 0.0);
    CHECK_UNARY(u[i] < 1.0);
    z[i] = rng.normal();
    g[i] = rng.gamma(2.5);
    gs[i] = rng.gamma(0.3);
  }
  CHECK(oracle::ks_pvalue(oracle::ks_statistic(u, [](double x) { return x; }), kDraws) > kKsLevel);
  CHECK(oracle::ks_pvalue(oracle::ks_statistic(z, [](double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }), kDraws) > kKsLevel);
  CHECK(oracle::ks_pvalue(oracle::ks_statistic(g, [](double x) { return boost::math::gamma_p(2.5, x); }), kDraws) > kKsLevel);
  CHECK(oracle::ks_pvalue(oracle::ks_statistic(gs, [](double x) { return boost::math::gamma_p(0.3, x); }), kDraws) > kKsLevel);
}

TEST_CASE("mv gaussian examples") {
  RngHandle rng(5, 0);
  SUBCASE("zero covariance is deterministic") {
    MvGaussian d{Eigen::Vector2d::Zero(), Eigen::Matrix2d::Zero()};
    for (int i = 0; i < 100; ++i) CHECK(sample_mv_gaussian(d, rng).isZero(0.0));
  }
  SUBCASE("unit covariance mean") {
    MvGaussian d{Eigen::Vector2d(1, 2), Eigen::Matrix2d::Identity()};
    Eigen::Vector2d s = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < kDraws; ++i) s += sample_mv_gaussian(d, rng);
    s /= double(kDraws);
    CHECK(std::abs(s(0) - 1.0) < 0.02);
    CHECK(std::abs(s(1) - 2.0) < 0.02);
  }
  SUBCASE("0.01 I variance") {
    MvGaussian d{Eigen::Vector2d::Zero(), 0.01 * Eigen::Matrix2d::Identity()};
    Eigen::Vector2d s2 = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < kDraws; ++i) s2 += sample_mv_gaussian(d, rng).cwiseAbs2();
    s2 /= double(kDraws);
    CHECK(std::abs(s2(0) - 0.01) < 0.0005);
    CHECK(std::abs(s2(1) - 0.01) < 0.0005);
  }
  SUBCASE("tiny negative eigenvalue is clamped, larger is rejected") {
    Eigen::Matrix2d c;
    c << 1.0, 1.0, 1.0, 1.0 - 5e-11;
    MvGaussian ok{Eigen::Vector2d::Zero(), c};
    CHECK_NOTHROW(sample_mv_gaussian(ok, rng));
    MvGaussian bad{Eigen::Vector2d::Zero(), Eigen::Vector2d(1.0, -0.5).asDiagonal()};
    CHECK_THROWS_WITH_AS(sample_mv_gaussian(bad, rng), doctest::Contains("-0.5"),
                         NumericalError);
  }
}

TEST_CASE("beta means and KS") {
  RngHandle rng(11, 0);
  struct Case {
    double a, b, tol;
  };
  for (Case c : {Case{1, 1, 0.005}, Case{2, 0.1, 0.0}, Case{10, 1, 0.0}}) {
    std::vector<double> xs(kDraws);
    double sum = 0.0;
    for (auto& x : xs) {
      x = sample_beta(c.a, c.b, rng);
      REQUIRE(x > 0.0);
      REQUIRE(x < 1.0);
      sum += x;
    }
    double mean = sum / double(kDraws);
    double mu = c.a / (c.a + c.b);
    double var = c.a * c.b / ((c.a + c.b) * (c.a + c.b) * (c.a + c.b + 1));
    double tol = c.tol > 0 ? c.tol : 3.0 * std::sqrt(var / double(kDraws));
    CHECK(std::abs(mean - mu) < tol);
  }
  // KS on the mirrored shapes: Beta(2, 0.1) puts ~2.5% of its mass within
  // 1e-16 of 1, which doubles cannot resolve, so the tail is checked near 0.
  for (Case c : {Case{1, 1, 0}, Case{0.1, 2, 0}, Case{1, 10, 0}}) {
    std::vector<double> xs(kDraws);
    for (auto& x : xs) x = sample_beta(c.a, c.b, rng);
    double d = oracle::ks_statistic(xs, [&](double x) { return boost::math::ibeta(c.a, c.b, x); });
    INFO("beta(" << c.a << ", " << c.b << ") D=" << d);
    CHECK(oracle::ks_pvalue(d, kDraws) > kKsLevel);
  }
  CHECK_THROWS_AS(sample_beta(0.0, 1.0, rng), SpecError);
  CHECK_THROWS_AS(sample_beta(1.0, -2.0, rng), SpecError);
}

TEST_CASE("beta with a tiny shape stays inside the open interval") {
  RngHandle rng(12, 0);
  for (int i = 0; i < 10000; ++i) {
    double x = sample_beta(1e-6, 1.0 + 2000.0, rng);
    REQUIRE(x > 0.0);
    REQUIRE(x < 1.0);
  }
}

TEST_CASE("inverse Wishart mean with large dof") {
  RngHandle rng(13, 0);
  const double n0 = 60.0;
  Eigen::MatrixXd s0 = 2.0 * Eigen::MatrixXd::Identity(2, 2);
  s0(0, 1) = s0(1, 0) = 0.5;
  MniwPrior prior{Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Identity(2, 2), n0, s0};
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(2, 2);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto [a, sigma] = sample_mniw(prior, rng);
    REQUIRE(Eigen::LLT<Eigen::MatrixXd>(sigma).info() == Eigen::Success);
    acc += sigma;
  }
  acc /= n;
  Eigen::MatrixXd expected = s0 / (n0 - 2.0 - 1.0);
  CHECK((acc - expected).cwiseAbs().maxCoeff() < 0.05 * expected.cwiseAbs().maxCoeff());
}

TEST_CASE("huge column precision pins A to M0") {
  RngHandle rng(14, 0);
  Eigen::MatrixXd m0(2, 2);
  m0 << 0.9, -0.1, 0.2, 0.7;
  MniwPrior prior{m0, 1e8 * Eigen::MatrixXd::Identity(2, 2), 4.0,
                  0.75 * Eigen::MatrixXd::Identity(2, 2)};
  double spread = 0.0;
  for (int i = 0; i < 1000; ++i) {
    spread = std::max(spread, (sample_mniw(prior, rng).first - m0).cwiseAbs().maxCoeff());
  }
  CHECK(spread < 1e-3);
}

TEST_CASE("reference prior configuration is accepted; low dof is rejected") {
  RngHandle rng(15, 0);
  Eigen::MatrixXd sbar(2, 2);
  sbar << 0.3, 0.05, 0.05, 0.2;
  MniwPrior prior{Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Identity(2, 2), 4.0,
                  0.75 * sbar};
  CHECK_NOTHROW(sample_mniw(prior, rng));
  prior.n0 = 1.0;
  CHECK_THROWS_AS(sample_mniw(prior, rng), SpecError);
}

TEST_CASE("normal cdf and quantile") {
  CHECK(std_normal_cdf(0.0) == 0.5);
  CHECK(std::abs(std_normal_quantile(0.5)) < 1e-15);
  CHECK(std::abs(std_normal_cdf(1.96) - 0.9750) < 1e-4);
  double prev = -1.0;
  for (int i = 1; i < 1000; ++i) {
    double p = i / 1000.0;
    CHECK(std::abs(std_normal_cdf(std_normal_quantile(p)) - p) < 1e-10);
    double c = std_normal_cdf(-8.0 + 16.0 * i / 1000.0);
    CHECK(c >= prev);
    prev = c;
  }
  for (double p : {1e-12, 1e-6, 1.0 - 1e-9}) {
    CHECK(std::abs(std_normal_cdf(std_normal_quantile(p)) - p) < 1e-10);
  }
  CHECK_THROWS_AS(std_normal_quantile(0.0), SpecError);
  CHECK_THROWS_AS(std_normal_quantile(1.0), SpecError);
}

TEST_CASE("log categorical sampling") {
  RngHandle rng(16, 0);
  std::vector<double> lw = {std::log(0.2), -INFINITY, std::log(0.8)};
  int counts[3] = {0, 0, 0};
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[sample_log_categorical(lw, rng)]++;
  CHECK(counts[1] == 0);
  CHECK(std::abs(counts[0] / double(n) - 0.2) < 3 * std::sqrt(0.16 / n) + 1e-3);
  // shifting all weights by a constant changes nothing
  std::vector<double> shifted = {lw[0] - 800.0, -INFINITY, lw[2] - 800.0};
  CHECK_NOTHROW(sample_log_categorical(shifted, rng));
  std::vector<double> dead = {-INFINITY, -INFINITY};
  CHECK_THROWS_AS(sample_log_categorical(dead, rng), NumericalError);
  CHECK(log_sum_exp(std::vector<double>{-1000.0, -1000.0}) ==
        doctest::Approx(-1000.0 + std::log(2.0)));
}
