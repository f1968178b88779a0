#include "iflds/detect.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace iflds;

TEST_CASE("LLR quadratic form") {
  PredictiveLikelihood pred;
  pred.mean = Vec2::Zero();
  pred.cov = Mat2::Identity();
  CHECK(llr_value(pred, Vec2(1, 0), Vec2(1, 0)) == doctest::Approx(0.5));
  CHECK(llr_value(pred, Vec2::Zero(), Vec2(3, -2)) == 0.0);
  pred.mean = Vec2(0.3, -0.7);
  pred.cov << 2.0, 0.4, 0.4, 1.0;
  Vec2 y(0.48, 0.48);
  CHECK(std::abs(llr_value(pred, y, pred.mean + 0.5 * y)) < 1e-15);
}

TEST_CASE("FMA ring buffer") {
  SUBCASE("constant input") {
    FmaDetector d(5, 1e9);
    for (int t = 1; t <= 20; ++t) {
      d.update(0.25);
      if (t >= 5) CHECK(d.statistic() == doctest::Approx(1.25));
    }
  }
  SUBCASE("earliest legal alarm") {
    FmaDetector d(10, 0.0);
    for (int t = 1; t < 10; ++t) CHECK_FALSE(d.update(t == 1 ? 1e6 : -1.0));
    CHECK(d.update(1e6));
    CHECK(d.first_alarm() == 10u);
  }
  SUBCASE("matches brute-force window sums") {
    RngHandle rng(1, 0);
    const std::size_t w = 37;
    FmaDetector d(w, 1e300);
    std::vector<double> l;
    for (std::size_t t = 0; t < 10000; ++t) {
      l.push_back(rng.normal() * 3.0);
      d.update(l.back());
      double brute = 0.0;
      for (std::size_t i = (t + 1 >= w ? t + 1 - w : 0); i <= t; ++i) brute += l[i];
      REQUIRE(std::abs(d.statistic() - brute) < 1e-9);
      REQUIRE(std::abs(d.recomputed_statistic() - brute) < 1e-9);
    }
  }
  SUBCASE("keeps running after an alarm; reset clears") {
    FmaDetector d(2, 1.0);
    for (int i = 0; i < 6; ++i) d.update(1.0);
    CHECK(d.first_alarm() == 2u);
    CHECK(d.alarm_count() == 5u);
    d.reset();
    CHECK_FALSE(d.first_alarm().has_value());
    CHECK(d.statistic() == 0.0);
  }
  CHECK_THROWS_AS(FmaDetector(0, 1.0), SpecError);
}

TEST_CASE("CUSUM recursion equals the max form") {
  RngHandle rng(2, 0);
  for (int stream = 0; stream < 50; ++stream) {
    CusumDetector c(1e300);
    std::vector<double> l;
    for (std::size_t t = 0; t < 1000; ++t) {
      l.push_back(rng.normal() - 0.1);
      c.update(l.back());
      REQUIRE(c.statistic() == doctest::Approx(oracle::cusum_max_form(l, t)).epsilon(1e-12));
    }
  }
  SUBCASE("negative stream never fires") {
    CusumDetector c(0.1);
    for (int t = 0; t < 100; ++t) {
      double llr = -0.5 - rng.uniform();
      CHECK_FALSE(c.update(llr));
      CHECK(c.statistic() <= llr);
    }
  }
}

TEST_CASE("Shewhart guards and equivalence with a unit window") {
  CHECK_THROWS_AS(ShewhartDetector(-std::numeric_limits<double>::infinity()), SpecError);
  CHECK_THROWS_AS(ShewhartDetector(std::nan("")), SpecError);
  RngHandle rng(3, 0);
  for (int trial = 0; trial < 100; ++trial) {
    double h = 1.0 + rng.uniform();
    ShewhartDetector s(h);
    FmaDetector f(1, h);
    for (int t = 0; t < 500; ++t) {
      double l = rng.normal();
      REQUIRE(s.update(l) == f.update(l));
    }
    CHECK(s.first_alarm() == f.first_alarm());
  }
}

TEST_CASE("H0 moments") {
  auto z = h0_moments(Vec2::Zero(), Mat2::Identity());
  CHECK(z.mean == 0.0);
  CHECK(z.variance == 0.0);
  auto m = h0_moments(Vec2(1, 1), Mat2::Identity());
  CHECK(m.mean == doctest::Approx(-1.0));
  CHECK(m.variance == doctest::Approx(2.0));
  RngHandle rng(4, 0);
  for (int i = 0; i < 100; ++i) {
    Mat2 a;
    a << rng.normal(), rng.normal(), rng.normal(), rng.normal();
    Mat2 s = a * a.transpose() + 0.1 * Mat2::Identity();
    Vec2 y(rng.normal(), rng.normal());
    auto mom = h0_moments(y, s);
    CHECK(mom.variance == doctest::Approx(-2.0 * mom.mean).epsilon(1e-14));
  }
}

TEST_CASE("H1 mean recursion") {
  FldsModel model = reference_model(4);
  ForwardState conv = fkff_converged(model);
  Mat2 sp = fkff_peek(conv, model).cov;
  SUBCASE("zero waveform") {
    auto tr = h1_mean_recursion(model, conv.gain, sp, [](std::size_t) { return Vec2::Zero(); }, 50);
    for (std::size_t k = 0; k < 50; ++k) {
      CHECK(tr.error[k].isZero(0.0));
      CHECK(tr.mean[k] == 0.0);
    }
  }
  SUBCASE("memoryless source") {
    LdsParams s = rotation_source(0.0, 0.0);
    FldsModel m1{{s}, true};
    ForwardState c1 = fkff_converged(m1);
    Mat2 sp1 = fkff_peek(c1, m1).cov;
    Vec2 y(0.48, -0.2);
    auto tr = h1_mean_recursion(m1, c1.gain, sp1, [&](std::size_t) { return y; }, 20);
    double half = 0.5 * h0_moments(y, sp1).variance;
    for (std::size_t k = 0; k < 20; ++k) {
      CHECK((tr.error[k] - y).norm() == 0.0);
      CHECK(tr.mean[k] == doctest::Approx(half).epsilon(1e-14));
    }
  }
  SUBCASE("four sources settle on a plateau") {
    Vec2 y(0.48, 0.48);
    auto tr = h1_mean_recursion(model, conv.gain, sp, [&](std::size_t) { return y; }, 10000);
    REQUIRE(tr.converged_at.has_value());
    CHECK(*tr.converged_at < 10000u);
    auto h0 = h0_moments(y, sp);
    // the plateau sits between the H0 mean and the memoryless value
    CHECK(tr.converged_mean > h0.mean);
    CHECK(tr.converged_mean < 0.5 * h0.variance);
  }
  SUBCASE("divergence reports the closed-loop radius") {
    std::vector<Mat2> bad(4, 50.0 * Mat2::Identity());
    CHECK_THROWS_WITH_AS(
        h1_mean_recursion(model, bad, sp, [](std::size_t) { return Vec2(1, 1); }, 1000),
        doctest::Contains("spectral radius"), NumericalError);
  }
}

TEST_CASE("threshold formula") {
  PerfModel p;
  p.mu_h0 = -1.0;
  p.var_h0 = p.var_h1 = 2.0;
  p.mu_h1 = 0.6;
  p.window = 200;
  p.false_alarm_interval = 1000;
  SUBCASE("median level gives w mu") {
    p.false_alarm_interval = 4;
    p.alpha_tilde = 1.0 - 0.5 * 0.5 * 0.5 * 0.5;
    CHECK(fma_threshold(p) == doctest::Approx(200.0 * -1.0).epsilon(1e-10));
  }
  SUBCASE("value against a high precision quantile") {
    p.alpha_tilde = 0.01;
    // q = 0.99^(1/1000); Phi^-1(q) from 40-digit arithmetic
    double expected = 20.0 * 4.263770714908105 - 200.0;
    CHECK(fma_threshold(p) == doctest::Approx(expected).epsilon(1e-9));
  }
  SUBCASE("strictly decreasing in alpha") {
    double prev = INFINITY;
    for (int i = 1; i <= 50; ++i) {
      p.alpha_tilde = i / 51.0;
      double h = fma_threshold(p);
      CHECK(h < prev);
      prev = h;
    }
  }
  p.alpha_tilde = 0.0;
  CHECK_THROWS_AS(fma_threshold(p), SpecError);
  p.alpha_tilde = 1.0;
  CHECK_THROWS_AS(fma_threshold(p), SpecError);
}

TEST_CASE("performance bounds") {
  PerfModel p;
  p.mu_h0 = -0.8;
  p.var_h0 = p.var_h1 = 1.6;
  p.mu_h1 = 0.5;
  p.window = 100;
  p.false_alarm_interval = 100;
  auto hi = perf_bounds(p, std::numeric_limits<double>::infinity());
  CHECK(hi.false_alarm == 0.0);
  CHECK(hi.missed_detection == 1.0);
  auto lo = perf_bounds(p, -std::numeric_limits<double>::infinity());
  CHECK(lo.false_alarm == 1.0);
  CHECK(lo.missed_detection == 0.0);
  for (int i = 1; i <= 100; ++i) {
    p.alpha_tilde = i / 101.0;
    double h = fma_threshold(p);
    CHECK(std::abs(perf_bounds(p, h).false_alarm - p.alpha_tilde) < 1e-12);
  }
}
