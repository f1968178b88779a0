#include "iflds/bench.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

using namespace iflds;

namespace {

ExperimentSpec small_spec() {
  ExperimentSpec s;
  s.model = reference_model(2);
  s.trials = 150;
  s.amplitudes = {0.3};
  s.windows = {20};
  s.false_alarm_interval = 50;
  s.alpha_tilde = 0.1;
  s.burn_in = 100;
  s.train_length = 500;
  s.em_iterations = 10;
  s.detectors = {DetectorKind::kFldsFma, DetectorKind::kLdsFma, DetectorKind::kGaussianFma,
                 DetectorKind::kFldsCusum, DetectorKind::kFldsShewhart};
  return s;
}

std::string csv(const std::vector<ResultRow>& rows) {
  std::stringstream ss;
  write_results_csv(ss, rows);
  return ss.str();
}

}  // namespace

TEST_CASE("detector names round trip") {
  for (auto k : {DetectorKind::kFldsFma, DetectorKind::kLdsFma, DetectorKind::kGaussianFma,
                 DetectorKind::kFldsCusum, DetectorKind::kFldsShewhart}) {
    CHECK(parse_detector(detector_name(k)) == k);
  }
  CHECK_THROWS_AS(parse_detector("hmm-fma"), SpecError);
}

TEST_CASE("threshold bisection") {
  std::vector<double> maxima;
  for (int i = 0; i < 100; ++i) maxima.push_back(i);
  Calibration c = calibrate_threshold(maxima, 0.1, 0.1, 40);
  CHECK(c.converged);
  CHECK(c.achieved >= 0.09);
  CHECK(c.achieved <= 0.11);
  CHECK(c.threshold > 88.0);
  CHECK(c.threshold <= 91.0);

  // A step from 0 to 1 cannot hit 0.5.
  std::vector<double> flat(50, 3.0);
  Calibration f = calibrate_threshold(flat, 0.5, 0.1, 40);
  CHECK_FALSE(f.converged);
  CHECK_THROWS_AS(calibrate_threshold({}, 0.1, 0.1, 40), SpecError);
}

TEST_CASE("scoring conditions on no alarm before arrival") {
  TrialMaxima m;
  m.false_alarm = {0.0, 2.0, 5.0, 1.0};
  m.pre_arrival = {0.0, 3.0, 0.0, 0.0};
  m.during_soi = {5.0, 5.0, 1.0, 2.0};
  ResultRow r;
  score(m, 2.0, r);
  CHECK(r.n_fa == 4);
  CHECK(r.p_fa == doctest::Approx(0.5));
  CHECK(r.se_fa == doctest::Approx(std::sqrt(0.25 / 4)));
  // trial 1 is dropped; of the rest only trial 2 misses
  CHECK(r.n_md == 3);
  CHECK(r.p_md == doctest::Approx(1.0 / 3.0));
  CHECK(binomial_se(0.0, 10) == 0.0);
  CHECK(binomial_se(0.5, 0) == 0.0);
}

TEST_CASE("spec parsing and validation") {
  Json ok = Json::parse(R"({"spec_version": 1, "trials": 5, "amplitudes": [0.48],
                            "detectors": ["flds-fma", "flds-cusum"], "model": {"reference": 3}})");
  ExperimentSpec s = spec_from_json(ok);
  CHECK(s.trials == 5);
  CHECK(s.model.size() == 3);
  CHECK(s.detectors.size() == 2);
  ExperimentSpec back = spec_from_json(to_json(s));
  CHECK(back.trials == 5);
  CHECK(back.detectors == s.detectors);
  CHECK(s.coupling == NoiseCoupling::kShared);
  Json ind = ok;
  ind["coupling"] = "independent";
  CHECK(spec_from_json(to_json(spec_from_json(ind))).coupling == NoiseCoupling::kIndependent);

  auto bad = [&](const char* key, Json v) {
    Json j = ok;
    j[key] = v;
    return j;
  };
  CHECK_THROWS_AS(spec_from_json(bad("trials", 0)), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("trials", -3)), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("detectors", Json::array({"hmm"}))), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("detectors", Json::array({"flds-fma", "flds-fma"}))), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("windows", Json::array({500}))), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("alpha_tilde", 1.0)), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("scenario", "houses")), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("trails", 5)), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("coupling", "loose")), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("spec_version", 0)), SpecError);
  CHECK_THROWS_AS(spec_from_json(bad("m_true", Json::array({5}))), SpecError);
}

TEST_CASE("TSD rows are well formed and reproducible") {
  ExperimentSpec s = small_spec();
  auto rows = run_tsd_experiment(s);
  REQUIRE(rows.size() == 5);
  for (const ResultRow& r : rows) {
    CHECK(r.p_md >= 0.0);
    CHECK(r.p_md <= 1.0);
    CHECK(r.p_fa >= 0.0);
    CHECK(r.p_fa <= 1.0);
    CHECK(r.n_fa == 150);
    CHECK(r.se_md == doctest::Approx(binomial_se(r.p_md, r.n_md)));
    CHECK(r.se_fa == doctest::Approx(binomial_se(r.p_fa, r.n_fa)));
    CHECK(r.bound_fa.has_value() == (r.detector == "flds-fma"));
  }
  CHECK(csv(rows) == csv(run_tsd_experiment(s)));

  ExperimentSpec other = s;
  other.seed = 2;
  CHECK(csv(rows) != csv(run_tsd_experiment(other)));
}

TEST_CASE("huge SOI is never missed") {
  ExperimentSpec s = small_spec();
  s.trials = 40;
  s.amplitudes = {100.0};
  for (const ResultRow& r : run_tsd_experiment(s)) {
    INFO(r.detector);
    CHECK(r.p_md == 0.0);
  }
}

TEST_CASE("unit window FMA equals Shewhart") {
  ExperimentSpec s = small_spec();
  s.windows = {1};
  s.calibrate_flds = true;
  s.detectors = {DetectorKind::kFldsFma, DetectorKind::kFldsShewhart};
  auto rows = run_tsd_experiment(s);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].threshold == rows[1].threshold);
  CHECK(rows[0].p_md == rows[1].p_md);
  CHECK(rows[0].p_fa == rows[1].p_fa);
  CHECK(rows[0].n_md == rows[1].n_md);
}

TEST_CASE("window study densities") {
  ExperimentSpec s = small_spec();
  s.detectors = {DetectorKind::kFldsFma};
  s.windows = {10, 20};
  s.density_bins = 8;
  WindowStudy ws = run_window_study(s);
  CHECK(ws.rows.size() == 2);
  REQUIRE(ws.densities.size() == 16);
  REQUIRE(ws.h0_mean.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    const double width = ws.densities[k * 8 + 1].center - ws.densities[k * 8].center;
    double mass0 = 0.0, mass1 = 0.0;
    for (std::size_t b = 0; b < 8; ++b) {
      mass0 += ws.densities[k * 8 + b].h0_density * width;
      mass1 += ws.densities[k * 8 + b].h1_density * width;
    }
    CHECK(mass0 == doctest::Approx(1.0));
    CHECK(mass1 == doctest::Approx(1.0));
  }
  s.detectors = {DetectorKind::kGaussianFma};
  CHECK_THROWS_AS(run_window_study(s), SpecError);
}

TEST_CASE("RPL and comm plumbing") {
  ExperimentSpec s;
  s.trials = 1;
  s.length = 120;
  s.learn_iterations = 4;
  s.particles = 3;
  RplResult r = run_rpl_experiment(s);
  CHECK(r.trials.size() == 2);
  CHECK(r.summary.size() == 2);
  CHECK(r.trials[0].sticky);
  CHECK_FALSE(r.trials[1].sticky);
  s.scenario = Scenario::kCommInterference;
  CHECK_THROWS_AS(run_rpl_experiment(s), SpecError);

  ExperimentSpec c;
  c.scenario = Scenario::kCommInterference;
  c.trials = 20;
  c.sinr_targets_db = {-10.02};
  c.windows = {200};
  c.burn_in = 200;
  c.false_alarm_interval = 200;
  c.alpha_tilde = 0.15;
  c.train_length = 400;
  c.learn_iterations = 2;
  c.particles = 3;
  c.em_iterations = 5;
  // Too short a run to switch any chain on.
  CHECK_THROWS_AS(run_comm_experiment(c), NumericalError);
  c.train_length = 1000;
  c.learn_iterations = 30;
  c.birth_interval = 1;
  c.auxiliary_chains = 4;
  auto rows = run_comm_experiment(c);
  CHECK(rows.size() == 3);
  for (const ResultRow& row : rows) CHECK_FALSE(row.bound_fa.has_value());
  c.sinr_targets_db.clear();
  CHECK_THROWS_AS(run_comm_experiment(c), SpecError);
}
