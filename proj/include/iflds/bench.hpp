#pragma once

#include "iflds/io.hpp"
#include "iflds/learn.hpp"
#include "iflds/model.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace iflds {

enum class DetectorKind { kFldsFma, kLdsFma, kGaussianFma, kFldsCusum, kFldsShewhart };

std::string detector_name(DetectorKind kind);
DetectorKind parse_detector(const std::string& name);

enum class Scenario { kFldsSynthetic, kCommInterference };

// One benchmark description, read from a versioned JSON spec file.
struct ExperimentSpec {
  Scenario scenario = Scenario::kFldsSynthetic;
  std::uint64_t seed = 1;
  std::size_t trials = 1000;
  // H0 trials used only for threshold calibration; 0 means `trials`.
  std::size_t calibration_trials = 0;

  // flds-synthetic background and its noise coupling.
  FldsModel model = reference_model(4);
  NoiseCoupling coupling = NoiseCoupling::kShared;
  CommScenarioConfig comm;

  // SOI grid. An amplitude a is the constant SOI y = (a, a); a SINR target s
  // is converted to an amplitude from the training background power. The comm
  // scenario takes its SOI from `comm` with sinr_db set to each target.
  std::vector<double> amplitudes;
  std::vector<double> sinr_targets_db;

  std::vector<std::size_t> windows = {200};
  std::size_t false_alarm_interval = 1000;
  double alpha_tilde = 0.01;
  std::vector<DetectorKind> detectors = {DetectorKind::kFldsFma, DetectorKind::kLdsFma,
                                         DetectorKind::kGaussianFma};
  // Samples before counting starts, so the filters have converged.
  std::size_t burn_in = 300;
  // flds-fma uses the closed-form threshold unless this is set; every other
  // detector is always calibrated.
  bool calibrate_flds = false;
  // Relative tolerance and iteration budget of the threshold bisection.
  double calibration_tolerance = 0.1;
  std::size_t calibration_iterations = 40;

  // Baseline and learner training.
  std::size_t train_length = 2000;
  std::size_t em_iterations = 50;
  std::size_t learn_iterations = 300;
  std::size_t particles = 15;
  std::size_t birth_interval = 5;
  std::size_t auxiliary_chains = 1;
  Json hyper = Json::object();

  // RPL study.
  std::vector<std::size_t> m_true = {2};
  std::size_t length = 2000;

  std::size_t density_bins = 50;

  void validate() const;
  std::size_t effective_calibration_trials() const {
    return calibration_trials == 0 ? trials : calibration_trials;
  }
};

ExperimentSpec spec_from_json(const Json& j);
Json to_json(const ExperimentSpec& spec);

struct ResultRow {
  std::string detector;
  double amplitude = 0.0;
  double sinr_db = 0.0;
  std::size_t window = 0;
  std::size_t false_alarm_interval = 0;
  double threshold = 0.0;
  bool calibrated = true;
  double p_md = 0.0;
  double se_md = 0.0;
  std::size_t n_md = 0;
  double p_fa = 0.0;
  double se_fa = 0.0;
  std::size_t n_fa = 0;
  std::optional<double> bound_fa;
  std::optional<double> bound_md;
};

// sqrt(p (1 - p) / n), 0 for n = 0.
double binomial_se(double p, std::size_t n);

// Bisection on h over a non-increasing empirical exceedance curve.
struct Calibration {
  double threshold = 0.0;
  double achieved = 0.0;
  bool converged = false;
};

// `maxima` are per-trial maxima of the statistic over the false-alarm
// interval; P(h) is the fraction with maximum >= h.
Calibration calibrate_threshold(const std::vector<double>& maxima, double target,
                                double tolerance, std::size_t iterations);

// Per-trial statistic maxima for one detector on one SOI setting.
struct TrialMaxima {
  std::vector<double> false_alarm;  // over the w_alpha counting interval
  std::vector<double> pre_arrival;  // counting start to nu - 1 (-inf if empty)
  std::vector<double> during_soi;   // nu .. nu + w - 1
  std::vector<double> w_before;     // statistic at nu - 1 (H0 window)
  std::vector<double> w_full;       // statistic at nu + w - 1 (full SOI window)
  std::vector<double> calibration;  // maxima of independent H0 trials
};

// Missed-detection trials are kept only without an alarm before nu.
void score(const TrialMaxima& m, double h, ResultRow& row);

std::vector<ResultRow> run_tsd_experiment(const ExperimentSpec& spec);

struct DensityRow {
  std::string detector;
  std::size_t window = 0;
  std::size_t bin = 0;
  double center = 0.0;
  double h0_density = 0.0;
  double h1_density = 0.0;
  double h0_theory = 0.0;
  double h1_theory = 0.0;
};

struct WindowStudy {
  std::vector<ResultRow> rows;
  std::vector<DensityRow> densities;
  // Empirical window-sum moments under H0 for flds-fma, one per window.
  std::vector<double> h0_mean, h0_mean_se, h0_theory_mean;
};

// run_tsd_experiment plus flds-fma window-sum histograms under both
// hypotheses with the Gaussian curves N(w mu_Hi, w var_Hi).
WindowStudy run_window_study(const ExperimentSpec& spec);

// Pulsed SOI over BPSK/QPSK interference; flds-fma uses an IFLDS learned on
// a training background. Missed detections are pulses with no alarm.
std::vector<ResultRow> run_comm_experiment(const ExperimentSpec& spec);

struct RplTrial {
  std::size_t m_true = 0;
  std::size_t trial = 0;
  bool sticky = true;
  std::size_t m_hat = 0;
  double re = 0.0;
};

struct RplSummary {
  std::size_t m_true = 0;
  bool sticky = true;
  std::size_t trials = 0;
  std::size_t modal_m_hat = 0;
  double mean_m_hat = 0.0;
  double mean_abs_error = 0.0;
  double median_re = 0.0;
  double mean_re = 0.0;
};

struct RplResult {
  std::vector<RplTrial> trials;
  std::vector<RplSummary> summary;
};

// For each M_true and trial, learns the same data with sticky on and off
// (paired learner streams).
RplResult run_rpl_experiment(const ExperimentSpec& spec);

void write_results_csv(std::ostream& os, std::vector<ResultRow> rows);
void write_densities_csv(std::ostream& os, const std::vector<DensityRow>& rows);
void write_rpl_csv(std::ostream& os, const RplResult& result);
void write_rpl_trials_csv(std::ostream& os, const RplResult& result);

}  // namespace iflds
