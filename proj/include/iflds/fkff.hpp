#pragma once

#include "iflds/model.hpp"
#include "iflds/types.hpp"

#include <cstddef>
#include <ostream>
#include <vector>

namespace iflds {

// Which matrix is reported as the one-step predictive covariance.
enum class PredictiveCovariance {
  // The innovation covariance the factorial gain inverts:
  //   sum_n C^n Sbar^n C^n' + sum_n sum_{m!=n} C^n Q C^m' + M^2 R
  kGainDenominator,
  // sum_m (C^m Sbar^m C^m' + M R), without the cross-source terms.
  kBlockSum,
};

struct FkffOptions {
  PredictiveCovariance predictive = PredictiveCovariance::kGainDenominator;
};

// Per-source Gaussian forward variables of the factorial filter.
struct ForwardState {
  std::vector<Vec2> mean_pred;
  std::vector<Mat2> cov_pred;
  std::vector<Vec2> mean_upd;
  std::vector<Mat2> cov_upd;
  std::vector<Mat2> gain;
  // Number of observations consumed so far.
  std::size_t t = 0;
  // max |S - S'| of the updated covariances before re-symmetrization.
  double last_asymmetry = 0.0;

  std::size_t size() const { return mean_pred.size(); }
};

struct PredictiveLikelihood {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
  double log_density = 0.0;
};

ForwardState fkff_init(const FldsModel& model);

// Consumes p_t: predicts (except on the first step, which uses the initial
// predicted variables), evaluates the predictive density of p_t, then updates
// with the factorial gain.
PredictiveLikelihood fkff_step(ForwardState& state, const FldsModel& model,
                               const Vec2& p, const FkffOptions& opts = {});

// Predictive mean and covariance of the next observation without consuming it.
PredictiveLikelihood fkff_peek(const ForwardState& state, const FldsModel& model,
                               const FkffOptions& opts = {});

// Sum of log predictive densities over [from, to] (1-based, inclusive). The
// filter always starts at t = 1.
double fkff_loglik(const FldsModel& model, const ObservationSeries& obs,
                   std::size_t from, std::size_t to, const FkffOptions& opts = {});

// Iterates the covariance recursion (data independent) until every gain moves
// by less than `tol` between steps. Means are left at zero.
ForwardState fkff_converged(const FldsModel& model, double tol = 1e-10,
                            std::size_t max_steps = 100000,
                            const FkffOptions& opts = {});

// Writes `t,mu_p_i,mu_p_q,logdet_sigma_p,gain_norm_0,...` for every step.
void fkff_trace_csv(std::ostream& os, const FldsModel& model,
                    const ObservationSeries& obs, const FkffOptions& opts = {});

// Exact Kalman filter on the stacked 2M-dimensional state. Used to measure
// how far the factorial filter's likelihood is from the full joint filter
// under a given noise coupling. Returns per-step log predictive densities.
std::vector<double> stacked_kalman_logliks(const FldsModel& model,
                                           const ObservationSeries& obs,
                                           NoiseCoupling coupling);

}  // namespace iflds
