#pragma once

#include "iflds/fkff.hpp"
#include "iflds/types.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

namespace iflds {

// Per-sample log-likelihood ratio between the SOI-present predictive
// N(mu_p + y, Sigma_p) and the SOI-absent predictive N(mu_p, Sigma_p):
//   L = (p - mu_p - y/2)' Sigma_p^-1 y
double llr_value(const PredictiveLikelihood& pred, const Vec2& y, const Vec2& p);

// Evaluates the LLR of p against the H0 filter's predictive and then advances
// the filter on p. Only one filter is run; the H1 predictive is the H0 one
// shifted by y.
double llr_step(ForwardState& h0_filter, const FldsModel& model, const Vec2& y,
                const Vec2& p, const FkffOptions& opts = {});

// Source of per-sample LLRs for one background representation.
class LlrSource {
 public:
  virtual ~LlrSource() = default;
  virtual double step(const Vec2& y, const Vec2& p) = 0;
  virtual void reset() = 0;
};

// Factorial filter backed LLR (also covers a single LDS when M = 1).
class FilterLlr final : public LlrSource {
 public:
  explicit FilterLlr(FldsModel model, FkffOptions opts = {});
  double step(const Vec2& y, const Vec2& p) override;
  void reset() override;
  const ForwardState& state() const { return state_; }

 private:
  FldsModel model_;
  FkffOptions opts_;
  ForwardState state_;
};

// i.i.d. Gaussian background with fixed mean and covariance.
class GaussianLlr final : public LlrSource {
 public:
  GaussianLlr(const Vec2& mean, const Mat2& cov);
  double step(const Vec2& y, const Vec2& p) override;
  void reset() override {}

 private:
  PredictiveLikelihood pred_;
};

// Finite moving average stopping rule: W_t = sum of the last w LLRs, alarm at
// the first t >= w with W_t >= h. Keeps running after an alarm; reset()
// restarts from W_0 = 0.
class FmaDetector {
 public:
  FmaDetector(std::size_t window, double threshold);

  // Returns true when an alarm condition holds at this step.
  bool update(double llr);
  void reset();

  double statistic() const { return sum_; }
  // Re-sums the ring buffer from scratch.
  double recomputed_statistic() const;
  bool operational() const { return t_ >= window_; }
  std::size_t time() const { return t_; }
  std::size_t window() const { return window_; }
  double threshold() const { return threshold_; }
  std::optional<std::size_t> first_alarm() const { return first_alarm_; }
  std::size_t alarm_count() const { return alarm_count_; }

 private:
  std::size_t window_;
  double threshold_;
  std::vector<double> ring_;
  std::size_t head_ = 0;
  std::size_t t_ = 0;
  double sum_ = 0.0;
  std::optional<std::size_t> first_alarm_;
  std::size_t alarm_count_ = 0;
};

// W_t = max(0, W_{t-1}) + L_t, alarm when W_t >= h.
class CusumDetector {
 public:
  explicit CusumDetector(double threshold);
  bool update(double llr);
  void reset();
  double statistic() const { return stat_; }
  std::size_t time() const { return t_; }
  std::optional<std::size_t> first_alarm() const { return first_alarm_; }

 private:
  double threshold_;
  double stat_ = 0.0;
  std::size_t t_ = 0;
  std::optional<std::size_t> first_alarm_;
};

// Single-sample exceedance L_t >= h.
class ShewhartDetector {
 public:
  explicit ShewhartDetector(double threshold);
  bool update(double llr);
  void reset();
  double statistic() const { return last_; }
  std::size_t time() const { return t_; }
  std::optional<std::size_t> first_alarm() const { return first_alarm_; }

 private:
  double threshold_;
  double last_ = 0.0;
  std::size_t t_ = 0;
  std::optional<std::size_t> first_alarm_;
};

struct H0Moments {
  double mean = 0.0;
  double variance = 0.0;
};

// mean = -y' S^-1 y / 2, variance = y' S^-1 y for S = Sigma_p.
H0Moments h0_moments(const Vec2& y, const Mat2& sigma_p);

struct H1MeanTrace {
  // Per-SOI-sample LLR means; entry k belongs to SOI sample k + 1.
  std::vector<double> mean;
  // Observation errors e_k.
  std::vector<Vec2> error;
  double converged_mean = 0.0;
  // First k with |mean_k - mean_{k-1}| and |e_k - e_{k-1}| below tol.
  std::optional<std::size_t> converged_at;
};

// Iterates psi^m_k = G^m (psi^m_{k-1} + K^m e_{k-1}), e_k = y_{k+1} - sum C^m psi^m_k
// from psi_0 = 0 with the given gains and predictive covariance.
// Throws NumericalError if |e_k| exceeds 1e9.
H1MeanTrace h1_mean_recursion(const FldsModel& model, const std::vector<Mat2>& gains,
                              const Mat2& sigma_p,
                              const std::function<Vec2(std::size_t)>& waveform,
                              std::size_t steps, double tol = 1e-8);

struct PerfModel {
  double mu_h0 = 0.0;
  double var_h0 = 0.0;
  double mu_h1 = 0.0;
  double var_h1 = 0.0;
  std::size_t window = 1;
  std::size_t false_alarm_interval = 1;
  double alpha_tilde = 0.01;

  void validate() const;
};

// h = sqrt(w var_h0) Phi^-1[(1 - alpha~)^(1/w_alpha)] + w mu_h0
double fma_threshold(const PerfModel& perf);

struct PerfBounds {
  double false_alarm = 0.0;  // alpha(h, w_alpha)
  double missed_detection = 0.0;  // beta(h, w)
};

PerfBounds perf_bounds(const PerfModel& perf, double h);

// Convenience: builds the performance model for a constant SOI `y` on a
// converged factorial filter.
PerfModel perf_model_for(const FldsModel& model, const Vec2& y, std::size_t window,
                         std::size_t false_alarm_interval, double alpha_tilde,
                         const FkffOptions& opts = {});

}  // namespace iflds
