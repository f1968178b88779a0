#include "iflds/detect.hpp"

#include "iflds/rand_dist.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace iflds {

double llr_value(const PredictiveLikelihood& pred, const Vec2& y, const Vec2& p) {
  Eigen::LLT<Mat2> llt(pred.cov);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("predictive covariance is singular");
  }
  Vec2 sy = llt.solve(y);
  return (p - pred.mean - 0.5 * y).dot(sy);
}

double llr_step(ForwardState& h0_filter, const FldsModel& model, const Vec2& y,
                const Vec2& p, const FkffOptions& opts) {
  PredictiveLikelihood pred = fkff_step(h0_filter, model, p, opts);
  return llr_value(pred, y, p);
}

FilterLlr::FilterLlr(FldsModel model, FkffOptions opts)
    : model_(std::move(model)), opts_(opts), state_(fkff_init(model_)) {}

double FilterLlr::step(const Vec2& y, const Vec2& p) {
  return llr_step(state_, model_, y, p, opts_);
}

void FilterLlr::reset() { state_ = fkff_init(model_); }

GaussianLlr::GaussianLlr(const Vec2& mean, const Mat2& cov) {
  pred_.mean = mean;
  pred_.cov = cov;
  Eigen::LLT<Mat2> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("Gaussian background covariance is singular");
  }
}

double GaussianLlr::step(const Vec2& y, const Vec2& p) { return llr_value(pred_, y, p); }

namespace {

void check_threshold(double h) {
  if (std::isnan(h) || h == -std::numeric_limits<double>::infinity()) {
    throw SpecError("detection threshold must be a number above -infinity");
  }
}

}  // namespace

FmaDetector::FmaDetector(std::size_t window, double threshold)
    : window_(window), threshold_(threshold), ring_(window, 0.0) {
  if (window == 0) throw SpecError("FMA window must be positive");
  check_threshold(threshold);
}

bool FmaDetector::update(double llr) {
  sum_ += llr - ring_[head_];
  ring_[head_] = llr;
  head_ = (head_ + 1) % window_;
  ++t_;
  if (t_ < window_) return false;
  bool fire = sum_ >= threshold_;
  if (fire) {
    ++alarm_count_;
    if (!first_alarm_) first_alarm_ = t_;
  }
  return fire;
}

void FmaDetector::reset() {
  std::fill(ring_.begin(), ring_.end(), 0.0);
  head_ = 0;
  t_ = 0;
  sum_ = 0.0;
  first_alarm_.reset();
  alarm_count_ = 0;
}

double FmaDetector::recomputed_statistic() const {
  double s = 0.0;
  for (double v : ring_) s += v;
  return s;
}

CusumDetector::CusumDetector(double threshold) : threshold_(threshold) {
  check_threshold(threshold);
}

bool CusumDetector::update(double llr) {
  stat_ = std::max(0.0, stat_) + llr;
  ++t_;
  bool fire = stat_ >= threshold_;
  if (fire && !first_alarm_) first_alarm_ = t_;
  return fire;
}

void CusumDetector::reset() {
  // W_0 = 0 so that max(0, W_0) + L_1 = L_1
  stat_ = 0.0;
  t_ = 0;
  first_alarm_.reset();
}

ShewhartDetector::ShewhartDetector(double threshold) : threshold_(threshold) {
  check_threshold(threshold);
}

bool ShewhartDetector::update(double llr) {
  last_ = llr;
  ++t_;
  bool fire = llr >= threshold_;
  if (fire && !first_alarm_) first_alarm_ = t_;
  return fire;
}

void ShewhartDetector::reset() {
  last_ = 0.0;
  t_ = 0;
  first_alarm_.reset();
}

H0Moments h0_moments(const Vec2& y, const Mat2& sigma_p) {
  Eigen::LLT<Mat2> llt(sigma_p);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("predictive covariance is singular");
  }
  double q = y.dot(llt.solve(y));
  return {-0.5 * q, q};
}

H1MeanTrace h1_mean_recursion(const FldsModel& model, const std::vector<Mat2>& gains,
                              const Mat2& sigma_p,
                              const std::function<Vec2(std::size_t)>& waveform,
                              std::size_t steps, double tol) {
  const std::size_t m_count = model.size();
  if (gains.size() != m_count) throw SpecError("need one gain per source");
  Eigen::LLT<Mat2> llt(sigma_p);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("predictive covariance is singular");
  }
  H1MeanTrace out;
  out.mean.reserve(steps);
  out.error.reserve(steps);
  std::vector<Vec2> psi(m_count, Vec2::Zero());
  for (std::size_t k = 0; k < steps; ++k) {
    if (k > 0) {
      const Vec2& e_prev = out.error.back();
      for (std::size_t m = 0; m < m_count; ++m) {
        psi[m] = model.sources[m].G * (psi[m] + gains[m] * e_prev);
      }
    }
    Vec2 y = waveform(k + 1);
    Vec2 e = y;
    for (std::size_t m = 0; m < m_count; ++m) e -= model.sources[m].C * psi[m];
    if (!e.allFinite() || e.norm() > 1e9) {
      // closed loop: psi_k = G (I - K C) psi_{k-1} + G K y
      const auto n = static_cast<Eigen::Index>(2 * m_count);
      Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n), k_st(n, 2), c_st(2, n);
      for (std::size_t m = 0; m < m_count; ++m) {
        auto i = static_cast<Eigen::Index>(2 * m);
        g.block<2, 2>(i, i) = model.sources[m].G;
        k_st.block<2, 2>(i, 0) = gains[m];
        c_st.block<2, 2>(0, i) = model.sources[m].C;
      }
      Eigen::MatrixXd a = g * (Eigen::MatrixXd::Identity(n, n) - k_st * c_st);
      double rho = a.eigenvalues().cwiseAbs().maxCoeff();
      std::ostringstream msg;
      msg << "observation error diverged at step " << k
          << "; closed-loop spectral radius " << rho;
      throw NumericalError(msg.str());
    }
    double mu = (e - 0.5 * y).dot(llt.solve(y));
    if (k > 0 && !out.converged_at) {
      if (std::abs(mu - out.mean.back()) < tol && (e - out.error.back()).norm() < tol) {
        out.converged_at = k;
      }
    }
    out.mean.push_back(mu);
    out.error.push_back(e);
  }
  out.converged_mean = out.mean.empty() ? 0.0 : out.mean.back();
  return out;
}

void PerfModel::validate() const {
  if (!(var_h0 > 0.0) || !std::isfinite(var_h0)) {
    throw SpecError("H0 LLR variance must be positive");
  }
  if (std::abs(var_h1 - var_h0) > 1e-9 * var_h0) {
    throw SpecError("H1 LLR variance must equal the H0 variance");
  }
  if (window == 0 || false_alarm_interval == 0) {
    throw SpecError("window and false-alarm interval must be positive");
  }
  if (!(alpha_tilde > 0.0 && alpha_tilde < 1.0)) {
    throw SpecError("target false-alarm probability must lie in (0, 1)");
  }
}

double fma_threshold(const PerfModel& perf) {
  perf.validate();
  const double w = static_cast<double>(perf.window);
  // (1 - a)^(1/w_alpha) without cancellation for small a
  double q = std::exp(std::log1p(-perf.alpha_tilde) /
                      static_cast<double>(perf.false_alarm_interval));
  if (!(q > 0.0 && q < 1.0)) {
    throw NumericalError("threshold quantile level rounds to 0 or 1");
  }
  return std::sqrt(w * perf.var_h0) * std_normal_quantile(q) + w * perf.mu_h0;
}

PerfBounds perf_bounds(const PerfModel& perf, double h) {
  if (perf.window == 0 || perf.false_alarm_interval == 0 || !(perf.var_h0 > 0.0)) {
    throw SpecError("performance model needs positive window, interval and variance");
  }
  if (std::isnan(h)) throw SpecError("threshold is NaN");
  const double w = static_cast<double>(perf.window);
  const double sd0 = std::sqrt(w * perf.var_h0);
  const double sd1 = std::sqrt(w * perf.var_h1);
  PerfBounds b;
  // log P(W_w < h) under H0 through the upper tail for accuracy
  double z0 = (h - w * perf.mu_h0) / sd0;
  double upper = 0.5 * std::erfc(z0 / std::sqrt(2.0));
  double log_p = std::log1p(-upper);
  b.false_alarm = -std::expm1(static_cast<double>(perf.false_alarm_interval) * log_p);
  b.missed_detection = std_normal_cdf((h - w * perf.mu_h1) / sd1);
  return b;
}

PerfModel perf_model_for(const FldsModel& model, const Vec2& y, std::size_t window,
                         std::size_t false_alarm_interval, double alpha_tilde,
                         const FkffOptions& opts) {
  ForwardState st = fkff_converged(model, 1e-10, 100000, opts);
  PredictiveLikelihood pred = fkff_peek(st, model, opts);
  H0Moments h0 = h0_moments(y, pred.cov);
  H1MeanTrace h1 = h1_mean_recursion(model, st.gain, pred.cov,
                                     [&](std::size_t) { return y; }, 10000);
  PerfModel perf;
  perf.mu_h0 = h0.mean;
  perf.var_h0 = h0.variance;
  perf.mu_h1 = h1.converged_mean;
  perf.var_h1 = h0.variance;
  perf.window = window;
  perf.false_alarm_interval = false_alarm_interval;
  perf.alpha_tilde = alpha_tilde;
  return perf;
}

}  // namespace iflds
