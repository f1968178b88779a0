#pragma once

// Independent reference computations used by the tests. Nothing here calls
// into the library's filters or detectors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

// Two-sided one-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double f = cdf(xs[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

// Asymptotic Kolmogorov survival function Q(lambda), lambda = sqrt(n) D.
inline double ks_pvalue(double d, std::size_t n) {
  double sn = std::sqrt(static_cast<double>(n));
  double lam = (sn + 0.12 + 0.11 / sn) * d;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    double term = std::exp(-2.0 * k * k * lam * lam);
    sum += (k % 2 == 1 ? 1.0 : -1.0) * term;
    if (term < 1e-18) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

// Pearson chi-square upper tail via the regularized gamma function.
double chi2_sf(double x, double dof);

// Textbook Kalman filter (prior x_1 ~ N(0, P1)) returning per-step log
// predictive densities, plus the gains and filtered covariances.
struct KalmanRun {
  std::vector<double> loglik;
  std::vector<Eigen::MatrixXd> gain;
  std::vector<Eigen::MatrixXd> cov_filt;
  std::vector<Eigen::VectorXd> mean_filt;
};

inline KalmanRun kalman(const Eigen::MatrixXd& G, const Eigen::MatrixXd& C,
                        const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                        const Eigen::MatrixXd& P1,
                        const std::vector<Eigen::VectorXd>& ys) {
  const auto n = G.rows();
  const auto d = C.rows();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd P = P1;
  KalmanRun out;
  for (std::size_t t = 0; t < ys.size(); ++t) {
    if (t > 0) {
      m = G * m;
      P = G * P * G.transpose() + Q;
    }
    Eigen::MatrixXd S = C * P * C.transpose() + R;
    Eigen::VectorXd v = ys[t] - C * m;
    Eigen::MatrixXd Si = S.inverse();
    double ll = -0.5 * (v.dot(Si * v) + std::log(S.determinant()) +
                        static_cast<double>(d) * std::log(2.0 * M_PI));
    out.loglik.push_back(ll);
    Eigen::MatrixXd K = P * C.transpose() * Si;
    m = m + K * v;
    P = P - K * S * K.transpose();
    P = 0.5 * (P + P.transpose());
    out.gain.push_back(K);
    out.cov_filt.push_back(P);
    out.mean_filt.push_back(m);
  }
  return out;
}

// Stationary covariance of x' = G x + w, w ~ N(0, Q), by fixed-point iteration.
inline Eigen::MatrixXd lyapunov(const Eigen::MatrixXd& G, const Eigen::MatrixXd& Q) {
  Eigen::MatrixXd P = Q;
  for (int i = 0; i < 100000; ++i) {
    Eigen::MatrixXd next = G * P * G.transpose() + Q;
    if ((next - P).cwiseAbs().maxCoeff() < 1e-15) return next;
    P = next;
  }
  return P;
}

// Brute-force max_{k<=t} sum_{i=k}^t L_i.
inline double cusum_max_form(const std::vector<double>& l, std::size_t t) {
  double best = -INFINITY;
  double s = 0.0;
  for (std::size_t k = t + 1; k-- > 0;) {
    s += l[k];
    best = std::max(best, s);
  }
  return best;
}

}  // namespace oracle
