#include "iflds/rand_dist.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace iflds {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t st = seed ^ (stream * 0xd1b54a32d192ed03ULL);
  std::uint64_t a = splitmix64(st);
  std::uint64_t b = splitmix64(st);
  std::uint64_t c = splitmix64(st);
  std::uint64_t d = splitmix64(st);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32),
                    static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d >> 32)};
  return std::mt19937_64(seq);
}

Eigen::MatrixXd lower_chol(const Eigen::MatrixXd& m, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    throw NumericalError(std::string(what) + " is not positive definite");
  }
  return llt.matrixL();
}

}  // namespace

RngHandle::RngHandle(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), engine_(make_engine(seed, stream)) {}

double RngHandle::uniform() {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double RngHandle::normal() { return normal_(engine_); }

double RngHandle::gamma(double shape) {
  if (!(shape > 0.0) || !std::isfinite(shape)) {
    throw SpecError("gamma shape must be finite and positive");
  }
  return std::exp(log_gamma_draw(shape));
}

double RngHandle::log_gamma_draw(double shape) {
  if (!(shape > 0.0) || !std::isfinite(shape)) {
    throw SpecError("gamma shape must be finite and positive");
  }
  if (shape >= 1.0) {
    std::gamma_distribution<double> g(shape, 1.0);
    return std::log(g(engine_));
  }
  // Gamma(a) = Gamma(a + 1) * U^(1/a)
  std::gamma_distribution<double> g(shape + 1.0, 1.0);
  double lg = std::log(g(engine_));
  return lg + std::log(uniform()) / shape;
}

void MniwPrior::validate() const {
  const auto d = S0.rows();
  if (S0.cols() != d || K0.rows() != K0.cols() || M0.rows() != d ||
      M0.cols() != K0.rows()) {
    throw SpecError("MNIW prior matrices have inconsistent shapes");
  }
  if (!(n0 > static_cast<double>(d) - 1.0)) {
    std::ostringstream msg;
    msg << "MNIW degrees of freedom n0=" << n0 << " must exceed d-1=" << d - 1;
    throw SpecError(msg.str());
  }
  Eigen::LLT<Eigen::MatrixXd> s(S0), k(K0);
  if (s.info() != Eigen::Success || !S0.isApprox(S0.transpose())) {
    throw SpecError("MNIW scale S0 must be symmetric positive definite");
  }
  if (k.info() != Eigen::Success || !K0.isApprox(K0.transpose())) {
    throw SpecError("MNIW column precision K0 must be symmetric positive definite");
  }
}

Eigen::VectorXd sample_mv_gaussian(const MvGaussian& dist, RngHandle& rng) {
  const auto d = dist.mean.size();
  if (dist.covariance.rows() != d || dist.covariance.cols() != d) {
    throw SpecError("covariance shape does not match mean");
  }
  Eigen::MatrixXd sym = 0.5 * (dist.covariance + dist.covariance.transpose());
  if ((sym - dist.covariance).cwiseAbs().maxCoeff() > 1e-12) {
    throw NumericalError("covariance is not symmetric within 1e-12");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  Eigen::VectorXd ev = eig.eigenvalues();
  for (Eigen::Index i = 0; i < d; ++i) {
    if (ev(i) < -1e-10) {
      std::ostringstream msg;
      msg << "covariance is not positive semidefinite: eigenvalue " << ev(i);
      throw NumericalError(msg.str());
    }
    ev(i) = std::max(ev(i), 0.0);
  }
  Eigen::MatrixXd root = eig.eigenvectors() * ev.cwiseSqrt().asDiagonal();
  Eigen::VectorXd z(d);
  for (Eigen::Index i = 0; i < d; ++i) z(i) = rng.normal();
  return dist.mean + root * z;
}

Mat2 chol_psd2(const Mat2& cov) {
  Mat2 l = Mat2::Zero();
  double a = cov(0, 0);
  if (a < 0.0) {
    if (a < -1e-10) throw NumericalError("covariance diagonal is negative");
    a = 0.0;
  }
  l(0, 0) = std::sqrt(a);
  l(1, 0) = a > 0.0 ? cov(1, 0) / l(0, 0) : 0.0;
  double r = cov(1, 1) - l(1, 0) * l(1, 0);
  if (r < 0.0) {
    if (r < -1e-10 * std::max(1.0, cov(1, 1))) {
      throw NumericalError("covariance is not positive semidefinite");
    }
    r = 0.0;
  }
  l(1, 1) = std::sqrt(r);
  return l;
}

double sample_beta(double alpha, double beta, RngHandle& rng) {
  if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) ||
      !std::isfinite(beta)) {
    throw SpecError("beta shape parameters must be finite and positive");
  }
  double lx = rng.log_gamma_draw(alpha);
  double ly = rng.log_gamma_draw(beta);
  double m = std::max(lx, ly);
  double v = std::exp(lx - m - std::log(std::exp(lx - m) + std::exp(ly - m)));
  constexpr double kTiny = std::numeric_limits<double>::min();
  return std::clamp(v, kTiny, 1.0 - std::numeric_limits<double>::epsilon() / 2);
}

Eigen::MatrixXd sample_inv_wishart(double dof, const Eigen::MatrixXd& scale,
                                   RngHandle& rng) {
  const auto d = scale.rows();
  if (!(dof > static_cast<double>(d) - 1.0)) {
    throw SpecError("inverse-Wishart degrees of freedom must exceed d-1");
  }
  Eigen::MatrixXd l = lower_chol(scale.inverse(), "inverse-Wishart scale");
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    a(i, i) = std::sqrt(2.0 * rng.gamma(0.5 * (dof - static_cast<double>(i))));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  Eigen::MatrixXd la = l * a;
  Eigen::MatrixXd w = la * la.transpose();
  Eigen::MatrixXd sigma = w.inverse();
  return 0.5 * (sigma + sigma.transpose());
}

Eigen::MatrixXd sample_matrix_normal(const Eigen::MatrixXd& mean,
                                     const Eigen::MatrixXd& row_cov,
                                     const Eigen::MatrixXd& col_prec,
                                     RngHandle& rng) {
  Eigen::MatrixXd z(mean.rows(), mean.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = rng.normal();
  Eigen::MatrixXd lr = lower_chol(row_cov, "matrix-normal row covariance");
  Eigen::MatrixXd lc = lower_chol(col_prec.inverse(), "matrix-normal column covariance");
  return mean + lr * z * lc.transpose();
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> sample_mniw(const MniwPrior& prior,
                                                        RngHandle& rng) {
  prior.validate();
  Eigen::MatrixXd sigma = sample_inv_wishart(prior.n0, prior.S0, rng);
  Eigen::MatrixXd a = sample_matrix_normal(prior.M0, sigma, prior.K0, rng);
  return {std::move(a), std::move(sigma)};
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double std_normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw SpecError("normal quantile requires p strictly inside (0, 1)");
  }
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::size_t sample_log_categorical(std::span<const double> log_weights,
                                   RngHandle& rng) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : log_weights) {
    if (std::isnan(x)) throw NumericalError("NaN log-weight");
    m = std::max(m, x);
  }
  if (!std::isfinite(m)) throw NumericalError("all weights are zero");
  double total = 0.0;
  for (double x : log_weights) total += std::exp(x - m);
  double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    acc += std::exp(log_weights[i] - m);
    if (u < acc) return i;
  }
  // rounding: return the last index carrying mass
  for (std::size_t i = log_weights.size(); i-- > 0;) {
    if (std::isfinite(log_weights[i])) return i;
  }
  return log_weights.size() - 1;
}

}  // namespace iflds
