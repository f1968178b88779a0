#pragma once

#include "iflds/types.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace iflds {

// Seeded random stream. Every stochastic routine takes one of these
// explicitly; there is no global generator. A handle is single-owner:
// parallel work uses one stream id per task.
class RngHandle {
 public:
  RngHandle(std::uint64_t seed, std::uint64_t stream);

  RngHandle(const RngHandle&) = delete;
  RngHandle& operator=(const RngHandle&) = delete;
  RngHandle(RngHandle&&) = default;
  RngHandle& operator=(RngHandle&&) = default;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  // Gamma(shape, 1) for shape > 0.
  double gamma(double shape);
  // log of a Gamma(shape, 1) draw; stays finite for tiny shapes.
  double log_gamma_draw(double shape);
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t bits() { return engine_(); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

struct MvGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

// Matrix-normal inverse-Wishart prior on (A, Sigma):
//   Sigma ~ IW(n0, S0),  A | Sigma ~ MN(M0, Sigma, K0)
// K0 is the column precision, so a large K0 pins A to M0.
struct MniwPrior {
  Eigen::MatrixXd M0;
  Eigen::MatrixXd K0;
  double n0 = 0.0;
  Eigen::MatrixXd S0;

  void validate() const;
};

Eigen::VectorXd sample_mv_gaussian(const MvGaussian& dist, RngHandle& rng);

// Fast path for 2-d draws with a precomputed lower Cholesky factor.
inline Vec2 sample_gauss2(const Vec2& mean, const Mat2& chol_lower,
                          RngHandle& rng) {
  Vec2 z(rng.normal(), rng.normal());
  return mean + chol_lower * z;
}

// Lower Cholesky factor of a PSD 2x2 matrix (zero rows allowed).
Mat2 chol_psd2(const Mat2& cov);

double sample_beta(double alpha, double beta, RngHandle& rng);

// Inverse-Wishart draw via the Bartlett decomposition of W(n, S^-1).
Eigen::MatrixXd sample_inv_wishart(double dof, const Eigen::MatrixXd& scale,
                                   RngHandle& rng);

// MN(mean, row_cov, col_prec): A = mean + chol(row_cov) Z chol(col_prec^-1)^T.
Eigen::MatrixXd sample_matrix_normal(const Eigen::MatrixXd& mean,
                                     const Eigen::MatrixXd& row_cov,
                                     const Eigen::MatrixXd& col_prec,
                                     RngHandle& rng);

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> sample_mniw(const MniwPrior& prior,
                                                        RngHandle& rng);

double std_normal_cdf(double x);
double std_normal_quantile(double p);

// Index drawn proportionally to exp(log_weights). Throws if every
// weight is -inf or NaN.
std::size_t sample_log_categorical(std::span<const double> log_weights,
                                   RngHandle& rng);

// log(sum(exp(v)))
double log_sum_exp(std::span<const double> v);

}  // namespace iflds
