#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace iflds {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

// Input or configuration rejected before any numerics ran.
class SpecError : public std::invalid_argument {
 public:
  explicit SpecError(const std::string& what) : std::invalid_argument(what) {}
};

// A computation produced something it cannot continue from
// (non-PSD covariance, underflowed weights, divergence).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

inline Mat2 symmetrize(const Mat2& a) { return 0.5 * (a + a.transpose()); }

// Symmetric part of `a` with eigenvalues in [-tol, 0) clamped to zero.
// Throws if an eigenvalue is below -tol.
Mat2 clamp_psd(const Mat2& a, double tol = 1e-10);

// log N(v; 0, cov) for a 2-vector via Cholesky. Throws on non-PD cov.
double log_gauss2(const Vec2& v, const Mat2& cov);

// Log-density when the inverse and log-determinant are precomputed.
inline double log_gauss2(const Vec2& v, const Mat2& cov_inv, double log_det) {
  constexpr double kLog2Pi = 1.8378770664093453;
  return -0.5 * (v.dot(cov_inv * v) + log_det) - kLog2Pi;
}

inline double spectral_radius(const Mat2& a) {
  return a.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace iflds
