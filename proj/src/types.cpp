#include "iflds/types.hpp"

#include <cmath>
#include <sstream>

namespace iflds {

Mat2 clamp_psd(const Mat2& a, double tol) {
  Mat2 s = symmetrize(a);
  Eigen::SelfAdjointEigenSolver<Mat2> eig(s);
  Vec2 ev = eig.eigenvalues();
  if (ev.minCoeff() >= 0.0) return s;
  for (int i = 0; i < 2; ++i) {
    if (ev(i) < -tol) {
      std::ostringstream msg;
      msg << "matrix is not positive semidefinite: eigenvalue " << ev(i)
          << " below -" << tol;
      throw NumericalError(msg.str());
    }
    if (ev(i) < 0.0) ev(i) = 0.0;
  }
  return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

double log_gauss2(const Vec2& v, const Mat2& cov) {
  Eigen::LLT<Mat2> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("covariance is not positive definite");
  }
  const Mat2& l = llt.matrixL();
  double log_det = 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)));
  Vec2 z = llt.matrixL().solve(v);
  constexpr double kLog2Pi = 1.8378770664093453;
  return -0.5 * (z.squaredNorm() + log_det) - kLog2Pi;
}

}  // namespace iflds
