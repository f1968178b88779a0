#include "iflds/baseline.hpp"

#include <cmath>
#include <string>

namespace iflds {

GaussianFit fit_gaussian(const ObservationSeries& obs) {
  const std::size_t n = obs.size();
  if (n < 2) throw SpecError("Gaussian fit needs at least two samples");
  GaussianFit fit;
  fit.mean.setZero();
  for (const Vec2& p : obs.samples) fit.mean += p;
  fit.mean /= double(n);
  fit.cov.setZero();
  for (const Vec2& p : obs.samples) {
    Vec2 d = p - fit.mean;
    fit.cov += d * d.transpose();
  }
  fit.cov = symmetrize(fit.cov / double(n));
  if (!fit.mean.allFinite() || !fit.cov.allFinite() || fit.cov.determinant() <= 0.0) {
    throw NumericalError("Gaussian fit produced a singular covariance");
  }
  return fit;
}

LdsSmoothed lds_smooth(const LdsParams& lds, const ObservationSeries& obs) {
  const std::size_t n = obs.size();
  if (n == 0) throw SpecError("cannot smooth an empty series");
  std::vector<Vec2> mp(n), mf(n);
  std::vector<Mat2> pp(n), pf(n);
  LdsSmoothed out;
  Vec2 m = Vec2::Zero();
  Mat2 p = lds.Q;
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) {
      m = lds.G * mf[t - 1];
      p = symmetrize(lds.G * pf[t - 1] * lds.G.transpose() + lds.Q);
    }
    mp[t] = m;
    pp[t] = p;
    Mat2 s = symmetrize(lds.C * p * lds.C.transpose() + lds.R);
    Vec2 innov = obs[t] - lds.C * m;
    out.log_likelihood += log_gauss2(innov, s);
    Mat2 k = p * lds.C.transpose() * s.inverse();
    mf[t] = m + k * innov;
    pf[t] = symmetrize((Mat2::Identity() - k * lds.C) * p);
  }
  if (!std::isfinite(out.log_likelihood)) {
    throw NumericalError("LDS smoother log-likelihood is not finite");
  }
  out.mean.assign(n, Vec2::Zero());
  out.cov.assign(n, Mat2::Zero());
  out.cross.assign(n > 0 ? n - 1 : 0, Mat2::Zero());
  out.mean[n - 1] = mf[n - 1];
  out.cov[n - 1] = pf[n - 1];
  for (std::size_t t = n - 1; t-- > 0;) {
    Mat2 j = pf[t] * lds.G.transpose() * pp[t + 1].inverse();
    out.mean[t] = mf[t] + j * (out.mean[t + 1] - mp[t + 1]);
    out.cov[t] = symmetrize(pf[t] + j * (out.cov[t + 1] - pp[t + 1]) * j.transpose());
    out.cross[t] = out.cov[t + 1] * j.transpose();
  }
  return out;
}

LdsEmResult fit_lds_em(const ObservationSeries& obs, const LdsEmOptions& opts) {
  const std::size_t n = obs.size();
  if (n < 3) throw SpecError("LDS EM needs at least three samples");
  GaussianFit g = fit_gaussian(obs);
  LdsEmResult res;
  LdsParams& lds = res.lds;
  lds.G = opts.g0 * Mat2::Identity();
  lds.C = Mat2::Identity();
  lds.Q = 0.5 * g.cov;
  lds.R = 0.5 * g.cov;
  const Mat2 floor = opts.floor * Mat2::Identity();

  for (std::size_t it = 0;; ++it) {
    LdsSmoothed sm = lds_smooth(lds, obs);
    res.log_likelihood.push_back(sm.log_likelihood);
    if (it == opts.iterations) break;

    // E[x_t x_t'], E[x_t x_{t-1}'] and the observation cross moments.
    Mat2 s_all = Mat2::Zero(), s_prev = Mat2::Zero(), s_next = Mat2::Zero();
    Mat2 s_cross = Mat2::Zero(), s_px = Mat2::Zero(), s_pp = Mat2::Zero();
    for (std::size_t t = 0; t < n; ++t) {
      Mat2 e = sm.cov[t] + sm.mean[t] * sm.mean[t].transpose();
      s_all += e;
      if (t + 1 < n) s_prev += e;
      if (t > 0) {
        s_next += e;
        s_cross += sm.cross[t - 1] + sm.mean[t] * sm.mean[t - 1].transpose();
      }
      s_px += obs[t] * sm.mean[t].transpose();
      s_pp += obs[t] * obs[t].transpose();
    }
    const Mat2 e1 = sm.cov[0] + sm.mean[0] * sm.mean[0].transpose();

    lds.G = s_cross * s_prev.inverse();
    lds.Q = symmetrize((e1 + s_next - lds.G * s_cross.transpose()) / double(n)) + floor;
    lds.C = s_px * s_all.inverse();
    lds.R = symmetrize((s_pp - lds.C * s_px.transpose()) / double(n)) + floor;
    if (!lds.G.allFinite() || !lds.C.allFinite() || !lds.Q.allFinite() || !lds.R.allFinite()) {
      throw NumericalError("LDS EM produced non-finite parameters at iteration " +
                           std::to_string(it + 1));
    }
    lds.validate();
  }
  return res;
}

}  // namespace iflds
