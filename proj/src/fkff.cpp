#include "iflds/fkff.hpp"

#include <cmath>
#include <sstream>

namespace iflds {

namespace {

void check_model(const FldsModel& model) {
  model.validate();
  if (!model.shared_noise) {
    throw SpecError("factorial filter needs Q and R shared across sources");
  }
}

Mat2 sum_outputs(const FldsModel& model) {
  Mat2 s = Mat2::Zero();
  for (const auto& src : model.sources) s += src.C;
  return s;
}

// Innovation covariance used by the gain.
Mat2 gain_denominator(const ForwardState& st, const FldsModel& model) {
  const Mat2& q = model.Q();
  const double m = static_cast<double>(model.size());
  Mat2 csum = sum_outputs(model);
  Mat2 d = Mat2::Zero();
  Mat2 diag_q = Mat2::Zero();
  for (std::size_t n = 0; n < model.size(); ++n) {
    const Mat2& c = model.sources[n].C;
    d += c * st.cov_pred[n] * c.transpose();
    diag_q += c * q * c.transpose();
  }
  // sum_n sum_{m != n} C^n Q C^m' = (sum C) Q (sum C)' - sum C Q C'
  d += csum * q * csum.transpose() - diag_q;
  d += m * m * model.R();
  return symmetrize(d);
}

Mat2 block_sum(const ForwardState& st, const FldsModel& model) {
  const double m = static_cast<double>(model.size());
  Mat2 s = Mat2::Zero();
  for (std::size_t n = 0; n < model.size(); ++n) {
    const Mat2& c = model.sources[n].C;
    s += c * st.cov_pred[n] * c.transpose() + m * model.R();
  }
  return symmetrize(s);
}

void predict(ForwardState& st, const FldsModel& model) {
  for (std::size_t m = 0; m < model.size(); ++m) {
    const Mat2& g = model.sources[m].G;
    st.mean_pred[m] = g * st.mean_upd[m];
    st.cov_pred[m] = symmetrize(g * st.cov_upd[m] * g.transpose() + model.Q());
  }
}

PredictiveLikelihood predictive(const ForwardState& st, const FldsModel& model,
                                const Mat2& denom, const FkffOptions& opts) {
  PredictiveLikelihood out;
  for (std::size_t m = 0; m < model.size(); ++m) {
    out.mean += model.sources[m].C * st.mean_pred[m];
  }
  out.cov = opts.predictive == PredictiveCovariance::kGainDenominator
                ? denom
                : block_sum(st, model);
  return out;
}

}  // namespace

ForwardState fkff_init(const FldsModel& model) {
  check_model(model);
  const std::size_t m = model.size();
  ForwardState st;
  st.mean_pred.assign(m, Vec2::Zero());
  st.cov_pred.assign(m, model.Q());
  st.mean_upd.assign(m, Vec2::Zero());
  st.cov_upd.assign(m, Mat2::Zero());
  st.gain.assign(m, Mat2::Zero());
  st.t = 0;
  return st;
}

PredictiveLikelihood fkff_peek(const ForwardState& state, const FldsModel& model,
                               const FkffOptions& opts) {
  ForwardState st = state;
  if (st.t > 0) predict(st, model);
  return predictive(st, model, gain_denominator(st, model), opts);
}

PredictiveLikelihood fkff_step(ForwardState& st, const FldsModel& model, const Vec2& p,
                               const FkffOptions& opts) {
  if (st.size() != model.size()) {
    throw SpecError("filter state and model disagree on the number of sources");
  }
  if (st.t > 0) predict(st, model);

  const Mat2 denom = gain_denominator(st, model);
  Eigen::LLT<Mat2> llt(denom);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "singular factorial gain denominator at t=" << st.t + 1;
    throw NumericalError(msg.str());
  }
  const Mat2 denom_inv = llt.solve(Mat2::Identity());

  PredictiveLikelihood out = predictive(st, model, denom, opts);
  out.log_density = log_gauss2(p - out.mean, out.cov);

  const Vec2 innovation = p - out.mean;
  const Mat2 csum = sum_outputs(model);
  const Mat2& q = model.Q();
  double asym = 0.0;
  for (std::size_t m = 0; m < model.size(); ++m) {
    const Mat2& c = model.sources[m].C;
    // Sbar^m C^m' + sum_{n != m} Q C^n'
    Mat2 numer = st.cov_pred[m] * c.transpose() + q * (csum - c).transpose();
    Mat2 k = numer * denom_inv;
    st.gain[m] = k;
    st.mean_upd[m] = st.mean_pred[m] + k * innovation;
    Mat2 upd = st.cov_pred[m] - k * numer.transpose();
    asym = std::max(asym, (upd - upd.transpose()).cwiseAbs().maxCoeff());
    st.cov_upd[m] = clamp_psd(upd);
  }
  st.last_asymmetry = asym;
  ++st.t;
  return out;
}

double fkff_loglik(const FldsModel& model, const ObservationSeries& obs,
                   std::size_t from, std::size_t to, const FkffOptions& opts) {
  if (from < 1 || from > to || to > obs.size()) {
    throw SpecError("log-likelihood window must satisfy 1 <= from <= to <= length");
  }
  ForwardState st = fkff_init(model);
  double total = 0.0;
  for (std::size_t t = 1; t <= to; ++t) {
    PredictiveLikelihood pl = fkff_step(st, model, obs[t - 1], opts);
    if (t >= from) total += pl.log_density;
  }
  return total;
}

ForwardState fkff_converged(const FldsModel& model, double tol, std::size_t max_steps,
                            const FkffOptions& opts) {
  ForwardState st = fkff_init(model);
  std::vector<Mat2> prev;
  for (std::size_t i = 0; i < max_steps; ++i) {
    fkff_step(st, model, Vec2::Zero(), opts);
    if (!prev.empty()) {
      double diff = 0.0;
      for (std::size_t m = 0; m < st.size(); ++m) {
        diff = std::max(diff, (st.gain[m] - prev[m]).cwiseAbs().maxCoeff());
      }
      if (diff < tol) return st;
    }
    prev = st.gain;
  }
  std::ostringstream msg;
  msg << "factorial gain did not converge to " << tol << " within " << max_steps
      << " steps";
  throw NumericalError(msg.str());
}

void fkff_trace_csv(std::ostream& os, const FldsModel& model,
                    const ObservationSeries& obs, const FkffOptions& opts) {
  ForwardState st = fkff_init(model);
  os << "t,mu_p_i,mu_p_q,logdet_sigma_p";
  for (std::size_t m = 0; m < model.size(); ++m) os << ",gain_norm_" << m;
  os << '\n';
  os.precision(17);
  for (std::size_t t = 1; t <= obs.size(); ++t) {
    PredictiveLikelihood pl = fkff_step(st, model, obs[t - 1], opts);
    os << t << ',' << pl.mean(0) << ',' << pl.mean(1) << ','
       << std::log(pl.cov.determinant());
    for (const auto& k : st.gain) os << ',' << k.norm();
    os << '\n';
  }
}

std::vector<double> stacked_kalman_logliks(const FldsModel& model,
                                           const ObservationSeries& obs,
                                           NoiseCoupling coupling) {
  check_model(model);
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const auto m = static_cast<Eigen::Index>(model.size());
  const Eigen::Index n = 2 * m;
  MatrixXd g = MatrixXd::Zero(n, n), c(2, n), q(n, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    g.block<2, 2>(2 * i, 2 * i) = model.sources[i].G;
    c.block<2, 2>(0, 2 * i) = model.sources[i].C;
  }
  MatrixXd r;
  if (coupling == NoiseCoupling::kIndependent) {
    q = MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < m; ++i) q.block<2, 2>(2 * i, 2 * i) = model.Q();
    r = static_cast<double>(m) * model.R();
  } else {
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j) q.block<2, 2>(2 * i, 2 * j) = model.Q();
    r = static_cast<double>(m * m) * model.R();
  }
  VectorXd mean = VectorXd::Zero(n);
  MatrixXd cov = q;
  std::vector<double> out;
  out.reserve(obs.size());
  for (std::size_t t = 0; t < obs.size(); ++t) {
    if (t > 0) {
      mean = g * mean;
      cov = g * cov * g.transpose() + q;
    }
    MatrixXd s = c * cov * c.transpose() + r;
    Vec2 innov = obs[t] - c * mean;
    out.push_back(log_gauss2(innov, Mat2(s)));
    MatrixXd k = cov * c.transpose() * s.inverse();
    mean += k * innov;
    cov = cov - k * c * cov;
    cov = 0.5 * (cov + cov.transpose());
  }
  return out;
}

}  // namespace iflds
