#include "iflds/learn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace iflds {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Mat2 fixed(const Eigen::MatrixXd& m) { return Mat2(m); }

struct Gauss2Inv {
  Mat2 inv;
  double log_det = 0.0;

  explicit Gauss2Inv(const Mat2& cov) {
    Eigen::LLT<Mat2> llt(cov);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("covariance is not positive definite");
    }
    inv = llt.solve(Mat2::Identity());
    log_det = 2.0 * std::log(llt.matrixL()(0, 0) * llt.matrixL()(1, 1));
  }
  double log_density(const Vec2& v) const { return log_gauss2(v, inv, log_det); }
};

// log IW(sigma; n, s) for d = 2
double log_inv_wishart(const Mat2& sigma, double n, const Mat2& s) {
  constexpr double d = 2.0;
  double lmg = 0.5 * std::log(M_PI) + std::lgamma(0.5 * n) + std::lgamma(0.5 * (n - 1.0));
  Mat2 sigma_inv = sigma.inverse();
  return 0.5 * n * std::log(s.determinant()) - 0.5 * n * d * std::log(2.0) - lmg -
         0.5 * (n + d + 1.0) * std::log(sigma.determinant()) -
         0.5 * (s * sigma_inv).trace();
}

// log MN(a; m0, row_cov, col_prec^-1) for 2x2 matrices
double log_matrix_normal(const Mat2& a, const Mat2& m0, const Mat2& row_cov,
                         const Mat2& col_prec) {
  Mat2 diff = a - m0;
  double quad = (col_prec * diff.transpose() * row_cov.inverse() * diff).trace();
  return -2.0 * std::log(2.0 * M_PI) - std::log(row_cov.determinant()) +
         std::log(col_prec.determinant()) - 0.5 * quad;
}

double log_beta_density(double x, double a, double b) {
  return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) + std::lgamma(a + b) -
         std::lgamma(a) - std::lgamma(b);
}

Mat2 mean_of(const MniwPrior& p) { return fixed(p.M0); }
Mat2 prec_of(const MniwPrior& p) { return fixed(p.K0); }

void draw_new_chain_globals(Chain& c, const IfldsState& state, const Hyper& hyper,
                            RngHandle& rng) {
  c.b = sample_beta(hyper.beta0, hyper.beta1, rng);
  c.gamma = sample_beta(hyper.gamma0, hyper.gamma1, rng);
  c.G = fixed(sample_matrix_normal(hyper.mniw.M0, state.Q, hyper.mniw.K0, rng));
  c.C = fixed(sample_matrix_normal(hyper.mniw.M0, state.R, hyper.mniw.K0, rng));
}

}  // namespace

void Hyper::validate() const {
  if (!(alpha > 0.0) || !(beta0 > 0.0) || !(beta1 > 0.0) || !(gamma0 > 0.0) ||
      !(gamma1 > 0.0)) {
    throw SpecError("alpha, beta0, beta1, gamma0 and gamma1 must be positive");
  }
  if (!(empty_count_eps > 0.0)) throw SpecError("empty-count epsilon must be positive");
  mniw.validate();
  if (mniw.M0.rows() != 2 || mniw.M0.cols() != 2) {
    throw SpecError("MNIW prior must be 2x2 for this model");
  }
}

Hyper Hyper::reference(const ObservationSeries& obs, double s0_scale, double s0_divisor) {
  if (obs.size() < 2) throw SpecError("need at least two observations for S0");
  if (!(s0_scale > 0.0) || !(s0_divisor > 0.0)) {
    throw SpecError("S0 scale and divisor must be positive");
  }
  Vec2 mean = Vec2::Zero();
  for (const auto& p : obs.samples) mean += p;
  mean /= static_cast<double>(obs.size());
  Mat2 cov = Mat2::Zero();
  for (const auto& p : obs.samples) cov += (p - mean) * (p - mean).transpose();
  cov /= static_cast<double>(obs.size()) * s0_divisor;
  Hyper h;
  h.mniw.M0 = Eigen::MatrixXd::Zero(2, 2);
  h.mniw.K0 = Eigen::MatrixXd::Identity(2, 2);
  h.mniw.n0 = 4.0;
  h.mniw.S0 = s0_scale * cov;
  return h;
}

bool Chain::active() const {
  return std::any_of(s.begin(), s.end(), [](std::uint8_t v) { return v != 0; });
}

std::size_t IfldsState::active_count() const {
  return static_cast<std::size_t>(
      std::count_if(chains.begin(), chains.end(), [](const Chain& c) { return c.active(); }));
}

void IfldsState::validate() const {
  for (std::size_t m = 0; m < chains.size(); ++m) {
    const Chain& c = chains[m];
    if (c.s.size() != length || c.z.size() != length || c.x.size() != length) {
      throw SpecError("chain local variables do not match the series length");
    }
    for (double v : {c.a, c.b, c.gamma}) {
      if (!(v > 0.0 && v < 1.0)) throw SpecError("a, b and gamma must lie in (0, 1)");
    }
    if (m > 0 && chains[m - 1].a < c.a) throw SpecError("chains are not sorted by a");
    if (!c.G.allFinite() || !c.C.allFinite()) throw NumericalError("non-finite G or C");
  }
  if (!Q.allFinite() || !R.allFinite()) throw NumericalError("non-finite Q or R");
}

IfldsState initial_state(const Hyper& hyper, std::size_t length) {
  hyper.validate();
  if (length == 0) throw SpecError("series length must be positive");
  IfldsState st;
  st.length = length;
  const double dof = hyper.mniw.n0 - 3.0;
  Mat2 s0 = fixed(hyper.mniw.S0);
  // IW mean needs n0 > d + 1; otherwise fall back to S0 itself
  st.Q = dof > 0.0 ? Mat2(s0 / dof) : s0;
  st.R = st.Q;
  return st;
}

double marginal_transition(const Chain& c, bool sticky, bool from, bool to) {
  double p_on = from ? c.b : c.a;
  double move = to ? p_on : 1.0 - p_on;
  if (!sticky) return move;
  return c.gamma * (from == to ? 1.0 : 0.0) + (1.0 - c.gamma) * move;
}

double sample_slice_a(double upper, double alpha, std::size_t length, RngHandle& rng) {
  if (!(upper > 0.0 && upper <= 1.0)) throw SpecError("slice upper bound must lie in (0, 1]");
  if (!(alpha > 0.0)) throw SpecError("alpha must be positive");
  const double tn = static_cast<double>(length);
  double harmonic = 0.0;
  for (std::size_t t = 1; t <= length; ++t) harmonic += 1.0 / static_cast<double>(t);

  auto log_series = [&](double a) {
    // sum_{t<=T} (1-a)^t / t
    double q = 1.0 - a, pw = 1.0, s = 0.0;
    for (std::size_t t = 1; t <= length; ++t) {
      pw *= q;
      s += pw / static_cast<double>(t);
      if (pw < 1e-300) break;
    }
    return s;
  };
  auto log_target = [&](double a) {
    return alpha * log_series(a) + (alpha - 1.0) * std::log(a) + tn * std::log1p(-a);
  };
  // Envelope g(a) = min(a^-1, e^{alpha H} a^{alpha-1}); pieces meet at a* = e^{-H}.
  const double a_star = std::exp(-harmonic);
  const double cut = std::min(a_star, upper);
  // mass below the cut: e^{alpha H} cut^alpha / alpha (in log form)
  const double log_mass_low = alpha * harmonic + alpha * std::log(cut) - std::log(alpha);
  const double mass_high = upper > a_star ? std::log(upper / a_star) : 0.0;
  const double mass_low = std::exp(log_mass_low);
  const double p_low = mass_low / (mass_low + mass_high);
  auto log_envelope = [&](double a) {
    return std::min(-std::log(a), alpha * harmonic + (alpha - 1.0) * std::log(a));
  };

  for (int attempt = 0; attempt < 10000; ++attempt) {
    double a;
    if (rng.uniform() < p_low) {
      a = cut * std::pow(rng.uniform(), 1.0 / alpha);
    } else {
      a = a_star * std::exp(rng.uniform() * mass_high);
    }
    if (!(a > 0.0 && a < upper)) continue;
    if (std::log(rng.uniform()) < log_target(a) - log_envelope(a)) return a;
  }

  // Grid inverse CDF on 10^4 points, uniform in log a.
  constexpr int kGrid = 10000;
  const double lo = std::log(std::max(upper * 1e-12, 1e-300));
  const double hi = std::log(upper);
  std::vector<double> lw(kGrid);
  for (int i = 0; i < kGrid; ++i) {
    double la = lo + (hi - lo) * (i + 0.5) / kGrid;
    double a = std::exp(la);
    lw[i] = log_target(a) + la;  // Jacobian of the log grid
  }
  std::size_t k = sample_log_categorical(lw, rng);
  double la = lo + (hi - lo) * (static_cast<double>(k) + rng.uniform()) / kGrid;
  double a = std::exp(la);
  if (!(a > 0.0 && a < upper) || !std::isfinite(a)) {
    std::ostringstream msg;
    msg << "slice density sampling failed for upper=" << upper << ", alpha=" << alpha;
    throw NumericalError(msg.str());
  }
  return a;
}

SliceResult slice_extend_chains(IfldsState& state, const Hyper& hyper, RngHandle& rng,
                                std::size_t min_new) {
  hyper.validate();
  double min_active = 1.0;
  for (const Chain& c : state.chains) {
    if (c.active()) min_active = std::min(min_active, c.a);
  }
  SliceResult res;
  res.threshold = rng.uniform() * min_active;
  double upper = min_active;
  // Idle chains already present sit below the slice bound too; new chains
  // are drawn below the smallest a of the whole collection.
  for (const Chain& c : state.chains) upper = std::min(upper, c.a);
  Mat2 lq = chol_psd2(state.Q);
  const std::size_t required = std::max<std::size_t>(min_new, state.chains.empty() ? 1 : 0);
  while (true) {
    double a = sample_slice_a(upper, hyper.alpha, state.length, rng);
    const bool forced = res.added < required;
    if (a <= res.threshold && !forced) break;
    Chain c;
    c.a = a;
    draw_new_chain_globals(c, state, hyper, rng);
    c.s.assign(state.length, 0);
    c.z.assign(state.length, 1);
    c.x.resize(state.length);
    Vec2 x = Vec2::Zero();
    for (std::size_t t = 0; t < state.length; ++t) {
      x = sample_gauss2(x, lq, rng);
      c.x[t] = x;
    }
    state.chains.push_back(std::move(c));
    ++res.added;
    upper = a;
    if (a <= res.threshold && res.added >= required) break;
  }
  sort_chains(state);
  return res;
}

PgasDiagnostics pgas_sweep(IfldsState& state, const ObservationSeries& obs,
                           const Hyper& hyper, const PgasOptions& opts, RngHandle& rng) {
  if (obs.size() != state.length) throw SpecError("series length differs from the state");
  if (opts.particles == 0) throw SpecError("need at least one particle");
  PgasDiagnostics diag;
  const std::size_t m_count = state.size();
  const std::size_t n_part = opts.particles;
  const std::size_t len = state.length;
  if (m_count == 0 || n_part == 1) {
    diag.min_ess = diag.mean_ess = 1.0;
    if (m_count > 0) resample_sticky(state, hyper, rng);
    return diag;
  }

  const Mat2 lq = chol_psd2(state.Q);
  const Gauss2Inv q_inv(state.Q);
  std::vector<double> log_trans(m_count * 4);  // [m][from][to]
  std::vector<Mat2> cqc(m_count), qct(m_count);
  for (std::size_t m = 0; m < m_count; ++m) {
    const Chain& c = state.chains[m];
    for (int from = 0; from < 2; ++from)
      for (int to = 0; to < 2; ++to)
        log_trans[m * 4 + from * 2 + to] =
            std::log(marginal_transition(c, hyper.sticky, from, to));
    cqc[m] = c.C * state.Q * c.C.transpose();
    qct[m] = state.Q * c.C.transpose();
  }
  const Mat2 lr = chol_psd2(state.R);
  auto trans_lp = [&](std::size_t m, bool from, bool to) {
    return log_trans[m * 4 + (from ? 2 : 0) + (to ? 1 : 0)];
  };

  // history[t][i * M + m]
  std::vector<std::uint8_t> s_hist(len * n_part * m_count);
  std::vector<Vec2> x_hist(len * n_part * m_count);
  std::vector<std::uint32_t> anc(len * n_part, 0);
  std::vector<double> logw(n_part), logw_prev(n_part), anc_w(n_part);
  std::vector<Vec2> mu(m_count);
  std::vector<std::uint8_t> act(m_count);
  const std::size_t ref = n_part - 1;
  const std::size_t stride = n_part * m_count;
  double ess_sum = 0.0;
  diag.min_ess = static_cast<double>(n_part);

  for (std::size_t t = 0; t < len; ++t) {
    const Vec2& p = obs[t];
    std::uint8_t* s_now = &s_hist[t * stride];
    Vec2* x_now = &x_hist[t * stride];
    const std::uint8_t* s_prev = t > 0 ? &s_hist[(t - 1) * stride] : nullptr;
    const Vec2* x_prev = t > 0 ? &x_hist[(t - 1) * stride] : nullptr;
    std::uint32_t* a_now = &anc[t * n_part];

    // ancestors
    if (t > 0) {
      for (std::size_t i = 0; i < ref; ++i) {
        a_now[i] = static_cast<std::uint32_t>(sample_log_categorical(logw_prev, rng));
      }
      for (std::size_t j = 0; j < n_part; ++j) {
        double lw = logw_prev[j];
        if (lw == kNegInf) {
          anc_w[j] = kNegInf;
          continue;
        }
        for (std::size_t m = 0; m < m_count; ++m) {
          bool from = s_prev[j * m_count + m];
          bool to = state.chains[m].s[t];
          const Vec2& xp = x_prev[j * m_count + m];
          Vec2 mean = to ? Vec2(state.chains[m].G * xp) : xp;
          lw += trans_lp(m, from, to) + q_inv.log_density(state.chains[m].x[t] - mean);
        }
        anc_w[j] = lw;
      }
      a_now[ref] = static_cast<std::uint32_t>(sample_log_categorical(anc_w, rng));
    }

    for (std::size_t i = 0; i < n_part; ++i) {
      const bool is_ref = (i == ref);
      const std::size_t par = a_now[i];
      std::size_t n_active = 0;
      for (std::size_t m = 0; m < m_count; ++m) {
        bool from = t > 0 ? s_prev[par * m_count + m] : false;
        Vec2 xp = t > 0 ? x_prev[par * m_count + m] : Vec2::Zero();
        bool on;
        if (is_ref) {
          on = state.chains[m].s[t];
        } else {
          on = rng.uniform() < std::exp(trans_lp(m, from, true));
        }
        act[m] = on;
        n_active += on;
        mu[m] = on ? Vec2(state.chains[m].G * xp) : xp;
      }
      Vec2 pred_mean = Vec2::Zero();
      for (std::size_t m = 0; m < m_count; ++m) {
        if (act[m]) pred_mean += state.chains[m].C * mu[m];
      }
      Vec2* xi = &x_now[i * m_count];
      std::uint8_t* si = &s_now[i * m_count];
      for (std::size_t m = 0; m < m_count; ++m) si[m] = act[m];

      if (opts.proposal == ParticleProposal::kAdapted) {
        Mat2 pred_cov = state.R;
        for (std::size_t m = 0; m < m_count; ++m) {
          if (act[m]) pred_cov += cqc[m];
        }
        Eigen::LLT<Mat2> llt(pred_cov);
        if (llt.info() != Eigen::Success) {
          throw NumericalError("particle predictive covariance is not positive definite");
        }
        Vec2 innov = p - pred_mean;
        double log_det = 2.0 * std::log(llt.matrixL()(0, 0) * llt.matrixL()(1, 1));
        logw[i] = -0.5 * (innov.dot(llt.solve(innov)) + log_det) - 1.8378770664093453;
        if (is_ref) {
          for (std::size_t m = 0; m < m_count; ++m) xi[m] = state.chains[m].x[t];
        } else {
          // Draw from the prior, then correct by the conditional given p_t.
          Vec2 sim = sample_gauss2(Vec2::Zero(), lr, rng);
          for (std::size_t m = 0; m < m_count; ++m) {
            xi[m] = sample_gauss2(mu[m], lq, rng);
            if (act[m]) sim += state.chains[m].C * xi[m];
          }
          if (n_active > 0) {
            Vec2 corr = llt.solve(Vec2(p - sim));
            for (std::size_t m = 0; m < m_count; ++m) {
              if (act[m]) xi[m] += qct[m] * corr;
            }
          }
        }
      } else {
        if (is_ref) {
          for (std::size_t m = 0; m < m_count; ++m) xi[m] = state.chains[m].x[t];
        } else {
          for (std::size_t m = 0; m < m_count; ++m) xi[m] = sample_gauss2(mu[m], lq, rng);
        }
        Vec2 out = Vec2::Zero();
        for (std::size_t m = 0; m < m_count; ++m) {
          if (act[m]) out += state.chains[m].C * xi[m];
        }
        logw[i] = log_gauss2(p - out, state.R);
      }
    }

    double lse = log_sum_exp(logw);
    if (!std::isfinite(lse)) {
      std::ostringstream msg;
      msg << "all particle weights vanished at t=" << t + 1;
      throw NumericalError(msg.str());
    }
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < n_part; ++i) {
      double w = std::exp(logw[i] - lse);
      sum += w;
      sum_sq += w * w;
    }
    diag.max_weight_sum_error = std::max(diag.max_weight_sum_error, std::abs(sum - 1.0));
    double ess = 1.0 / sum_sq;
    diag.min_ess = std::min(diag.min_ess, ess);
    ess_sum += ess;
    logw_prev.swap(logw);
  }
  diag.mean_ess = ess_sum / static_cast<double>(len);

  // Draw the output trajectory and trace it back.
  std::size_t k = sample_log_categorical(logw_prev, rng);
  for (std::size_t t = len; t-- > 0;) {
    for (std::size_t m = 0; m < m_count; ++m) {
      state.chains[m].s[t] = s_hist[t * stride + k * m_count + m];
      state.chains[m].x[t] = x_hist[t * stride + k * m_count + m];
    }
    k = anc[t * n_part + k];
  }
  resample_sticky(state, hyper, rng);
  return diag;
}

namespace {

void resample_chain_sticky(Chain& c, bool sticky, RngHandle& rng) {
  std::uint8_t prev = 0;
  for (std::size_t t = 0; t < c.s.size(); ++t) {
    std::uint8_t cur = c.s[t];
    if (!sticky || cur != prev) {
      c.z[t] = 1;
    } else {
      double move = (prev ? c.b : c.a);
      double stay = cur ? move : 1.0 - move;
      double p1 = (1.0 - c.gamma) * stay;
      c.z[t] = rng.uniform() * (p1 + c.gamma) < p1 ? 1 : 0;
    }
    prev = cur;
  }
}

// log P(s) with z marginalized out
double log_path_prob(const Chain& c, bool sticky, const std::vector<std::uint8_t>& s) {
  double total = 0.0;
  bool prev = false;
  for (std::uint8_t cur : s) {
    total += std::log(marginal_transition(c, sticky, prev, cur));
    prev = cur;
  }
  return total;
}

struct OnPathFit {
  double log_lik = 0.0;
  std::vector<Vec2> mean;  // filtered
  std::vector<Mat2> cov;
};

// Kalman filter of residuals r_t = p_t - others_t on [t0, T) for a chain that
// is on throughout, starting from the known x_{t0-1}.
OnPathFit filter_on_path(const Chain& c, const IfldsState& state, const ObservationSeries& obs,
                         const std::vector<Vec2>& others, std::size_t t0) {
  OnPathFit fit;
  Vec2 m = t0 > 0 ? c.x[t0 - 1] : Vec2::Zero();
  Mat2 p = Mat2::Zero();
  for (std::size_t t = t0; t < state.length; ++t) {
    Vec2 m_pred = c.G * m;
    Mat2 p_pred = symmetrize(c.G * p * c.G.transpose() + state.Q);
    Mat2 s = symmetrize(c.C * p_pred * c.C.transpose() + state.R);
    Eigen::LLT<Mat2> llt(s);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("birth move innovation covariance is not positive definite");
    }
    Vec2 innov = obs[t] - others[t] - c.C * m_pred;
    double log_det = 2.0 * std::log(llt.matrixL()(0, 0) * llt.matrixL()(1, 1));
    fit.log_lik += -0.5 * (innov.dot(llt.solve(innov)) + log_det) - 1.8378770664093453;
    Eigen::Matrix2d gain = llt.solve(Mat2(c.C * p_pred)).transpose();
    m = m_pred + gain * innov;
    p = symmetrize(p_pred - gain * s * gain.transpose());
    fit.mean.push_back(m);
    fit.cov.push_back(p);
  }
  return fit;
}

double off_path_loglik(const IfldsState& state, const ObservationSeries& obs,
                       const std::vector<Vec2>& others, std::size_t t0) {
  const Gauss2Inv r_inv(state.R);
  double total = 0.0;
  for (std::size_t t = t0; t < state.length; ++t) total += r_inv.log_density(obs[t] - others[t]);
  return total;
}

}  // namespace

void resample_sticky(IfldsState& state, const Hyper& hyper, RngHandle& rng) {
  for (Chain& c : state.chains) resample_chain_sticky(c, hyper.sticky, rng);
}

BirthDeathStats birth_death_move(IfldsState& state, const ObservationSeries& obs,
                                 const Hyper& hyper, RngHandle& rng, double start_prob) {
  if (obs.size() != state.length) throw SpecError("series length differs from the state");
  if (!(start_prob > 0.0 && start_prob < 1.0)) throw SpecError("start probability must lie in (0, 1)");
  BirthDeathStats stats;
  const std::size_t len = state.length;
  if (len == 0) return stats;
  // q(t0): start_prob at t0 = 0, the rest spread uniformly
  auto log_q_t0 = [len, start_prob](std::size_t t0) {
    if (len == 1) return 0.0;
    return t0 == 0 ? std::log(start_prob)
                   : std::log((1.0 - start_prob) / static_cast<double>(len - 1));
  };
  const Mat2 lq = chol_psd2(state.Q);
  std::vector<Vec2> others(len);

  for (std::size_t m = 0; m < state.size(); ++m) {
    Chain& c = state.chains[m];
    // Shape check: off on [0, t0), on on [t0, T).
    std::size_t first_on = len;
    for (std::size_t t = 0; t < len; ++t) {
      if (c.s[t]) {
        first_on = t;
        break;
      }
    }
    const bool idle = first_on == len;
    bool tail_on = !idle;
    for (std::size_t t = first_on; t < len && tail_on; ++t) tail_on = c.s[t];
    if (!idle && !tail_on) continue;

    std::fill(others.begin(), others.end(), Vec2::Zero());
    for (std::size_t k = 0; k < state.size(); ++k) {
      if (k == m) continue;
      const Chain& o = state.chains[k];
      for (std::size_t t = 0; t < len; ++t) {
        if (o.s[t]) others[t] += o.C * o.x[t];
      }
    }

    std::size_t t0;
    if (idle) {
      t0 = (rng.uniform() < start_prob || len == 1)
               ? 0
               : 1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(len - 1));
      t0 = std::min(t0, len - 1);
    } else {
      t0 = first_on;
    }
    std::vector<std::uint8_t> s_on(len, 0), s_off(len, 0);
    std::fill(s_on.begin() + static_cast<std::ptrdiff_t>(t0), s_on.end(), 1);
    OnPathFit fit = filter_on_path(c, state, obs, others, t0);
    double log_birth = log_path_prob(c, hyper.sticky, s_on) -
                       log_path_prob(c, hyper.sticky, s_off) + fit.log_lik -
                       off_path_loglik(state, obs, others, t0) - log_q_t0(t0);

    if (idle) {
      ++stats.births_proposed;
      if (std::log(rng.uniform()) >= log_birth) continue;
      ++stats.births_accepted;
      // backward sampling
      const std::size_t n = fit.mean.size();
      Vec2 next = sample_gauss2(fit.mean[n - 1], chol_psd2(fit.cov[n - 1]), rng);
      c.x[len - 1] = next;
      for (std::size_t k = n - 1; k-- > 0;) {
        const Mat2& p = fit.cov[k];
        Mat2 p_pred = symmetrize(c.G * p * c.G.transpose() + state.Q);
        Eigen::LLT<Mat2> llt(p_pred);
        Mat2 j = llt.solve(Mat2(c.G * p)).transpose();
        Vec2 mean = fit.mean[k] + j * (next - c.G * fit.mean[k]);
        Mat2 cov = symmetrize(p - j * c.G * p);
        next = sample_gauss2(mean, chol_psd2(clamp_psd(cov)), rng);
        c.x[t0 + k] = next;
      }
      c.s = std::move(s_on);
    } else {
      ++stats.deaths_proposed;
      if (std::log(rng.uniform()) >= -log_birth) continue;
      ++stats.deaths_accepted;
      Vec2 x = t0 > 0 ? c.x[t0 - 1] : Vec2::Zero();
      for (std::size_t t = t0; t < len; ++t) {
        x = sample_gauss2(x, lq, rng);
        c.x[t] = x;
      }
      c.s = std::move(s_off);
    }
    resample_chain_sticky(c, hyper.sticky, rng);
  }
  return stats;
}

TransitionCounts count_transitions(const Chain& chain) {
  TransitionCounts n;
  std::uint8_t prev = 0;
  for (std::size_t t = 0; t < chain.s.size(); ++t) {
    std::uint8_t cur = chain.s[t];
    if (chain.z[t]) {
      ++n.n1_sticky;
      if (prev == 0) (cur ? n.n01 : n.n00)++;
      else (cur ? n.n11 : n.n10)++;
    } else {
      ++n.n0_sticky;
    }
    prev = cur;
  }
  return n;
}

SuffStats transition_stats(const Chain& chain, const MniwPrior& prior) {
  SuffStats st;
  const Mat2 m0 = mean_of(prior);
  const Mat2 k0 = prec_of(prior);
  Mat2 bb = Mat2::Zero(), pb = Mat2::Zero(), pp = Mat2::Zero();
  Vec2 prev = Vec2::Zero();
  for (std::size_t t = 0; t < chain.x.size(); ++t) {
    const Vec2& cur = chain.x[t];
    if (chain.s[t]) {
      bb += prev * prev.transpose();
      pb += cur * prev.transpose();
      pp += cur * cur.transpose();
      ++st.transitions;
    } else {
      Vec2 d = cur - prev;
      st.idle_scatter += d * d.transpose();
      ++st.idle_steps;
    }
    prev = cur;
  }
  st.s_bb = symmetrize(bb + k0);
  st.s_pb = pb + m0 * k0;
  st.s_pp = symmetrize(pp + m0 * k0 * m0.transpose());
  Eigen::LLT<Mat2> llt(st.s_bb);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("transition statistic S_bb is singular");
  }
  st.s_cond = symmetrize(st.s_pp - st.s_pb * llt.solve(Mat2(st.s_pb.transpose())));
  return st;
}

Mat2 posterior_transition_mean(const SuffStats& stats) {
  Eigen::LLT<Mat2> llt(stats.s_bb);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("transition statistic S_bb is singular");
  }
  return llt.solve(Mat2(stats.s_pb.transpose())).transpose();
}

void gibbs_globals(IfldsState& state, const ObservationSeries& obs, const Hyper& hyper,
                   RngHandle& rng) {
  hyper.validate();
  if (obs.size() != state.length) throw SpecError("series length differs from the state");
  const double eps = hyper.empty_count_eps;
  auto shape = [eps](double v) { return v > 0.0 ? v : eps; };

  for (Chain& c : state.chains) {
    TransitionCounts n = count_transitions(c);
    c.a = sample_beta(shape(double(n.n01)), 1.0 + double(n.n00), rng);
    c.b = sample_beta(hyper.beta0 + double(n.n11), hyper.beta1 + double(n.n10), rng);
    if (hyper.sticky) {
      c.gamma = sample_beta(hyper.gamma0 + double(n.n0_sticky),
                            hyper.gamma1 + double(n.n1_sticky), rng);
    }
  }

  // (G, Q): Q shared, G^m marginalized out of Q's conditional.
  const Mat2 s0 = fixed(hyper.mniw.S0);
  std::vector<SuffStats> stats;
  stats.reserve(state.size());
  Mat2 q_scale = s0;
  double q_dof = hyper.mniw.n0;
  for (const Chain& c : state.chains) {
    stats.push_back(transition_stats(c, hyper.mniw));
    q_scale += stats.back().s_cond + stats.back().idle_scatter;
    q_dof += static_cast<double>(stats.back().transitions + stats.back().idle_steps);
  }
  if (!state.chains.empty()) {
    state.Q = fixed(sample_inv_wishart(q_dof, symmetrize(q_scale), rng));
    for (std::size_t m = 0; m < state.size(); ++m) {
      Mat2 mean = posterior_transition_mean(stats[m]);
      state.chains[m].G = fixed(sample_matrix_normal(mean, state.Q, stats[m].s_bb, rng));
    }
  }

  // (C, R): one weighted regression of p_t on the stacked active states.
  const auto m_count = static_cast<Eigen::Index>(state.size());
  const Eigen::Index k = 2 * m_count;
  const Mat2 m0 = mean_of(hyper.mniw);
  const Mat2 k0 = prec_of(hyper.mniw);
  Eigen::MatrixXd s_ff = Eigen::MatrixXd::Zero(k, k);
  Eigen::MatrixXd s_pf = Eigen::MatrixXd::Zero(2, k);
  Mat2 s_pp = Mat2::Zero();
  for (Eigen::Index m = 0; m < m_count; ++m) {
    s_ff.block<2, 2>(2 * m, 2 * m) = k0;
    s_pf.block<2, 2>(0, 2 * m) = m0 * k0;
    s_pp += m0 * k0 * m0.transpose();
  }
  Eigen::VectorXd phi(k);
  for (std::size_t t = 0; t < state.length; ++t) {
    bool any = false;
    for (Eigen::Index m = 0; m < m_count; ++m) {
      const Chain& c = state.chains[m];
      if (c.s[t]) {
        phi.segment<2>(2 * m) = c.x[t];
        any = true;
      } else {
        phi.segment<2>(2 * m).setZero();
      }
    }
    const Vec2& p = obs[t];
    s_pp += p * p.transpose();
    if (any) {
      s_ff.noalias() += phi * phi.transpose();
      s_pf.noalias() += p * phi.transpose();
    }
  }
  if (m_count > 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(s_ff);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("output regression statistic is singular");
    }
    Eigen::MatrixXd coef = llt.solve(s_pf.transpose()).transpose();  // 2 x k
    Mat2 r_scale = symmetrize(s0 + s_pp - Mat2(coef * s_pf.transpose()));
    state.R = fixed(sample_inv_wishart(hyper.mniw.n0 + static_cast<double>(state.length),
                                       r_scale, rng));
    Eigen::MatrixXd c_stack = sample_matrix_normal(coef, state.R, s_ff, rng);
    for (Eigen::Index m = 0; m < m_count; ++m) {
      state.chains[m].C = c_stack.block<2, 2>(0, 2 * m);
    }
  }
  sort_chains(state);
}

std::size_t prune_idle_chains(IfldsState& state) {
  const std::size_t before = state.size();
  std::erase_if(state.chains, [](const Chain& c) { return !c.active(); });
  return before - state.size();
}

void sort_chains(IfldsState& state) {
  std::stable_sort(state.chains.begin(), state.chains.end(),
                   [](const Chain& l, const Chain& r) { return l.a > r.a; });
}

double joint_log_density(const IfldsState& state, const ObservationSeries& obs,
                         const Hyper& hyper) {
  if (obs.size() != state.length) throw SpecError("series length differs from the state");
  const Gauss2Inv q_inv(state.Q);
  double total = 0.0;
  const Gauss2Inv r_inv(state.R);
  for (std::size_t t = 0; t < state.length; ++t) {
    Vec2 mean = Vec2::Zero();
    for (const Chain& c : state.chains) {
      if (c.s[t]) mean += c.C * c.x[t];
    }
    total += r_inv.log_density(obs[t] - mean);
  }
  for (const Chain& c : state.chains) {
    Vec2 prev = Vec2::Zero();
    std::uint8_t s_prev = 0;
    for (std::size_t t = 0; t < state.length; ++t) {
      Vec2 mean = c.s[t] ? Vec2(c.G * prev) : prev;
      total += q_inv.log_density(c.x[t] - mean);
      if (c.z[t]) {
        total += std::log(sticky_transition_prob(c.a, c.b, true, s_prev, c.s[t]));
      } else if (c.s[t] != s_prev) {
        return kNegInf;
      }
      if (hyper.sticky) total += std::log(c.z[t] ? 1.0 - c.gamma : c.gamma);
      prev = c.x[t];
      s_prev = c.s[t];
    }
    total += log_beta_density(c.b, hyper.beta0, hyper.beta1);
    if (hyper.sticky) total += log_beta_density(c.gamma, hyper.gamma0, hyper.gamma1);
    const Mat2 m0 = mean_of(hyper.mniw), k0 = prec_of(hyper.mniw);
    total += log_matrix_normal(c.G, m0, state.Q, k0);
    total += log_matrix_normal(c.C, m0, state.R, k0);
  }
  const Mat2 s0 = fixed(hyper.mniw.S0);
  total += log_inv_wishart(state.Q, hyper.mniw.n0, s0);
  total += log_inv_wishart(state.R, hyper.mniw.n0, s0);
  return total;
}

std::size_t mode_of(const std::vector<std::size_t>& counts) {
  if (counts.empty()) return 0;
  std::map<std::size_t, std::size_t> freq;
  for (std::size_t c : counts) ++freq[c];
  std::size_t best = 0, best_n = 0;
  for (const auto& [value, n] : freq) {
    if (n > best_n) {
      best = value;
      best_n = n;
    }
  }
  return best;
}

LearnResult learn(const ObservationSeries& obs, const Hyper& hyper,
                  const LearnOptions& opts, RngHandle& rng) {
  if (opts.iterations == 0) throw SpecError("need at least one iteration");
  if (obs.size() == 0) throw SpecError("empty observation series");
  IfldsState state = initial_state(hyper, obs.size());
  if (opts.initial) {
    if (opts.initial->length != obs.size()) {
      throw SpecError("starting state length differs from the series");
    }
    opts.initial->validate();
    state = *opts.initial;
  }
  LearnResult res;
  res.trace.reserve(opts.iterations);
  struct Best {
    double density = kNegInf;
    std::size_t iteration = 0;
    IfldsState state;
  };
  std::map<std::size_t, Best> best;
  for (std::size_t it = 1; it <= opts.iterations; ++it) {
    slice_extend_chains(state, hyper, rng, opts.auxiliary_chains);
    if (opts.birth_interval > 0 && it % opts.birth_interval == 0) {
      birth_death_move(state, obs, hyper, rng, opts.birth_start_prob);
    }
    pgas_sweep(state, obs, hyper, opts.pgas, rng);
    gibbs_globals(state, obs, hyper, rng);
    prune_idle_chains(state);

    IterationRecord rec;
    rec.iteration = it;
    rec.chains = state.size();
    rec.active = state.active_count();
    for (const Chain& c : state.chains) {
      rec.a.push_back(c.a);
      rec.b.push_back(c.b);
      rec.gamma.push_back(c.gamma);
      rec.G.push_back(c.G);
      rec.C.push_back(c.C);
    }
    rec.Q = state.Q;
    rec.R = state.R;
    rec.joint_log_density = joint_log_density(state, obs, hyper);
    // Densities of states with different chain counts are not comparable, so
    // keep the best iterate per active count over the second half and pick
    // the one matching M_hat at the end.
    if (it > opts.iterations / 2) {
      auto [slot, fresh] = best.try_emplace(rec.active);
      if (fresh || rec.joint_log_density > slot->second.density) {
        slot->second = {rec.joint_log_density, it, state};
      }
    }
    if (opts.on_iteration) opts.on_iteration(rec);
    res.trace.push_back(std::move(rec));
  }
  std::vector<std::size_t> counts;
  for (std::size_t i = res.trace.size() / 2; i < res.trace.size(); ++i) {
    counts.push_back(res.trace[i].active);
  }
  res.m_hat = mode_of(counts);
  Best& chosen = best.at(res.m_hat);
  res.point_estimate = std::move(chosen.state);
  res.point_iteration = chosen.iteration;
  res.final_state = std::move(state);
  return res;
}

double reconstruction_error(const ObservationSeries& obs, const IfldsState& state) {
  if (obs.size() != state.length) throw SpecError("series length differs from the state");
  if (obs.size() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < obs.size(); ++t) {
    Vec2 fit = Vec2::Zero();
    for (const Chain& c : state.chains) {
      if (c.s[t]) fit += c.C * c.x[t];
    }
    total += (obs[t] - fit).squaredNorm();
  }
  return total / static_cast<double>(obs.size());
}

FldsModel to_flds_model(const IfldsState& state) {
  FldsModel model;
  model.shared_noise = true;
  std::size_t active = state.active_count();
  if (active == 0) throw SpecError("learned state has no active chains");
  for (const Chain& c : state.chains) {
    if (!c.active()) continue;
    LdsParams p;
    p.G = c.G;
    p.C = c.C;
    p.Q = state.Q;
    p.R = state.R / static_cast<double>(active * active);
    model.sources.push_back(p);
  }
  return model;
}

}  // namespace iflds
