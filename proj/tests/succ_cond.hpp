#pragma once

// Successive-conditional check of posterior invariance for the learner's
// local-variable kernels on a single chain with fixed global variables.
// theta_0 is drawn from the prior, then p | theta and theta | p (one kernel
// application) alternate. If the kernel leaves p(theta | p) invariant, theta_J
// is again a prior draw, so its rank among independent prior draws is uniform.

#include "iflds/learn.hpp"
#include "oracles.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace succ {

using namespace iflds;

struct ToyModel {
  Chain globals;  // a, b, gamma, G, C
  Mat2 Q = Mat2::Identity();
  Mat2 R = Mat2::Identity();
  std::size_t length = 20;
  bool sticky = true;
};

inline ToyModel default_toy() {
  ToyModel toy;
  toy.globals.a = 0.2;
  toy.globals.b = 0.8;
  toy.globals.gamma = 0.5;
  const double c = std::cos(0.4), s = std::sin(0.4);
  toy.globals.G = 0.9 * Mat2{{c, -s}, {s, c}};
  toy.globals.C = Mat2::Identity();
  toy.Q = 0.5 * Mat2::Identity();
  toy.R = 0.3 * Mat2::Identity();
  return toy;
}

inline IfldsState prior_state(const ToyModel& toy, RngHandle& rng) {
  IfldsState st;
  st.length = toy.length;
  st.Q = toy.Q;
  st.R = toy.R;
  Chain c = toy.globals;
  c.s.assign(toy.length, 0);
  c.z.assign(toy.length, 1);
  c.x.assign(toy.length, Vec2::Zero());
  const Mat2 lq = chol_psd2(toy.Q);
  std::uint8_t prev = 0;
  Vec2 x = Vec2::Zero();
  for (std::size_t t = 0; t < toy.length; ++t) {
    std::uint8_t z = toy.sticky ? (rng.uniform() < 1.0 - c.gamma) : 1;
    std::uint8_t s = z ? rng.bernoulli(prev ? c.b : c.a) : prev;
    x = sample_gauss2(s ? Vec2(c.G * x) : x, lq, rng);
    c.s[t] = s;
    c.z[t] = z;
    c.x[t] = x;
    prev = s;
  }
  st.chains.push_back(std::move(c));
  return st;
}

inline ObservationSeries draw_obs(const IfldsState& st, RngHandle& rng) {
  ObservationSeries obs;
  const Mat2 lr = chol_psd2(st.R);
  for (std::size_t t = 0; t < st.length; ++t) {
    Vec2 mean = Vec2::Zero();
    for (const Chain& c : st.chains) {
      if (c.s[t]) mean += c.C * c.x[t];
    }
    obs.samples.push_back(sample_gauss2(mean, lr, rng));
  }
  return obs;
}

inline double x_sum(const IfldsState& st) {
  double v = 0.0;
  for (const Vec2& x : st.chains[0].x) v += x[0];
  return v;
}

inline double active_steps(const IfldsState& st) {
  double v = 0.0;
  for (std::uint8_t s : st.chains[0].s) v += s;
  return v;
}

using Kernel = std::function<void(IfldsState&, const ObservationSeries&, RngHandle&)>;
using Functional = std::function<double(const IfldsState&)>;

struct RankTest {
  std::vector<double> p_values;  // one per functional
};

// Ranks use L = bins - 1 reference draws; ties are broken uniformly.
inline RankTest run(const ToyModel& toy, const Kernel& kernel,
                    const std::vector<Functional>& functionals, std::size_t runs,
                    std::size_t steps, std::size_t bins, std::uint64_t seed) {
  std::vector<std::vector<double>> counts(functionals.size(), std::vector<double>(bins, 0.0));
  for (std::size_t r = 0; r < runs; ++r) {
    RngHandle rng(seed, r);
    IfldsState st = prior_state(toy, rng);
    for (std::size_t j = 0; j < steps; ++j) {
      ObservationSeries obs = draw_obs(st, rng);
      kernel(st, obs, rng);
    }
    std::vector<IfldsState> refs;
    for (std::size_t l = 0; l + 1 < bins; ++l) refs.push_back(prior_state(toy, rng));
    for (std::size_t f = 0; f < functionals.size(); ++f) {
      double v = functionals[f](st);
      std::size_t less = 0, equal = 0;
      for (const IfldsState& ref : refs) {
        double u = functionals[f](ref);
        less += u < v;
        equal += u == v;
      }
      std::size_t rank = less + static_cast<std::size_t>(rng.uniform() * double(equal + 1));
      counts[f][std::min(rank, bins - 1)] += 1.0;
    }
  }
  RankTest out;
  const double expect = double(runs) / double(bins);
  for (const auto& c : counts) {
    double chi2 = 0.0;
    for (double n : c) chi2 += (n - expect) * (n - expect) / expect;
    out.p_values.push_back(oracle::chi2_sf(chi2, double(bins - 1)));
  }
  return out;
}

}  // namespace succ
