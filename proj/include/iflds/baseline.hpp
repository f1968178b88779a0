#pragma once

#include "iflds/model.hpp"
#include "iflds/types.hpp"

#include <cstddef>
#include <vector>

namespace iflds {

struct GaussianFit {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
};

// Maximum-likelihood mean and covariance (divisor N). Needs at least two
// samples and a positive definite result.
GaussianFit fit_gaussian(const ObservationSeries& obs);

// Smoothed moments of a single LDS with x_0 = 0, so x_1 ~ N(0, Q).
struct LdsSmoothed {
  std::vector<Vec2> mean;
  std::vector<Mat2> cov;
  // cross[t] = Cov(x_{t+1}, x_t | p_1..p_T), t = 0..T-2
  std::vector<Mat2> cross;
  double log_likelihood = 0.0;
};

LdsSmoothed lds_smooth(const LdsParams& lds, const ObservationSeries& obs);

struct LdsEmOptions {
  std::size_t iterations = 50;
  // Starting point: G = g0 I, C = I, Q = R = sample covariance / 2.
  double g0 = 0.5;
  // Added to the diagonals of Q and R after every M-step.
  double floor = 1e-9;
};

struct LdsEmResult {
  LdsParams lds;
  // Log-likelihood of the parameters entering each iteration, then of the
  // final parameters (iterations + 1 entries).
  std::vector<double> log_likelihood;

  FldsModel model() const { return FldsModel{{lds}, true}; }
};

LdsEmResult fit_lds_em(const ObservationSeries& obs, const LdsEmOptions& opts = {});

}  // namespace iflds
