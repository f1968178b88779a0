#pragma once

#include "iflds/model.hpp"
#include "iflds/rand_dist.hpp"
#include "iflds/types.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace iflds {

struct Hyper {
  double alpha = 1.0;
  double beta0 = 2.0;
  double beta1 = 0.1;
  double gamma0 = 10.0;
  double gamma1 = 1.0;
  // Shared by (G, Q) and (C, R).
  MniwPrior mniw;
  // false forces z = 1 everywhere (plain Markov IBP).
  bool sticky = true;
  // Replaces a zero Beta shape in the a^m posterior.
  double empty_count_eps = 1e-6;

  void validate() const;

  // M0 = 0, K0 = I, n0 = 4, S0 = scale * sample covariance of p / divisor.
  static Hyper reference(const ObservationSeries& obs, double s0_scale = 0.75,
                         double s0_divisor = 1.0);
};

// One Markov chain of the IFLDS with its local and global variables.
// s, z and x are indexed by t = 0..T-1 (time 1..T); s_0 = 0 and x_0 = 0 are
// implicit.
struct Chain {
  double a = 0.5;      // P(s_t = 1 | s_{t-1} = 0, z_t = 1)
  double b = 0.5;      // P(s_t = 1 | s_{t-1} = 1, z_t = 1)
  double gamma = 0.5;  // P(z_t = 0), the sticky probability
  Mat2 G = Mat2::Zero();
  Mat2 C = Mat2::Zero();
  std::vector<std::uint8_t> s;
  std::vector<std::uint8_t> z;
  std::vector<Vec2> x;

  bool active() const;
};

struct IfldsState {
  std::vector<Chain> chains;
  Mat2 Q = Mat2::Identity();
  Mat2 R = Mat2::Identity();
  std::size_t length = 0;

  std::size_t size() const { return chains.size(); }
  std::size_t active_count() const;
  // Sizes, ranges, sorted a and finiteness.
  void validate() const;
};

// Empty state (no chains) with Q and R at the prior mean.
IfldsState initial_state(const Hyper& hyper, std::size_t length);

// Marginal over z of P(s_t = to | s_{t-1} = from).
double marginal_transition(const Chain& chain, bool sticky, bool from, bool to);

// Draws a from the slice density
//   exp(alpha sum_{t<=T} (1-a)^t / t) a^(alpha-1) (1-a)^T  on (0, upper)
// by rejection, falling back to a 10^4-point grid inverse CDF.
double sample_slice_a(double upper, double alpha, std::size_t length, RngHandle& rng);

struct SliceResult {
  double threshold = 0.0;  // the slice variable
  std::size_t added = 0;
};

// Appends all-idle chains (s = 0, z = 1) whose a exceeds the slice variable.
// At least min_new chains are appended (at least one when the state is
// empty), continuing the stick below the slice if needed. Global variables of
// new chains come from the prior given the shared Q, R; their latent paths
// are random walks from x_0 = 0.
SliceResult slice_extend_chains(IfldsState& state, const Hyper& hyper, RngHandle& rng,
                                std::size_t min_new = 0);

enum class ParticleProposal {
  // x_t drawn from p(x_t | x_{t-1}, s_t, p_t); weight is the predictive of p_t.
  kAdapted,
  // x_t drawn from the transition; weight is the observation density.
  kPrior,
};

struct PgasOptions {
  std::size_t particles = 20;
  ParticleProposal proposal = ParticleProposal::kAdapted;
};

struct PgasDiagnostics {
  // max over t of |sum of normalized weights - 1|
  double max_weight_sum_error = 0.0;
  double min_ess = 0.0;
  double mean_ess = 0.0;
};

// Resamples (S, X) of every chain with PGAS conditioned on the current
// trajectory as the reference, then Z from its full conditional.
PgasDiagnostics pgas_sweep(IfldsState& state, const ObservationSeries& obs,
                           const Hyper& hyper, const PgasOptions& opts, RngHandle& rng);

// Redraws z given s for every chain.
void resample_sticky(IfldsState& state, const Hyper& hyper, RngHandle& rng);

struct BirthDeathStats {
  std::size_t births_proposed = 0, births_accepted = 0;
  std::size_t deaths_proposed = 0, deaths_accepted = 0;
};

// Metropolis-Hastings move over whole activity paths. An all-idle chain may
// switch on from a time t0 through T (t0 = 1 with probability start_prob,
// else uniform), with x on [t0, T] drawn from its exact Gaussian conditional by
// forward filtering and backward sampling; a chain of that shape may switch
// off, with x redrawn as a random walk. The acceptance ratio uses the Kalman
// marginal likelihood of the residual, so the posterior is left invariant.
BirthDeathStats birth_death_move(IfldsState& state, const ObservationSeries& obs,
                                 const Hyper& hyper, RngHandle& rng, double start_prob = 0.5);

struct TransitionCounts {
  std::size_t n00 = 0, n01 = 0, n10 = 0, n11 = 0;
  // z_t = 0 and z_t = 1 counts.
  std::size_t n0_sticky = 0, n1_sticky = 0;
};

TransitionCounts count_transitions(const Chain& chain);

// Regression statistics of the active transitions psi_t = x_t on
// psi_bar_t = x_{t-1}, regularized by the prior.
struct SuffStats {
  Mat2 s_bb = Mat2::Zero();    // psi_bar psi_bar' + K0
  Mat2 s_pb = Mat2::Zero();    // psi psi_bar' + M0 K0
  Mat2 s_pp = Mat2::Zero();    // psi psi' + M0 K0 M0'
  Mat2 s_cond = Mat2::Zero();  // s_pp - s_pb s_bb^-1 s_pb'
  std::size_t transitions = 0;
  // Increments x_t - x_{t-1} of idle steps.
  Mat2 idle_scatter = Mat2::Zero();
  std::size_t idle_steps = 0;
};

SuffStats transition_stats(const Chain& chain, const MniwPrior& prior);
Mat2 posterior_transition_mean(const SuffStats& stats);

// a, b, gamma from their Beta posteriors; (G, Q) and (C, R) from the
// conjugate MNIW posteriors; chains re-sorted by decreasing a.
void gibbs_globals(IfldsState& state, const ObservationSeries& obs, const Hyper& hyper,
                   RngHandle& rng);

// Removes chains with s = 0 everywhere. Returns the number removed.
std::size_t prune_idle_chains(IfldsState& state);
void sort_chains(IfldsState& state);

// log of the joint density of (P, X, S, Z, b, gamma, G, C, Q, R) given a,
// leaving out the stick-breaking prior on a.
double joint_log_density(const IfldsState& state, const ObservationSeries& obs,
                         const Hyper& hyper);

struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t chains = 0;
  std::size_t active = 0;
  std::vector<double> a, b, gamma;
  std::vector<Mat2> G, C;
  Mat2 Q = Mat2::Zero();
  Mat2 R = Mat2::Zero();
  double joint_log_density = 0.0;
};

struct LearnOptions {
  std::size_t iterations = 300;
  PgasOptions pgas;
  // Runs birth_death_move between the slice step and PGAS on every
  // birth_interval-th iteration (0 disables it).
  std::size_t birth_interval = 5;
  double birth_start_prob = 0.95;
  // Idle chains the slice step always appends, offering the birth move a
  // candidate even when every active a sits far above 1/T.
  std::size_t auxiliary_chains = 1;
  // Starting state (e.g. a checkpoint); empty starts from initial_state.
  std::optional<IfldsState> initial;
  // Called after every iteration.
  std::function<void(const IterationRecord&)> on_iteration;
};

struct LearnResult {
  std::vector<IterationRecord> trace;
  // Highest joint density iterate among second-half iterations with m_hat
  // active chains.
  IfldsState point_estimate;
  std::size_t point_iteration = 0;
  // State after the last iteration, the point to resume from.
  IfldsState final_state;
  // Mode of the active-chain count over the second half of the trace.
  std::size_t m_hat = 0;
};

LearnResult learn(const ObservationSeries& obs, const Hyper& hyper,
                  const LearnOptions& opts, RngHandle& rng);

// Mode of `counts` (smallest value on ties).
std::size_t mode_of(const std::vector<std::size_t>& counts);

// Mean over t of |p_t - sum_m s_t^m C^m x_t^m|^2.
double reconstruction_error(const ObservationSeries& obs, const IfldsState& state);

// FLDS over the active chains. The learner's R is the total observation noise,
// so each source gets R / M^2 to match the factorial filter's M^2 R.
FldsModel to_flds_model(const IfldsState& state);

}  // namespace iflds
