#pragma once

#include "iflds/rand_dist.hpp"
#include "iflds/types.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace iflds {

// One background source: x' = G x + w, out = C x + v, w ~ N(0,Q), v ~ N(0,R).
struct LdsParams {
  Mat2 G = Mat2::Identity();
  Mat2 C = Mat2::Identity();
  Mat2 Q = Mat2::Identity();
  Mat2 R = Mat2::Identity();

  // Rejects non-finite entries and asymmetric or indefinite Q, R.
  void validate() const;
  double spectral_radius() const { return iflds::spectral_radius(G); }
};

struct FldsModel {
  std::vector<LdsParams> sources;
  bool shared_noise = true;

  std::size_t size() const { return sources.size(); }
  void validate() const;
  const Mat2& Q() const { return sources.front().Q; }
  const Mat2& R() const { return sources.front().R; }
};

// G = eps * rotation(theta), C and Q = R = 0.01 I as in the reference
// four-emitter scenario.
LdsParams rotation_source(double eps, double theta, double noise = 0.01);
Mat2 reference_output_matrix();
// First `m` (1..4) of the reference emitters.
FldsModel reference_model(std::size_t m);

struct ObservationSeries {
  std::vector<Vec2> samples;
  std::optional<double> sample_period;

  std::size_t size() const { return samples.size(); }
  const Vec2& operator[](std::size_t t) const { return samples[t]; }
};

// Transient signal y_t on [arrival, arrival + duration), 1-based indices.
struct SoiProfile {
  std::size_t arrival = 1;
  std::size_t duration = 1;
  // Called with the 1-based time index.
  std::function<Vec2(std::size_t)> waveform;

  static SoiProfile constant(std::size_t arrival, std::size_t duration,
                             const Vec2& amplitude);
  void validate() const;
};

enum class InitialState { kGaussian, kZero };

// kIndependent: each source draws its own process and observation noise, so
// the summed observation noise has covariance M R.
// kShared: one process-noise draw drives every source and the observation
// noise is M v for a single v (covariance M^2 R).
enum class NoiseCoupling { kIndependent, kShared };

struct SimulationOptions {
  InitialState initial = InitialState::kGaussian;
  NoiseCoupling coupling = NoiseCoupling::kIndependent;
  double blowup_limit = 1e12;
};

struct SimulationResult {
  ObservationSeries observations;
  // latent[m][t], t = 0..length-1
  std::vector<std::vector<Vec2>> latent;
  std::vector<std::string> warnings;
};

SimulationResult simulate_flds(const FldsModel& model, std::size_t length,
                               RngHandle& rng, const SimulationOptions& opts = {});

// Independent coupling with one caller-supplied stream per source.
SimulationResult simulate_flds(const FldsModel& model, std::size_t length,
                               std::span<RngHandle> source_rngs,
                               const SimulationOptions& opts = {});

ObservationSeries inject_soi(const ObservationSeries& series, const SoiProfile& soi);

// P(s_t = to | s_{t-1} = from, z_t = z) for the sticky two-state chain.
double sticky_transition_prob(double a, double b, bool z, bool from, bool to);

struct CommScenarioConfig {
  double sample_rate_hz = 10e6;
  std::size_t length = 51200;
  double bpsk_symbol_rate_hz = 1e6;
  double qpsk_symbol_rate_hz = 0.5e6;
  double bpsk_amplitude = 1.0;
  double qpsk_amplitude = 1.0;
  double bpsk_freq_offset_hz = 0.3e6;
  double qpsk_freq_offset_hz = -0.7e6;
  double noise_std = 0.1;  // per I/Q component
  double prf_hz = 3e3;
  double duty_cycle = 0.08;
  // When set, overrides duty_cycle * period for the pulse width. A 20 us
  // pulse is 200 samples at 10 MHz, which 8% of a 3 kHz period is not.
  std::optional<double> pulse_width_s = 20e-6;
  std::size_t pulse_offset = 0;
  // Pulse amplitude is chosen from the nominal background power to hit this.
  std::optional<double> sinr_db;
  double pulse_amplitude = 1.0;
  double pulse_phase = 0.7853981633974483;

  void validate() const;
  std::size_t period_samples() const;
  std::size_t pulse_width_samples() const;
};

struct CommScenario {
  ObservationSeries observations;
  ObservationSeries background;  // interference + noise only
  std::vector<std::uint8_t> soi_mask;
  Vec2 soi_amplitude = Vec2::Zero();
  std::size_t period_samples = 0;
  std::size_t pulse_width_samples = 0;
};

CommScenario simulate_comm_scenario(const CommScenarioConfig& config, RngHandle& rng);

// 10 log10(signal power / background power); +inf when background is zero.
double sinr_db(double soi_power, double background_power);
double mean_power(const ObservationSeries& series);

}  // namespace iflds
