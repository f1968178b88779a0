#include "iflds/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace iflds {

namespace {

void check_finite(const Mat2& m, const char* name) {
  if (!m.allFinite()) throw SpecError(std::string(name) + " has non-finite entries");
}

void check_cov(const Mat2& m, const char* name) {
  check_finite(m, name);
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
    throw SpecError(std::string(name) + " is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat2> eig(m);
  if (eig.eigenvalues().minCoeff() < -1e-10) {
    std::ostringstream msg;
    msg << name << " is not positive semidefinite (eigenvalue "
        << eig.eigenvalues().minCoeff() << ")";
    throw SpecError(msg.str());
  }
}

}  // namespace

void LdsParams::validate() const {
  check_finite(G, "G");
  check_finite(C, "C");
  check_cov(Q, "Q");
  check_cov(R, "R");
}

void FldsModel::validate() const {
  if (sources.empty()) throw SpecError("model needs at least one source");
  for (const auto& s : sources) s.validate();
  if (shared_noise) {
    for (const auto& s : sources) {
      if (s.Q != sources.front().Q || s.R != sources.front().R) {
        throw SpecError("shared-noise model has differing Q or R across sources");
      }
    }
  }
}

Mat2 reference_output_matrix() {
  Mat2 c;
  c << 0.25, -1.25, -1.0, -0.5;
  return c;
}

LdsParams rotation_source(double eps, double theta, double noise) {
  LdsParams p;
  p.G << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  p.G *= eps;
  p.C = reference_output_matrix();
  p.Q = noise * Mat2::Identity();
  p.R = noise * Mat2::Identity();
  return p;
}

FldsModel reference_model(std::size_t m) {
  using std::numbers::pi;
  const double eps[4] = {0.95, 0.9, 0.85, 0.75};
  const double theta[4] = {0.0, pi / 2, pi / 3, pi / 6};
  if (m < 1 || m > 4) throw SpecError("reference model has 1 to 4 sources");
  FldsModel model;
  for (std::size_t i = 0; i < m; ++i) model.sources.push_back(rotation_source(eps[i], theta[i]));
  return model;
}

SoiProfile SoiProfile::constant(std::size_t arrival, std::size_t duration,
                                const Vec2& amplitude) {
  SoiProfile p;
  p.arrival = arrival;
  p.duration = duration;
  p.waveform = [amplitude](std::size_t) { return amplitude; };
  return p;
}

void SoiProfile::validate() const {
  if (arrival < 1) throw SpecError("SOI arrival index must be >= 1");
  if (duration < 1) throw SpecError("SOI duration must be >= 1");
  if (!waveform) throw SpecError("SOI waveform is empty");
}

namespace {

void check_blowup(const Vec2& v, double limit, std::size_t t) {
  if (!v.allFinite() || v.cwiseAbs().maxCoeff() > limit) {
    std::ostringstream msg;
    msg << "simulation diverged at t=" << t + 1 << " (|value| > " << limit << ")";
    throw NumericalError(msg.str());
  }
}

void warn_unstable(const FldsModel& model, std::vector<std::string>& warnings) {
  for (std::size_t m = 0; m < model.size(); ++m) {
    double rho = model.sources[m].spectral_radius();
    if (rho >= 1.0) {
      std::ostringstream msg;
      msg << "source " << m << " has spectral radius " << rho << " >= 1";
      warnings.push_back(msg.str());
    }
  }
}

}  // namespace

SimulationResult simulate_flds(const FldsModel& model, std::size_t length,
                               std::span<RngHandle> source_rngs,
                               const SimulationOptions& opts) {
  model.validate();
  if (length == 0) throw SpecError("simulation length must be positive");
  if (source_rngs.size() != model.size()) {
    throw SpecError("need one random stream per source");
  }
  SimulationResult out;
  warn_unstable(model, out.warnings);
  const std::size_t m_count = model.size();
  out.latent.assign(m_count, std::vector<Vec2>(length));
  out.observations.samples.assign(length, Vec2::Zero());
  for (std::size_t m = 0; m < m_count; ++m) {
    const LdsParams& src = model.sources[m];
    RngHandle& rng = source_rngs[m];
    Mat2 lq = chol_psd2(src.Q);
    Mat2 lr = chol_psd2(src.R);
    Vec2 x = opts.initial == InitialState::kGaussian
                 ? sample_gauss2(Vec2::Zero(), lq, rng)
                 : Vec2::Zero();
    for (std::size_t t = 0; t < length; ++t) {
      check_blowup(x, opts.blowup_limit, t);
      out.latent[m][t] = x;
      Vec2 v = sample_gauss2(Vec2::Zero(), lr, rng);
      out.observations.samples[t] += src.C * x + v;
      x = sample_gauss2(src.G * x, lq, rng);
    }
  }
  return out;
}

SimulationResult simulate_flds(const FldsModel& model, std::size_t length,
                               RngHandle& rng, const SimulationOptions& opts) {
  model.validate();
  if (length == 0) throw SpecError("simulation length must be positive");
  const std::size_t m_count = model.size();
  if (opts.coupling == NoiseCoupling::kIndependent) {
    std::uint64_t base = rng.bits();
    std::vector<RngHandle> streams;
    streams.reserve(m_count);
    for (std::size_t m = 0; m < m_count; ++m) streams.emplace_back(base, m);
    return simulate_flds(model, length, std::span<RngHandle>(streams), opts);
  }
  if (!model.shared_noise) {
    throw SpecError("shared noise coupling needs a model with shared Q and R");
  }
  SimulationResult out;
  warn_unstable(model, out.warnings);
  out.latent.assign(m_count, std::vector<Vec2>(length));
  out.observations.samples.assign(length, Vec2::Zero());
  Mat2 lq = chol_psd2(model.Q());
  Mat2 lr = chol_psd2(model.R());
  std::vector<Vec2> x(m_count, Vec2::Zero());
  if (opts.initial == InitialState::kGaussian) {
    Vec2 w = sample_gauss2(Vec2::Zero(), lq, rng);
    for (auto& xm : x) xm = w;
  }
  const double scale = static_cast<double>(m_count);
  for (std::size_t t = 0; t < length; ++t) {
    Vec2 p = scale * sample_gauss2(Vec2::Zero(), lr, rng);
    for (std::size_t m = 0; m < m_count; ++m) {
      check_blowup(x[m], opts.blowup_limit, t);
      out.latent[m][t] = x[m];
      p += model.sources[m].C * x[m];
    }
    out.observations.samples[t] = p;
    Vec2 w = sample_gauss2(Vec2::Zero(), lq, rng);
    for (std::size_t m = 0; m < m_count; ++m) x[m] = model.sources[m].G * x[m] + w;
  }
  return out;
}

ObservationSeries inject_soi(const ObservationSeries& series, const SoiProfile& soi) {
  soi.validate();
  if (soi.arrival + soi.duration > series.size() + 1) {
    std::ostringstream msg;
    msg << "SOI window [" << soi.arrival << ", " << soi.arrival + soi.duration
        << ") exceeds series length " << series.size();
    throw SpecError(msg.str());
  }
  ObservationSeries out = series;
  for (std::size_t t = soi.arrival; t < soi.arrival + soi.duration; ++t) {
    Vec2 y = soi.waveform(t);
    if (!y.allFinite()) throw SpecError("SOI waveform is not finite");
    out.samples[t - 1] += y;
  }
  return out;
}

double sticky_transition_prob(double a, double b, bool z, bool from, bool to) {
  if (!z) return from == to ? 1.0 : 0.0;
  double p_on = from ? b : a;
  return to ? p_on : 1.0 - p_on;
}

void CommScenarioConfig::validate() const {
  if (!(duty_cycle > 0.0 && duty_cycle <= 1.0)) {
    throw SpecError("duty cycle must lie in (0, 1]");
  }
  if (!(sample_rate_hz > 0.0) || !(prf_hz > 0.0) || prf_hz > sample_rate_hz) {
    throw SpecError("sample rate and PRF must be positive with PRF <= sample rate");
  }
  if (!(bpsk_symbol_rate_hz > 0.0) || !(qpsk_symbol_rate_hz > 0.0)) {
    throw SpecError("symbol rates must be positive");
  }
  if (length == 0) throw SpecError("scenario length must be positive");
  if (noise_std < 0.0 || bpsk_amplitude < 0.0 || qpsk_amplitude < 0.0) {
    throw SpecError("amplitudes and noise level must be non-negative");
  }
  if (pulse_width_s && !(*pulse_width_s > 0.0)) {
    throw SpecError("pulse width must be positive");
  }
  if (pulse_width_samples() > period_samples()) {
    throw SpecError("pulse width exceeds the pulse repetition period");
  }
}

std::size_t CommScenarioConfig::period_samples() const {
  return static_cast<std::size_t>(std::floor(sample_rate_hz / prf_hz));
}

std::size_t CommScenarioConfig::pulse_width_samples() const {
  double width = pulse_width_s ? *pulse_width_s * sample_rate_hz
                               : duty_cycle * static_cast<double>(period_samples());
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(width)));
}

CommScenario simulate_comm_scenario(const CommScenarioConfig& config, RngHandle& rng) {
  config.validate();
  using std::numbers::pi;
  CommScenario out;
  out.period_samples = config.period_samples();
  out.pulse_width_samples = config.pulse_width_samples();
  const std::size_t n = config.length;
  out.background.samples.resize(n);
  out.background.sample_period = 1.0 / config.sample_rate_hz;

  double bpsk_symbol = 0.0, qpsk_i = 0.0, qpsk_q = 0.0;
  long long bpsk_index = -1, qpsk_index = -1;
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (std::size_t t = 0; t < n; ++t) {
    double time = static_cast<double>(t) / config.sample_rate_hz;
    auto bi = static_cast<long long>(std::floor(time * config.bpsk_symbol_rate_hz));
    if (bi != bpsk_index) {
      bpsk_index = bi;
      bpsk_symbol = rng.bernoulli(0.5) ? 1.0 : -1.0;
    }
    auto qi = static_cast<long long>(std::floor(time * config.qpsk_symbol_rate_hz));
    if (qi != qpsk_index) {
      qpsk_index = qi;
      qpsk_i = rng.bernoulli(0.5) ? inv_sqrt2 : -inv_sqrt2;
      qpsk_q = rng.bernoulli(0.5) ? inv_sqrt2 : -inv_sqrt2;
    }
    double ph_b = 2.0 * pi * config.bpsk_freq_offset_hz * time;
    double ph_q = 2.0 * pi * config.qpsk_freq_offset_hz * time;
    Vec2 b(config.bpsk_amplitude * bpsk_symbol * std::cos(ph_b),
           config.bpsk_amplitude * bpsk_symbol * std::sin(ph_b));
    // (i + jq) e^{j ph}
    Vec2 q(config.qpsk_amplitude * (qpsk_i * std::cos(ph_q) - qpsk_q * std::sin(ph_q)),
           config.qpsk_amplitude * (qpsk_i * std::sin(ph_q) + qpsk_q * std::cos(ph_q)));
    Vec2 noise(config.noise_std * rng.normal(), config.noise_std * rng.normal());
    out.background.samples[t] = b + q + noise;
  }

  double nominal_bg = config.bpsk_amplitude * config.bpsk_amplitude +
                      config.qpsk_amplitude * config.qpsk_amplitude +
                      2.0 * config.noise_std * config.noise_std;
  double amplitude = config.pulse_amplitude;
  if (config.sinr_db && nominal_bg > 0.0) {
    amplitude = std::sqrt(nominal_bg * std::pow(10.0, *config.sinr_db / 10.0));
  }
  out.soi_amplitude = Vec2(amplitude * std::cos(config.pulse_phase),
                           amplitude * std::sin(config.pulse_phase));

  out.observations = out.background;
  out.soi_mask.assign(n, 0);
  for (std::size_t start = config.pulse_offset; start < n; start += out.period_samples) {
    for (std::size_t k = 0; k < out.pulse_width_samples && start + k < n; ++k) {
      out.soi_mask[start + k] = 1;
      out.observations.samples[start + k] += out.soi_amplitude;
    }
  }
  return out;
}

double mean_power(const ObservationSeries& series) {
  if (series.size() == 0) return 0.0;
  double s = 0.0;
  for (const auto& p : series.samples) s += p.squaredNorm();
  return s / static_cast<double>(series.size());
}

double sinr_db(double soi_power, double background_power) {
  if (background_power <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(soi_power / background_power);
}

}  // namespace iflds
