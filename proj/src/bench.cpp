#include "iflds/bench.hpp"

#include "iflds/baseline.hpp"
#include "iflds/detect.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <ostream>
#include <set>
#include <tuple>

namespace iflds {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Stream ids: purpose in the top byte, then two 24-bit indices.
enum Purpose : std::uint64_t {
  kTrain = 1,
  kFalseAlarmTrial = 2,
  kMissTrial = 3,
  kCalibrationTrial = 4,
  kRplData = 5,
  kRplLearn = 6,
  kCommLearn = 7,
};

std::uint64_t stream_id(Purpose p, std::uint64_t a, std::uint64_t b) {
  return (std::uint64_t(p) << 56) | ((a & 0xffffff) << 32) | (b & 0xffffffff);
}

const std::vector<std::pair<DetectorKind, std::string>>& detector_names() {
  static const std::vector<std::pair<DetectorKind, std::string>> names = {
      {DetectorKind::kFldsFma, "flds-fma"},
      {DetectorKind::kLdsFma, "lds-fma"},
      {DetectorKind::kGaussianFma, "gaussian-fma"},
      {DetectorKind::kFldsCusum, "flds-cusum"},
      {DetectorKind::kFldsShewhart, "flds-shewhart"},
  };
  return names;
}

bool uses_flds(DetectorKind k) {
  return k == DetectorKind::kFldsFma || k == DetectorKind::kFldsCusum ||
         k == DetectorKind::kFldsShewhart;
}

bool has(const ExperimentSpec& spec, DetectorKind k) {
  return std::find(spec.detectors.begin(), spec.detectors.end(), k) != spec.detectors.end();
}

template <typename T>
T field(const Json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SpecError(std::string("spec field '") + key + "' has the wrong type");
  }
}

void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw SpecError(what + " has unknown field '" + it.key() + "'");
  }
}

CommScenarioConfig comm_from_json(const Json& j) {
  if (!j.is_object()) throw SpecError("comm must be a JSON object");
  reject_unknown(j,
                 {"sample_rate_hz", "length", "bpsk_symbol_rate_hz", "qpsk_symbol_rate_hz",
                  "bpsk_amplitude", "qpsk_amplitude", "bpsk_freq_offset_hz",
                  "qpsk_freq_offset_hz", "noise_std", "prf_hz", "duty_cycle", "pulse_width_s",
                  "pulse_offset", "pulse_amplitude", "pulse_phase"},
                 "comm");
  CommScenarioConfig c;
  c.sample_rate_hz = field(j, "sample_rate_hz", c.sample_rate_hz);
  c.length = field(j, "length", c.length);
  c.bpsk_symbol_rate_hz = field(j, "bpsk_symbol_rate_hz", c.bpsk_symbol_rate_hz);
  c.qpsk_symbol_rate_hz = field(j, "qpsk_symbol_rate_hz", c.qpsk_symbol_rate_hz);
  c.bpsk_amplitude = field(j, "bpsk_amplitude", c.bpsk_amplitude);
  c.qpsk_amplitude = field(j, "qpsk_amplitude", c.qpsk_amplitude);
  c.bpsk_freq_offset_hz = field(j, "bpsk_freq_offset_hz", c.bpsk_freq_offset_hz);
  c.qpsk_freq_offset_hz = field(j, "qpsk_freq_offset_hz", c.qpsk_freq_offset_hz);
  c.noise_std = field(j, "noise_std", c.noise_std);
  c.prf_hz = field(j, "prf_hz", c.prf_hz);
  c.duty_cycle = field(j, "duty_cycle", c.duty_cycle);
  if (j.contains("pulse_width_s")) {
    c.pulse_width_s = j["pulse_width_s"].is_null()
                          ? std::nullopt
                          : std::optional<double>(field(j, "pulse_width_s", 0.0));
  }
  c.pulse_offset = field(j, "pulse_offset", c.pulse_offset);
  c.pulse_amplitude = field(j, "pulse_amplitude", c.pulse_amplitude);
  c.pulse_phase = field(j, "pulse_phase", c.pulse_phase);
  c.validate();
  return c;
}

Json comm_to_json(const CommScenarioConfig& c) {
  return Json{{"sample_rate_hz", c.sample_rate_hz},
              {"length", c.length},
              {"bpsk_symbol_rate_hz", c.bpsk_symbol_rate_hz},
              {"qpsk_symbol_rate_hz", c.qpsk_symbol_rate_hz},
              {"bpsk_amplitude", c.bpsk_amplitude},
              {"qpsk_amplitude", c.qpsk_amplitude},
              {"bpsk_freq_offset_hz", c.bpsk_freq_offset_hz},
              {"qpsk_freq_offset_hz", c.qpsk_freq_offset_hz},
              {"noise_std", c.noise_std},
              {"prf_hz", c.prf_hz},
              {"duty_cycle", c.duty_cycle},
              {"pulse_width_s", c.pulse_width_s ? Json(*c.pulse_width_s) : Json(nullptr)},
              {"pulse_offset", c.pulse_offset},
              {"pulse_amplitude", c.pulse_amplitude},
              {"pulse_phase", c.pulse_phase}};
}

using Background = std::function<ObservationSeries(std::size_t, RngHandle&)>;

Background synthetic_background(const FldsModel& model, NoiseCoupling coupling) {
  return [model, coupling](std::size_t n, RngHandle& rng) {
    SimulationOptions o;
    o.initial = InitialState::kZero;
    o.coupling = coupling;
    return simulate_flds(model, n, rng, o).observations;
  };
}

Background comm_background(const CommScenarioConfig& config) {
  return [config](std::size_t n, RngHandle& rng) {
    CommScenarioConfig c = config;
    c.length = n;
    c.sinr_db.reset();
    return simulate_comm_scenario(c, rng).background;
  };
}

// Background representations behind the detectors.
struct Models {
  std::optional<FldsModel> flds;
  std::optional<FldsModel> lds;
  std::optional<GaussianFit> gaussian;
};

std::unique_ptr<LlrSource> make_source(const Models& models, DetectorKind k) {
  if (uses_flds(k)) return std::make_unique<FilterLlr>(*models.flds);
  if (k == DetectorKind::kLdsFma) return std::make_unique<FilterLlr>(*models.lds);
  return std::make_unique<GaussianLlr>(models.gaussian->mean, models.gaussian->cov);
}

// Source key shared by detectors that see the same LLR stream.
int source_key(DetectorKind k) {
  if (uses_flds(k)) return 0;
  return k == DetectorKind::kLdsFma ? 1 : 2;
}

// Statistic after each step (index t-1 for time t); -inf while an FMA window
// is still filling.
std::vector<double> statistic_path(DetectorKind k, std::size_t w, const std::vector<double>& llr) {
  std::vector<double> out(llr.size(), kNegInf);
  constexpr double kNever = std::numeric_limits<double>::infinity();
  if (k == DetectorKind::kFldsCusum) {
    CusumDetector d(kNever);
    for (std::size_t t = 0; t < llr.size(); ++t) {
      d.update(llr[t]);
      out[t] = d.statistic();
    }
  } else if (k == DetectorKind::kFldsShewhart) {
    out = llr;
  } else {
    FmaDetector d(w, kNever);
    for (std::size_t t = 0; t < llr.size(); ++t) {
      d.update(llr[t]);
      if (d.operational()) out[t] = d.statistic();
    }
  }
  return out;
}

// Max over 1-based times [from, to]; -inf when empty.
double max_over(const std::vector<double>& s, std::size_t from, std::size_t to) {
  double m = kNegInf;
  for (std::size_t t = from; t <= to && t <= s.size(); ++t) m = std::max(m, s[t - 1]);
  return m;
}

std::vector<double> llr_path(LlrSource& src, const Vec2& y, const ObservationSeries& obs) {
  src.reset();
  std::vector<double> out(obs.size());
  for (std::size_t t = 0; t < obs.size(); ++t) out[t] = src.step(y, obs[t]);
  return out;
}

struct SoiPoint {
  double amplitude = 0.0;
  double sinr_db = 0.0;
  Vec2 y = Vec2::Zero();
};

// Runs every trial for one SOI and window and returns the per-detector maxima.
std::map<DetectorKind, TrialMaxima> collect(const ExperimentSpec& spec, const Background& bg,
                                            const Models& models, const Vec2& y, std::size_t w,
                                            bool need_calibration) {
  std::map<int, std::unique_ptr<LlrSource>> sources;
  std::map<DetectorKind, TrialMaxima> out;
  for (DetectorKind k : spec.detectors) {
    if (!sources.count(source_key(k))) sources[source_key(k)] = make_source(models, k);
    out[k];
  }
  const std::size_t start = spec.burn_in + 1;
  const std::size_t w_alpha = spec.false_alarm_interval;

  auto run_h0 = [&](Purpose purpose, std::size_t i, auto&& sink) {
    RngHandle rng(spec.seed, stream_id(purpose, 0, i));
    ObservationSeries obs = bg(spec.burn_in + w_alpha, rng);
    for (auto& [key, src] : sources) {
      std::vector<double> llr = llr_path(*src, y, obs);
      for (DetectorKind k : spec.detectors) {
        if (source_key(k) != key) continue;
        sink(k, max_over(statistic_path(k, w, llr), start, spec.burn_in + w_alpha));
      }
    }
  };

  for (std::size_t i = 0; i < spec.trials; ++i) {
    run_h0(kFalseAlarmTrial, i, [&](DetectorKind k, double m) { out[k].false_alarm.push_back(m); });

    RngHandle rng(spec.seed, stream_id(kMissTrial, 0, i));
    const double u = rng.uniform();
    const std::size_t nu = start + std::min<std::size_t>(w - 1, std::size_t(u * double(w)));
    ObservationSeries obs = bg(nu + w - 1, rng);
    obs = inject_soi(obs, SoiProfile::constant(nu, w, y));
    for (auto& [key, src] : sources) {
      std::vector<double> llr = llr_path(*src, y, obs);
      for (DetectorKind k : spec.detectors) {
        if (source_key(k) != key) continue;
        std::vector<double> s = statistic_path(k, w, llr);
        TrialMaxima& tm = out[k];
        tm.pre_arrival.push_back(max_over(s, start, nu - 1));
        tm.during_soi.push_back(max_over(s, nu, nu + w - 1));
        tm.w_before.push_back(s[nu - 2]);
        tm.w_full.push_back(s[nu + w - 2]);
      }
    }
  }
  if (need_calibration) {
    for (std::size_t i = 0; i < spec.effective_calibration_trials(); ++i) {
      run_h0(kCalibrationTrial, i, [&](DetectorKind k, double m) { out[k].calibration.push_back(m); });
    }
  }
  return out;
}

bool needs_calibration(const ExperimentSpec& spec, DetectorKind k) {
  return k != DetectorKind::kFldsFma || spec.calibrate_flds;
}

struct Setup {
  Background bg;
  Models models;
  double background_power = 0.0;
};

Setup synthetic_setup(const ExperimentSpec& spec) {
  Setup s;
  s.bg = synthetic_background(spec.model, spec.coupling);
  RngHandle rng(spec.seed, stream_id(kTrain, 0, 0));
  ObservationSeries train = s.bg(spec.train_length, rng);
  s.background_power = mean_power(train);
  for (DetectorKind k : spec.detectors) {
    if (uses_flds(k)) s.models.flds = spec.model;
  }
  if (has(spec, DetectorKind::kLdsFma)) {
    LdsEmOptions o;
    o.iterations = spec.em_iterations;
    s.models.lds = fit_lds_em(train, o).model();
  }
  if (has(spec, DetectorKind::kGaussianFma)) s.models.gaussian = fit_gaussian(train);
  return s;
}

std::vector<SoiPoint> synthetic_grid(const ExperimentSpec& spec, double power) {
  std::vector<SoiPoint> grid;
  auto point = [&](double a) {
    SoiPoint p;
    p.amplitude = a;
    p.y = Vec2(a, a);
    p.sinr_db = sinr_db(p.y.squaredNorm(), power);
    grid.push_back(p);
  };
  for (double a : spec.amplitudes) point(a);
  for (double s : spec.sinr_targets_db) point(std::sqrt(power * std::pow(10.0, s / 10.0) / 2.0));
  if (grid.empty()) throw SpecError("the SOI grid is empty (set amplitudes or sinr_db)");
  return grid;
}

// Rows for one SOI point and window from the collected maxima.
std::vector<ResultRow> rows_for(const ExperimentSpec& spec, const Models& models,
                                const SoiPoint& soi, std::size_t w,
                                const std::map<DetectorKind, TrialMaxima>& maxima,
                                bool attach_bounds, std::optional<PerfModel>* perf_out) {
  std::vector<ResultRow> rows;
  std::optional<PerfModel> perf;
  const bool want_perf = attach_bounds || perf_out || !spec.calibrate_flds;
  if (want_perf && models.flds && has(spec, DetectorKind::kFldsFma)) {
    perf = perf_model_for(*models.flds, soi.y, w, spec.false_alarm_interval, spec.alpha_tilde);
  }
  if (perf_out) *perf_out = perf;
  for (DetectorKind k : spec.detectors) {
    const TrialMaxima& m = maxima.at(k);
    ResultRow row;
    row.detector = detector_name(k);
    row.amplitude = soi.amplitude;
    row.sinr_db = soi.sinr_db;
    row.window = w;
    row.false_alarm_interval = spec.false_alarm_interval;
    double h;
    if (needs_calibration(spec, k)) {
      Calibration c = calibrate_threshold(m.calibration, spec.alpha_tilde,
                                          spec.calibration_tolerance, spec.calibration_iterations);
      h = c.threshold;
      row.calibrated = c.converged;
    } else {
      h = fma_threshold(*perf);
    }
    row.threshold = h;
    score(m, h, row);
    if (k == DetectorKind::kFldsFma && attach_bounds) {
      PerfBounds b = perf_bounds(*perf, h);
      row.bound_fa = b.false_alarm;
      row.bound_md = b.missed_detection;
    }
    rows.push_back(row);
  }
  return rows;
}

bool any_calibration(const ExperimentSpec& spec) {
  return std::any_of(spec.detectors.begin(), spec.detectors.end(),
                     [&](DetectorKind k) { return needs_calibration(spec, k); });
}

double normal_pdf(double x, double mean, double var) {
  return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

}  // namespace

std::string detector_name(DetectorKind kind) {
  for (const auto& [k, n] : detector_names()) {
    if (k == kind) return n;
  }
  throw SpecError("unknown detector kind");
}

DetectorKind parse_detector(const std::string& name) {
  for (const auto& [k, n] : detector_names()) {
    if (n == name) return k;
  }
  throw SpecError("unknown detector '" + name +
                  "' (expected flds-fma, lds-fma, gaussian-fma, flds-cusum or flds-shewhart)");
}

void ExperimentSpec::validate() const {
  if (trials < 1) throw SpecError("trial count must be at least 1");
  if (detectors.empty()) throw SpecError("detector list is empty");
  std::set<DetectorKind> seen(detectors.begin(), detectors.end());
  if (seen.size() != detectors.size()) throw SpecError("detector list has duplicates");
  for (double a : amplitudes) {
    if (!std::isfinite(a) || a < 0.0) throw SpecError("SOI amplitudes must be finite and >= 0");
  }
  for (double s : sinr_targets_db) {
    if (!std::isfinite(s)) throw SpecError("SINR grid must be finite");
  }
  if (windows.empty()) throw SpecError("window list is empty");
  for (std::size_t w : windows) {
    if (w < 1) throw SpecError("window lengths must be at least 1");
    if (burn_in < w) throw SpecError("burn_in must be at least every window length");
  }
  if (false_alarm_interval < 1) throw SpecError("w_alpha must be at least 1");
  if (!(alpha_tilde > 0.0 && alpha_tilde < 1.0)) throw SpecError("alpha_tilde must lie in (0, 1)");
  if (!(calibration_tolerance > 0.0)) throw SpecError("calibration tolerance must be positive");
  if (calibration_iterations < 1) throw SpecError("calibration needs at least one iteration");
  if (train_length < 3) throw SpecError("train_length must be at least 3");
  if (particles < 1) throw SpecError("particles must be at least 1");
  if (length < 2) throw SpecError("length must be at least 2");
  if (density_bins < 1) throw SpecError("density_bins must be at least 1");
  for (std::size_t m : m_true) {
    if (m < 1 || m > 4) throw SpecError("m_true entries must be 1..4");
  }
  model.validate();
  comm.validate();
}

ExperimentSpec spec_from_json(const Json& j) {
  check_spec_version(j, "experiment spec");
  reject_unknown(j,
                 {"spec_version", "scenario", "seed", "trials", "calibration_trials", "model",
                  "coupling", "comm", "amplitudes", "sinr_db", "windows", "w_alpha", "alpha_tilde",
                  "detectors", "burn_in", "calibrate_flds", "calibration_tolerance",
                  "calibration_iterations", "train_length", "em_iterations", "learn_iterations",
                  "particles", "birth_interval", "auxiliary_chains", "hyper", "m_true",
                  "length", "density_bins", "description"},
                 "experiment spec");
  ExperimentSpec s;
  const std::string scenario = field<std::string>(j, "scenario", "flds-synthetic");
  if (scenario == "flds-synthetic") {
    s.scenario = Scenario::kFldsSynthetic;
  } else if (scenario == "comm-interference") {
    s.scenario = Scenario::kCommInterference;
  } else {
    throw SpecError("unknown scenario '" + scenario + "'");
  }
  s.seed = field(j, "seed", s.seed);
  auto trials = field<long long>(j, "trials", static_cast<long long>(s.trials));
  if (trials < 1) throw SpecError("trial count must be at least 1");
  s.trials = static_cast<std::size_t>(trials);
  s.calibration_trials = field(j, "calibration_trials", s.calibration_trials);
  if (j.contains("model")) s.model = model_from_json(j["model"]);
  const std::string coupling = field<std::string>(j, "coupling", "shared");
  if (coupling == "shared") {
    s.coupling = NoiseCoupling::kShared;
  } else if (coupling == "independent") {
    s.coupling = NoiseCoupling::kIndependent;
  } else {
    throw SpecError("coupling must be shared or independent");
  }
  if (j.contains("comm")) s.comm = comm_from_json(j["comm"]);
  s.amplitudes = field(j, "amplitudes", s.amplitudes);
  s.sinr_targets_db = field(j, "sinr_db", s.sinr_targets_db);
  s.windows = field(j, "windows", s.windows);
  s.false_alarm_interval = field(j, "w_alpha", s.false_alarm_interval);
  s.alpha_tilde = field(j, "alpha_tilde", s.alpha_tilde);
  if (j.contains("detectors")) {
    s.detectors.clear();
    for (const std::string& n : field<std::vector<std::string>>(j, "detectors", {})) {
      s.detectors.push_back(parse_detector(n));
    }
  }
  s.burn_in = field(j, "burn_in", s.burn_in);
  s.calibrate_flds = field(j, "calibrate_flds", s.calibrate_flds);
  s.calibration_tolerance = field(j, "calibration_tolerance", s.calibration_tolerance);
  s.calibration_iterations = field(j, "calibration_iterations", s.calibration_iterations);
  s.train_length = field(j, "train_length", s.train_length);
  s.em_iterations = field(j, "em_iterations", s.em_iterations);
  s.learn_iterations = field(j, "learn_iterations", s.learn_iterations);
  s.particles = field(j, "particles", s.particles);
  s.birth_interval = field(j, "birth_interval", s.birth_interval);
  s.auxiliary_chains = field(j, "auxiliary_chains", s.auxiliary_chains);
  if (j.contains("hyper")) {
    if (!j["hyper"].is_object()) throw SpecError("hyper must be a JSON object");
    s.hyper = j["hyper"];
  }
  s.m_true = field(j, "m_true", s.m_true);
  s.length = field(j, "length", s.length);
  s.density_bins = field(j, "density_bins", s.density_bins);
  s.validate();
  return s;
}

Json to_json(const ExperimentSpec& s) {
  Json dets = Json::array();
  for (DetectorKind k : s.detectors) dets.push_back(detector_name(k));
  return Json{{"spec_version", kSpecVersion},
              {"scenario", s.scenario == Scenario::kFldsSynthetic ? "flds-synthetic"
                                                                  : "comm-interference"},
              {"seed", s.seed},
              {"trials", s.trials},
              {"calibration_trials", s.calibration_trials},
              {"model", to_json(s.model)},
              {"coupling", s.coupling == NoiseCoupling::kShared ? "shared" : "independent"},
              {"comm", comm_to_json(s.comm)},
              {"amplitudes", s.amplitudes},
              {"sinr_db", s.sinr_targets_db},
              {"windows", s.windows},
              {"w_alpha", s.false_alarm_interval},
              {"alpha_tilde", s.alpha_tilde},
              {"detectors", dets},
              {"burn_in", s.burn_in},
              {"calibrate_flds", s.calibrate_flds},
              {"calibration_tolerance", s.calibration_tolerance},
              {"calibration_iterations", s.calibration_iterations},
              {"train_length", s.train_length},
              {"em_iterations", s.em_iterations},
              {"learn_iterations", s.learn_iterations},
              {"particles", s.particles},
              {"birth_interval", s.birth_interval},
              {"auxiliary_chains", s.auxiliary_chains},
              {"hyper", s.hyper},
              {"m_true", s.m_true},
              {"length", s.length},
              {"density_bins", s.density_bins}};
}

double binomial_se(double p, std::size_t n) {
  return n == 0 ? 0.0 : std::sqrt(p * (1.0 - p) / double(n));
}

Calibration calibrate_threshold(const std::vector<double>& maxima, double target,
                                double tolerance, std::size_t iterations) {
  if (maxima.empty()) throw SpecError("calibration needs at least one trial");
  auto rate = [&](double h) {
    std::size_t n = 0;
    for (double m : maxima) n += m >= h;
    return double(n) / double(maxima.size());
  };
  double lo = std::numeric_limits<double>::infinity(), hi = kNegInf;
  for (double m : maxima) {
    if (std::isfinite(m)) {
      lo = std::min(lo, m);
      hi = std::max(hi, m);
    }
  }
  if (!std::isfinite(lo)) {
    lo = -1.0;
    hi = 1.0;
  }
  lo -= 1.0;
  hi += 1.0;
  Calibration c;
  for (std::size_t it = 0; it < iterations; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double p = rate(mid);
    c.threshold = mid;
    c.achieved = p;
    if (std::abs(p - target) <= tolerance * target) {
      c.converged = true;
      return c;
    }
    (p > target ? lo : hi) = mid;
  }
  return c;
}

void score(const TrialMaxima& m, double h, ResultRow& row) {
  std::size_t fa = 0;
  for (double v : m.false_alarm) fa += v >= h;
  row.n_fa = m.false_alarm.size();
  row.p_fa = row.n_fa ? double(fa) / double(row.n_fa) : 0.0;
  row.se_fa = binomial_se(row.p_fa, row.n_fa);
  std::size_t kept = 0, missed = 0;
  for (std::size_t i = 0; i < m.during_soi.size(); ++i) {
    if (m.pre_arrival[i] >= h) continue;
    ++kept;
    missed += m.during_soi[i] < h;
  }
  row.n_md = kept;
  row.p_md = kept ? double(missed) / double(kept) : 0.0;
  row.se_md = binomial_se(row.p_md, kept);
}

std::vector<ResultRow> run_tsd_experiment(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.scenario != Scenario::kFldsSynthetic) {
    throw SpecError("bench-tsd needs the flds-synthetic scenario");
  }
  Setup setup = synthetic_setup(spec);
  std::vector<ResultRow> rows;
  for (const SoiPoint& soi : synthetic_grid(spec, setup.background_power)) {
    for (std::size_t w : spec.windows) {
      auto maxima = collect(spec, setup.bg, setup.models, soi.y, w, any_calibration(spec));
      auto r = rows_for(spec, setup.models, soi, w, maxima, true, nullptr);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  }
  return rows;
}

WindowStudy run_window_study(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.scenario != Scenario::kFldsSynthetic) {
    throw SpecError("bench-window needs the flds-synthetic scenario");
  }
  if (!has(spec, DetectorKind::kFldsFma)) throw SpecError("bench-window needs flds-fma");
  Setup setup = synthetic_setup(spec);
  WindowStudy out;
  for (const SoiPoint& soi : synthetic_grid(spec, setup.background_power)) {
    for (std::size_t w : spec.windows) {
      auto maxima = collect(spec, setup.bg, setup.models, soi.y, w, any_calibration(spec));
      std::optional<PerfModel> perf;
      auto r = rows_for(spec, setup.models, soi, w, maxima, true, &perf);
      out.rows.insert(out.rows.end(), r.begin(), r.end());

      const TrialMaxima& m = maxima.at(DetectorKind::kFldsFma);
      const double n = double(m.w_before.size());
      double mean = 0.0, sq = 0.0;
      for (double v : m.w_before) mean += v;
      mean /= n;
      for (double v : m.w_before) sq += (v - mean) * (v - mean);
      out.h0_mean.push_back(mean);
      out.h0_mean_se.push_back(std::sqrt(sq / (n - 1.0) / n));
      out.h0_theory_mean.push_back(double(w) * perf->mu_h0);

      double lo = std::min(*std::min_element(m.w_before.begin(), m.w_before.end()),
                           *std::min_element(m.w_full.begin(), m.w_full.end()));
      double hi = std::max(*std::max_element(m.w_before.begin(), m.w_before.end()),
                           *std::max_element(m.w_full.begin(), m.w_full.end()));
      if (!(hi > lo)) hi = lo + 1.0;
      const std::size_t bins = spec.density_bins;
      const double width = (hi - lo) / double(bins);
      std::vector<double> c0(bins, 0.0), c1(bins, 0.0);
      auto bin_of = [&](double v) {
        return std::min(bins - 1, static_cast<std::size_t>((v - lo) / width));
      };
      for (double v : m.w_before) c0[bin_of(v)] += 1.0;
      for (double v : m.w_full) c1[bin_of(v)] += 1.0;
      for (std::size_t b = 0; b < bins; ++b) {
        DensityRow d;
        d.detector = "flds-fma";
        d.window = w;
        d.bin = b;
        d.center = lo + (double(b) + 0.5) * width;
        d.h0_density = c0[b] / (double(m.w_before.size()) * width);
        d.h1_density = c1[b] / (double(m.w_full.size()) * width);
        d.h0_theory = normal_pdf(d.center, double(w) * perf->mu_h0, double(w) * perf->var_h0);
        d.h1_theory = normal_pdf(d.center, double(w) * perf->mu_h1, double(w) * perf->var_h1);
        out.densities.push_back(d);
      }
    }
  }
  return out;
}

std::vector<ResultRow> run_comm_experiment(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.scenario != Scenario::kCommInterference) {
    throw SpecError("bench-comm needs the comm-interference scenario");
  }
  if (spec.sinr_targets_db.empty()) throw SpecError("bench-comm needs a sinr_db grid");
  Setup setup;
  setup.bg = comm_background(spec.comm);
  RngHandle rng(spec.seed, stream_id(kTrain, 0, 0));
  ObservationSeries train = setup.bg(spec.train_length, rng);
  setup.background_power = mean_power(train);
  if (std::any_of(spec.detectors.begin(), spec.detectors.end(), uses_flds)) {
    Hyper hyper = hyper_from_json(spec.hyper, train);
    LearnOptions lo;
    lo.iterations = spec.learn_iterations;
    lo.pgas.particles = spec.particles;
    lo.birth_interval = spec.birth_interval;
    lo.auxiliary_chains = spec.auxiliary_chains;
    RngHandle lr(spec.seed, stream_id(kCommLearn, 0, 0));
    LearnResult res = learn(train, hyper, lo, lr);
    if (res.point_estimate.active_count() == 0) {
      throw NumericalError("the learner found no active source in the training background");
    }
    setup.models.flds = to_flds_model(res.point_estimate);
  }
  if (has(spec, DetectorKind::kLdsFma)) {
    LdsEmOptions o;
    o.iterations = spec.em_iterations;
    setup.models.lds = fit_lds_em(train, o).model();
  }
  if (has(spec, DetectorKind::kGaussianFma)) setup.models.gaussian = fit_gaussian(train);

  // Every detector is matched on empirical false alarms here.
  ExperimentSpec matched = spec;
  matched.calibrate_flds = true;
  std::vector<ResultRow> rows;
  for (double target : spec.sinr_targets_db) {
    CommScenarioConfig c = spec.comm;
    c.length = 1;
    c.sinr_db = target;
    RngHandle unused(spec.seed, 0);
    SoiPoint soi;
    soi.y = simulate_comm_scenario(c, unused).soi_amplitude;
    soi.amplitude = soi.y.norm();
    soi.sinr_db = sinr_db(soi.y.squaredNorm(), setup.background_power);
    for (std::size_t w : spec.windows) {
      auto maxima = collect(matched, setup.bg, setup.models, soi.y, w, true);
      auto r = rows_for(matched, setup.models, soi, w, maxima, false, nullptr);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  }
  return rows;
}

RplResult run_rpl_experiment(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.scenario != Scenario::kFldsSynthetic) {
    throw SpecError("bench-rpl needs the flds-synthetic scenario");
  }
  if (spec.m_true.empty()) throw SpecError("bench-rpl needs at least one m_true");
  RplResult out;
  for (std::size_t m : spec.m_true) {
    for (std::size_t i = 0; i < spec.trials; ++i) {
      RngHandle data(spec.seed, stream_id(kRplData, m, i));
      SimulationOptions so;
      so.initial = InitialState::kZero;
      so.coupling = NoiseCoupling::kIndependent;
      ObservationSeries obs = simulate_flds(reference_model(m), spec.length, data, so).observations;
      Json hj = spec.hyper;
      if (!hj.contains("s0_divisor")) hj["s0_divisor"] = double(m);
      Hyper hyper = hyper_from_json(hj, obs);
      for (bool sticky : {true, false}) {
        hyper.sticky = sticky;
        LearnOptions lo;
        lo.iterations = spec.learn_iterations;
        lo.pgas.particles = spec.particles;
    lo.birth_interval = spec.birth_interval;
    lo.auxiliary_chains = spec.auxiliary_chains;
        RngHandle lr(spec.seed, stream_id(kRplLearn, m, i));
        LearnResult res = learn(obs, hyper, lo, lr);
        out.trials.push_back({m, i, sticky, res.m_hat, reconstruction_error(obs, res.point_estimate)});
      }
    }
    for (bool sticky : {true, false}) {
      RplSummary s;
      s.m_true = m;
      s.sticky = sticky;
      std::vector<std::size_t> mh;
      std::vector<double> re;
      for (const RplTrial& t : out.trials) {
        if (t.m_true != m || t.sticky != sticky) continue;
        mh.push_back(t.m_hat);
        re.push_back(t.re);
        s.mean_m_hat += double(t.m_hat);
        s.mean_abs_error += std::abs(double(t.m_hat) - double(m));
        s.mean_re += t.re;
      }
      s.trials = mh.size();
      s.modal_m_hat = mode_of(mh);
      s.mean_m_hat /= double(s.trials);
      s.mean_abs_error /= double(s.trials);
      s.mean_re /= double(s.trials);
      s.median_re = median(re);
      out.summary.push_back(s);
    }
  }
  return out;
}

void write_results_csv(std::ostream& os, std::vector<ResultRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.detector, a.window, a.amplitude) < std::tie(b.detector, b.window, b.amplitude);
  });
  os << "detector,amplitude,sinr_db,w,w_alpha,threshold,calibrated,p_md,se_md,n_md,p_fa,se_fa,"
        "n_fa,bound_fa,bound_md\n";
  for (const ResultRow& r : rows) {
    os << r.detector << ',' << format_double(r.amplitude) << ',' << format_double(r.sinr_db)
       << ',' << r.window << ',' << r.false_alarm_interval << ',' << format_double(r.threshold)
       << ',' << (r.calibrated ? 1 : 0) << ',' << format_double(r.p_md) << ','
       << format_double(r.se_md) << ',' << r.n_md << ',' << format_double(r.p_fa) << ','
       << format_double(r.se_fa) << ',' << r.n_fa << ',' << opt(r.bound_fa) << ','
       << opt(r.bound_md) << '\n';
  }
}

void write_densities_csv(std::ostream& os, const std::vector<DensityRow>& rows) {
  os << "detector,w,bin,center,h0_density,h1_density,h0_theory,h1_theory\n";
  for (const DensityRow& d : rows) {
    os << d.detector << ',' << d.window << ',' << d.bin << ',' << format_double(d.center) << ','
       << format_double(d.h0_density) << ',' << format_double(d.h1_density) << ','
       << format_double(d.h0_theory) << ',' << format_double(d.h1_theory) << '\n';
  }
}

void write_rpl_csv(std::ostream& os, const RplResult& result) {
  os << "m_true,sticky,trials,modal_m_hat,mean_m_hat,mean_abs_error,median_re,mean_re\n";
  for (const RplSummary& s : result.summary) {
    os << s.m_true << ',' << (s.sticky ? 1 : 0) << ',' << s.trials << ',' << s.modal_m_hat << ','
       << format_double(s.mean_m_hat) << ',' << format_double(s.mean_abs_error) << ','
       << format_double(s.median_re) << ',' << format_double(s.mean_re) << '\n';
  }
}

void write_rpl_trials_csv(std::ostream& os, const RplResult& result) {
  os << "m_true,trial,sticky,m_hat,re\n";
  for (const RplTrial& t : result.trials) {
    os << t.m_true << ',' << t.trial << ',' << (t.sticky ? 1 : 0) << ',' << t.m_hat << ','
       << format_double(t.re) << '\n';
  }
}

}  // namespace iflds
