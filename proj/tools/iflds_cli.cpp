// Command-line entry points. Every subcommand takes a JSON spec file, an
// output directory and an optional seed, and writes a manifest.json next to
// its results. Exit codes: 0 success, 2 invalid spec or input, 3 numerical
// failure, 1 anything else.

#include "iflds/baseline.hpp"
#include "iflds/bench.hpp"
#include "iflds/detect.hpp"
#include "iflds/io.hpp"
#include "iflds/learn.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#ifndef IFLDS_GIT_DESCRIBE
#define IFLDS_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using namespace iflds;

namespace {

struct Invocation {
  std::string command;
  fs::path spec_path;
  fs::path out_dir;
  std::optional<std::uint64_t> seed;
};

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw SpecError(what + " has unknown field '" + it.key() + "'");
  }
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

// Paths inside a spec are relative to the spec file.
fs::path resolve(const Invocation& inv, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : inv.spec_path.parent_path() / path;
}

class Outputs {
 public:
  explicit Outputs(const fs::path& dir) : dir_(dir) { fs::create_directories(dir); }

  void text(const std::string& name, const std::string& content) {
    write_text(dir_ / name, content);
    hashes_[name] = sha256_hex(content);
  }
  void json(const std::string& name, const Json& j) { text(name, j.dump(2) + "\n"); }
  void series(const std::string& name, const ObservationSeries& obs) {
    save_series(dir_ / name, obs);
    hashes_[name] = sha256_hex(read_text(dir_ / name));
  }

  void manifest(const Invocation& inv, const std::string& spec_text, std::uint64_t seed,
                double seconds, const Json& extra = Json::object()) {
    Json files = Json::object();
    for (const auto& [name, hash] : hashes_) files[name] = hash;
    Json m{{"command", inv.command},
           {"spec_path", inv.spec_path.string()},
           {"spec_sha256", sha256_hex(spec_text)},
           {"seed", seed},
           {"git_describe", IFLDS_GIT_DESCRIBE},
           {"wall_time_s", seconds},
           {"outputs", files}};
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
    save_json(dir_ / "manifest.json", m);
  }

 private:
  fs::path dir_;
  std::map<std::string, std::string> hashes_;
};

std::uint64_t pick_seed(const Invocation& inv, const Json& spec) {
  return inv.seed ? *inv.seed : field<std::uint64_t>(spec, "seed", 1);
}

Json cmd_simulate(const Invocation&, const Json& spec, Outputs& out, std::uint64_t seed) {
  reject_unknown(spec,
                 {"spec_version", "seed", "scenario", "model", "length", "coupling", "initial",
                  "soi", "comm", "sinr_db", "format", "description"},
                 "simulate spec");
  const std::string format = field<std::string>(spec, "format", "csv");
  if (format != "csv" && format != "binary") throw SpecError("format must be csv or binary");
  const std::string series_name = format == "csv" ? "series.csv" : "series.bin";
  RngHandle rng(seed, 0);
  Json info = Json::object();

  if (field<std::string>(spec, "scenario", "flds-synthetic") == "comm-interference") {
    ExperimentSpec es;
    Json ej{{"spec_version", kSpecVersion}, {"scenario", "comm-interference"}};
    if (spec.contains("comm")) ej["comm"] = spec["comm"];
    es = spec_from_json(ej);
    CommScenarioConfig cfg = es.comm;
    if (spec.contains("sinr_db")) cfg.sinr_db = field<double>(spec, "sinr_db", 0.0);
    if (spec.contains("length")) cfg.length = field<std::size_t>(spec, "length", cfg.length);
    CommScenario sc = simulate_comm_scenario(cfg, rng);
    out.series(series_name, sc.observations);
    std::ostringstream mask;
    mask << "t,soi\n";
    for (std::size_t t = 0; t < sc.soi_mask.size(); ++t) mask << t + 1 << ',' << int(sc.soi_mask[t]) << '\n';
    out.text("soi_mask.csv", mask.str());
    info["soi_amplitude"] = to_json(sc.soi_amplitude);
    info["sinr_db"] = sinr_db(sc.soi_amplitude.squaredNorm(), mean_power(sc.background));
    return info;
  }

  FldsModel model = model_from_json(spec.contains("model") ? spec["model"] : Json{{"reference", 4}});
  const auto length = field<std::size_t>(spec, "length", 2000);
  if (length == 0) throw SpecError("length must be positive");
  SimulationOptions so;
  const std::string coupling = field<std::string>(spec, "coupling", "independent");
  if (coupling == "independent") {
    so.coupling = NoiseCoupling::kIndependent;
  } else if (coupling == "shared") {
    so.coupling = NoiseCoupling::kShared;
  } else {
    throw SpecError("coupling must be independent or shared");
  }
  const std::string initial = field<std::string>(spec, "initial", "zero");
  if (initial == "zero") {
    so.initial = InitialState::kZero;
  } else if (initial == "gaussian") {
    so.initial = InitialState::kGaussian;
  } else {
    throw SpecError("initial must be zero or gaussian");
  }
  SimulationResult sim = simulate_flds(model, length, rng, so);
  ObservationSeries obs = sim.observations;
  if (spec.contains("soi")) {
    const Json& s = spec["soi"];
    SoiProfile soi = SoiProfile::constant(field<std::size_t>(s, "arrival", 1),
                                          field<std::size_t>(s, "duration", 1),
                                          vec2_from_json(s.value("amplitude", Json::array()), "soi.amplitude"));
    soi.validate();
    obs = inject_soi(obs, soi);
    info["sinr_db"] = sinr_db(soi.waveform(soi.arrival).squaredNorm(), mean_power(sim.observations));
  }
  out.series(series_name, obs);
  info["warnings"] = sim.warnings;
  return info;
}

Json cmd_learn(const Invocation& inv, const Json& spec, Outputs& out, std::uint64_t seed) {
  reject_unknown(spec,
                 {"spec_version", "seed", "series", "iterations", "particles", "proposal",
                  "birth_interval", "birth_start_prob", "auxiliary_chains", "hyper",
                  "resume_from", "description"},
                 "learn spec");
  if (!spec.contains("series")) throw SpecError("learn spec needs 'series'");
  ObservationSeries obs = load_series(resolve(inv, field<std::string>(spec, "series", "")));
  Hyper hyper = hyper_from_json(spec.value("hyper", Json::object()), obs);
  LearnOptions lo;
  lo.iterations = field<std::size_t>(spec, "iterations", 300);
  lo.pgas.particles = field<std::size_t>(spec, "particles", 15);
  lo.birth_interval = field<std::size_t>(spec, "birth_interval", lo.birth_interval);
  lo.birth_start_prob = field<double>(spec, "birth_start_prob", lo.birth_start_prob);
  lo.auxiliary_chains = field<std::size_t>(spec, "auxiliary_chains", lo.auxiliary_chains);
  const std::string proposal = field<std::string>(spec, "proposal", "adapted");
  if (proposal == "adapted") {
    lo.pgas.proposal = ParticleProposal::kAdapted;
  } else if (proposal == "prior") {
    lo.pgas.proposal = ParticleProposal::kPrior;
  } else {
    throw SpecError("proposal must be adapted or prior");
  }
  if (spec.contains("resume_from")) {
    lo.initial = state_from_json(load_json(resolve(inv, field<std::string>(spec, "resume_from", ""))));
  }
  if (lo.pgas.particles < 1) throw SpecError("particles must be at least 1");

  RngHandle rng(seed, 0);
  LearnResult res = learn(obs, hyper, lo, rng);
  Json trace = Json::array();
  for (const IterationRecord& rec : res.trace) trace.push_back(to_json(rec));

  out.json("trace.json", Json{{"spec_version", kSpecVersion}, {"iterations", trace}});
  out.json("checkpoint.json", to_json(res.final_state));
  out.json("point_estimate.json", to_json(res.point_estimate));
  const double re = reconstruction_error(obs, res.point_estimate);
  Json summary{{"m_hat", res.m_hat},
               {"point_iteration", res.point_iteration},
               {"point_active", res.point_estimate.active_count()},
               {"reconstruction_error", re},
               {"hyper", to_json(hyper)}};
  out.json("summary.json", summary);
  if (res.point_estimate.active_count() > 0) {
    Json model = to_json(to_flds_model(res.point_estimate));
    model["spec_version"] = kSpecVersion;
    out.json("model.json", model);
  }
  std::cout << "M_hat " << res.m_hat << ", reconstruction error " << re << "\n";
  return Json{{"m_hat", res.m_hat}};
}

Json cmd_detect(const Invocation& inv, const Json& spec, Outputs& out, std::uint64_t) {
  reject_unknown(spec,
                 {"spec_version", "seed", "series", "detector", "model", "model_file",
                  "train_series", "em_iterations", "soi", "w", "w_alpha", "alpha_tilde",
                  "threshold", "trace", "description"},
                 "detect spec");
  if (!spec.contains("series")) throw SpecError("detect spec needs 'series'");
  if (!spec.contains("soi")) throw SpecError("detect spec needs 'soi' (the SOI vector y)");
  ObservationSeries obs = load_series(resolve(inv, field<std::string>(spec, "series", "")));
  const DetectorKind kind = parse_detector(field<std::string>(spec, "detector", "flds-fma"));
  const Vec2 y = vec2_from_json(spec["soi"], "soi");
  const auto w = field<std::size_t>(spec, "w", 200);
  const auto w_alpha = field<std::size_t>(spec, "w_alpha", 1000);
  const double alpha = field<double>(spec, "alpha_tilde", 0.01);
  if (w < 1) throw SpecError("w must be at least 1");

  std::unique_ptr<LlrSource> src;
  std::optional<PerfModel> perf;
  if (kind == DetectorKind::kLdsFma || kind == DetectorKind::kGaussianFma) {
    if (!spec.contains("train_series")) throw SpecError(detector_name(kind) + " needs 'train_series'");
    ObservationSeries train = load_series(resolve(inv, field<std::string>(spec, "train_series", "")));
    if (kind == DetectorKind::kLdsFma) {
      LdsEmOptions eo;
      eo.iterations = field<std::size_t>(spec, "em_iterations", 50);
      FldsModel m = fit_lds_em(train, eo).model();
      src = std::make_unique<FilterLlr>(m);
      perf = perf_model_for(m, y, w, w_alpha, alpha);
    } else {
      GaussianFit g = fit_gaussian(train);
      src = std::make_unique<GaussianLlr>(g.mean, g.cov);
      // i.i.d. Gaussian: the LLR is N(-d/2, d) under H0 and N(d/2, d) under H1.
      H0Moments h0 = h0_moments(y, g.cov);
      perf = PerfModel{h0.mean, h0.variance, -h0.mean, h0.variance, w, w_alpha, alpha};
    }
  } else {
    FldsModel m;
    if (spec.contains("model_file")) {
      m = model_from_json(load_json(resolve(inv, field<std::string>(spec, "model_file", ""))));
    } else if (spec.contains("model")) {
      m = model_from_json(spec["model"]);
    } else {
      throw SpecError("flds detectors need 'model' or 'model_file'");
    }
    src = std::make_unique<FilterLlr>(m);
    if (kind == DetectorKind::kFldsFma) perf = perf_model_for(m, y, w, w_alpha, alpha);
  }

  DetectionReport rep;
  rep.detector = detector_name(kind);
  rep.window = kind == DetectorKind::kFldsShewhart ? 1 : (kind == DetectorKind::kFldsCusum ? 0 : w);
  rep.false_alarm_interval = w_alpha;
  rep.alpha_tilde = alpha;
  if (spec.contains("threshold")) {
    rep.threshold = field<double>(spec, "threshold", 0.0);
  } else if (perf) {
    perf->validate();
    rep.threshold = fma_threshold(*perf);
  } else {
    throw SpecError(rep.detector + " has no closed-form threshold; set 'threshold'");
  }
  if (perf) {
    PerfBounds b = perf_bounds(*perf, rep.threshold);
    rep.bound_false_alarm = b.false_alarm;
    rep.bound_missed_detection = b.missed_detection;
  }

  FmaDetector fma(std::max<std::size_t>(w, 1), rep.threshold);
  CusumDetector cusum(rep.threshold);
  ShewhartDetector shewhart(rep.threshold);
  for (std::size_t t = 0; t < obs.size(); ++t) {
    const double l = src->step(y, obs[t]);
    bool fire = false;
    double stat = 0.0;
    bool live = true;
    if (kind == DetectorKind::kFldsCusum) {
      fire = cusum.update(l);
      stat = cusum.statistic();
    } else if (kind == DetectorKind::kFldsShewhart) {
      fire = shewhart.update(l);
      stat = l;
    } else {
      fire = fma.update(l);
      stat = fma.statistic();
      live = fma.operational();
    }
    rep.llr.push_back(l);
    rep.statistic.push_back(stat);
    rep.evaluated += live;
    if (fire) {
      ++rep.alarms;
      if (!rep.tau) rep.tau = t + 1;
    }
  }
  Json report = to_json(rep, field<bool>(spec, "trace", false));
  report["spec_version"] = kSpecVersion;
  out.json("report.json", report);
  std::ostringstream csv;
  write_statistic_csv(csv, rep);
  out.text("statistic.csv", csv.str());
  std::cout << rep.detector << ": h = " << rep.threshold << ", alarms " << rep.alarms << " of "
            << rep.evaluated << " steps";
  if (rep.tau) std::cout << ", first at t = " << *rep.tau;
  std::cout << "\n";
  return Json::object();
}

ExperimentSpec bench_spec(const Json& spec, std::uint64_t seed) {
  Json j = spec;
  j["seed"] = seed;
  return spec_from_json(j);
}

std::string rows_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  write_results_csv(os, rows);
  return os.str();
}

Json cmd_bench(const Invocation& inv, const Json& spec, Outputs& out, std::uint64_t seed) {
  ExperimentSpec es = bench_spec(spec, seed);
  if (inv.command == "bench-rpl") {
    RplResult r = run_rpl_experiment(es);
    std::ostringstream a, b;
    write_rpl_csv(a, r);
    write_rpl_trials_csv(b, r);
    out.text("results.csv", a.str());
    out.text("trials.csv", b.str());
    std::cout << a.str();
  } else if (inv.command == "bench-tsd") {
    out.text("results.csv", rows_csv(run_tsd_experiment(es)));
  } else if (inv.command == "bench-window") {
    WindowStudy ws = run_window_study(es);
    out.text("results.csv", rows_csv(ws.rows));
    std::ostringstream d, m;
    write_densities_csv(d, ws.densities);
    out.text("densities.csv", d.str());
    m << "w,h0_mean,h0_mean_se,h0_theory_mean\n";
    for (std::size_t i = 0; i < ws.h0_mean.size(); ++i) {
      m << es.windows[i % es.windows.size()] << ',' << format_double(ws.h0_mean[i]) << ','
        << format_double(ws.h0_mean_se[i]) << ',' << format_double(ws.h0_theory_mean[i]) << '\n';
    }
    out.text("h0_moments.csv", m.str());
  } else {
    out.text("results.csv", rows_csv(run_comm_experiment(es)));
  }
  return Json::object();
}

int run(const Invocation& inv) {
  const auto start = std::chrono::steady_clock::now();
  const std::string spec_text = read_text(inv.spec_path);
  Json spec;
  try {
    spec = Json::parse(spec_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SpecError(inv.spec_path.string() + ": invalid JSON: " + e.what());
  }
  check_spec_version(spec, inv.spec_path.string());
  const std::uint64_t seed = pick_seed(inv, spec);
  Outputs out(inv.out_dir);
  Json extra;
  if (inv.command == "simulate") {
    extra = cmd_simulate(inv, spec, out, seed);
  } else if (inv.command == "learn") {
    extra = cmd_learn(inv, spec, out, seed);
  } else if (inv.command == "detect") {
    extra = cmd_detect(inv, spec, out, seed);
  } else {
    extra = cmd_bench(inv, spec, out, seed);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.manifest(inv, spec_text, seed, seconds, Json{{"result", extra}});
  std::cout << "wrote " << inv.out_dir.string() << " (" << seconds << " s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Factorial LDS learning and transient signal detection"};
  app.require_subcommand(1);
  Invocation inv;
  std::string spec_path, out_dir = "out";
  std::uint64_t seed = 0;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"simulate", "Simulate an FLDS or comm-interference series"},
      {"learn", "Learn an IFLDS from a series"},
      {"detect", "Run a detector over a series"},
      {"bench-rpl", "Source-number recovery benchmark (M_hat, RE)"},
      {"bench-tsd", "Detection benchmark over an SOI grid"},
      {"bench-window", "Window-length study with statistic densities"},
      {"bench-comm", "Pulsed SOI over BPSK/QPSK interference"},
  };
  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> seed_opts;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("spec", spec_path, "JSON spec file")->required();
    sub->add_option("-o,--out", out_dir, "Output directory")->capture_default_str();
    seed_opts.push_back(sub->add_option("-s,--seed", seed, "RNG seed (overrides the spec file)"));
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (subs[i]->parsed()) {
      inv.command = subs[i]->get_name();
      if (seed_opts[i]->count() > 0) inv.seed = seed;
    }
  }
  inv.spec_path = spec_path;
  inv.out_dir = out_dir;
  try {
    return run(inv);
  } catch (const SpecError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 1;
  }
}
