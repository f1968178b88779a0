#include "iflds/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace iflds {

namespace {

double read_number(const Json& j, const std::string& what) {
  if (!j.is_number()) throw SpecError(what + " must be a number");
  double v = j.get<double>();
  if (!std::isfinite(v)) throw SpecError(what + " must be finite");
  return v;
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SpecError(std::string("field '") + key + "' has the wrong type");
  }
}

const Json& require(const Json& j, const char* key, const std::string& what) {
  auto it = j.find(key);
  if (it == j.end()) throw SpecError(what + " is missing '" + key + "'");
  return *it;
}

std::vector<double> number_list(const Json& j, const std::string& what) {
  if (!j.is_array()) throw SpecError(what + " must be an array");
  std::vector<double> out;
  for (const Json& v : j) out.push_back(read_number(v, what));
  return out;
}

Json mniw_to_json(const MniwPrior& p) {
  Mat2 m0 = p.M0, k0 = p.K0, s0 = p.S0;
  return Json{{"M0", to_json(m0)}, {"K0", to_json(k0)}, {"n0", p.n0}, {"S0", to_json(s0)}};
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_series_csv(std::ostream& os, const ObservationSeries& obs) {
  os << "t,p_i,p_q\n";
  for (std::size_t t = 0; t < obs.size(); ++t) {
    os << t + 1 << ',' << format_double(obs[t][0]) << ',' << format_double(obs[t][1]) << '\n';
  }
}

ObservationSeries read_series_csv(std::istream& is, const std::string& name) {
  ObservationSeries obs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("t,", 0) == 0) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) {
        throw SpecError(name + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
      }
      cells.push_back(v);
    }
    // Accept `t,p_i,p_q` or bare `p_i,p_q`.
    if (cells.size() != 2 && cells.size() != 3) {
      throw SpecError(name + ":" + std::to_string(lineno) + ": expected 2 or 3 columns");
    }
    Vec2 p(cells[cells.size() - 2], cells[cells.size() - 1]);
    if (!p.allFinite()) {
      throw SpecError(name + ":" + std::to_string(lineno) + ": non-finite sample");
    }
    obs.samples.push_back(p);
  }
  return obs;
}

void write_series_binary(std::ostream& os, const ObservationSeries& obs) {
  static_assert(std::endian::native == std::endian::little, "binary series are little-endian");
  for (const Vec2& p : obs.samples) {
    double v[2] = {p[0], p[1]};
    os.write(reinterpret_cast<const char*>(v), sizeof v);
  }
}

ObservationSeries read_series_binary(std::istream& is, const std::string& name) {
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() % (2 * sizeof(double)) != 0) {
    throw SpecError(name + ": size is not a multiple of 16 bytes");
  }
  ObservationSeries obs;
  const std::size_t n = bytes.size() / (2 * sizeof(double));
  obs.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v[2];
    std::memcpy(v, bytes.data() + i * sizeof v, sizeof v);
    Vec2 p(v[0], v[1]);
    if (!p.allFinite()) throw SpecError(name + ": non-finite sample at index " + std::to_string(i));
    obs.samples.push_back(p);
  }
  return obs;
}

namespace {

bool is_binary(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  return ext == ".bin" || ext == ".f64";
}

std::ifstream open_in(const std::filesystem::path& path, bool binary) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in || std::filesystem::is_directory(path)) {
    throw SpecError("cannot read file: " + path.string());
  }
  return in;
}

std::ofstream open_out(const std::filesystem::path& path, bool binary) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw SpecError("cannot write file: " + path.string());
  return out;
}

}  // namespace

ObservationSeries load_series(const std::filesystem::path& path) {
  const bool bin = is_binary(path);
  std::ifstream in = open_in(path, bin);
  return bin ? read_series_binary(in, path.string()) : read_series_csv(in, path.string());
}

void save_series(const std::filesystem::path& path, const ObservationSeries& obs) {
  const bool bin = is_binary(path);
  std::ofstream out = open_out(path, bin);
  bin ? write_series_binary(out, obs) : write_series_csv(out, obs);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in = open_in(path, false);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out = open_out(path, false);
  out << text;
}

Json load_json(const std::filesystem::path& path) {
  std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SpecError(path.string() + ": invalid JSON: " + e.what());
  }
}

void save_json(const std::filesystem::path& path, const Json& j) {
  write_text(path, j.dump(2) + "\n");
}

void check_spec_version(const Json& j, const std::string& what) {
  if (!j.is_object()) throw SpecError(what + " must be a JSON object");
  auto it = j.find("spec_version");
  if (it == j.end()) throw SpecError(what + " has no spec_version");
  if (!it->is_number_integer() || it->get<int>() != kSpecVersion) {
    throw SpecError(what + " has spec_version " + it->dump() + ", expected " +
                    std::to_string(kSpecVersion));
  }
}

Json to_json(const Mat2& m) {
  return Json::array({Json::array({m(0, 0), m(0, 1)}), Json::array({m(1, 0), m(1, 1)})});
}

Mat2 mat2_from_json(const Json& j, const std::string& what) {
  Mat2 m;
  if (j.is_array() && j.size() == 2 && j[0].is_array()) {
    for (int r = 0; r < 2; ++r) {
      if (!j[r].is_array() || j[r].size() != 2) throw SpecError(what + " must be 2x2");
      for (int c = 0; c < 2; ++c) m(r, c) = read_number(j[r][c], what);
    }
    return m;
  }
  // Row-major flat list of four.
  std::vector<double> flat = number_list(j, what);
  if (flat.size() != 4) throw SpecError(what + " must be 2x2 or a flat list of 4");
  m << flat[0], flat[1], flat[2], flat[3];
  return m;
}

Json to_json(const Vec2& v) { return Json::array({v[0], v[1]}); }

Vec2 vec2_from_json(const Json& j, const std::string& what) {
  std::vector<double> v = number_list(j, what);
  if (v.size() != 2) throw SpecError(what + " must have two entries");
  return Vec2(v[0], v[1]);
}

Json to_json(const FldsModel& model) {
  Json sources = Json::array();
  for (const LdsParams& s : model.sources) {
    sources.push_back(
        Json{{"G", to_json(s.G)}, {"C", to_json(s.C)}, {"Q", to_json(s.Q)}, {"R", to_json(s.R)}});
  }
  return Json{{"shared_noise", model.shared_noise}, {"sources", sources}};
}

FldsModel model_from_json(const Json& j) {
  if (!j.is_object()) throw SpecError("model must be a JSON object");
  FldsModel model;
  if (j.contains("reference")) {
    const Json& r = j["reference"];
    if (!r.is_number_integer()) throw SpecError("model.reference must be an integer 1..4");
    model = reference_model(r.get<std::size_t>());
  } else {
    const Json& sources = require(j, "sources", "model");
    if (!sources.is_array() || sources.empty()) throw SpecError("model.sources must be a non-empty array");
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const std::string what = "model.sources[" + std::to_string(i) + "]";
      LdsParams s;
      s.G = mat2_from_json(require(sources[i], "G", what), what + ".G");
      s.C = mat2_from_json(require(sources[i], "C", what), what + ".C");
      s.Q = mat2_from_json(require(sources[i], "Q", what), what + ".Q");
      s.R = mat2_from_json(require(sources[i], "R", what), what + ".R");
      model.sources.push_back(s);
    }
  }
  model.shared_noise = get_or(j, "shared_noise", model.shared_noise);
  model.validate();
  return model;
}

Json to_json(const IterationRecord& rec) {
  Json g = Json::array(), c = Json::array();
  for (const Mat2& m : rec.G) g.push_back(Json::array({m(0, 0), m(0, 1), m(1, 0), m(1, 1)}));
  for (const Mat2& m : rec.C) c.push_back(Json::array({m(0, 0), m(0, 1), m(1, 0), m(1, 1)}));
  return Json{{"iteration", rec.iteration},
              {"M", rec.active},
              {"chains", rec.chains},
              {"a", rec.a},
              {"b", rec.b},
              {"gamma", rec.gamma},
              {"G", g},
              {"C", c},
              {"Q", Json::array({rec.Q(0, 0), rec.Q(0, 1), rec.Q(1, 0), rec.Q(1, 1)})},
              {"R", Json::array({rec.R(0, 0), rec.R(0, 1), rec.R(1, 0), rec.R(1, 1)})},
              {"joint_log_likelihood", rec.joint_log_density}};
}

Json to_json(const Chain& chain) {
  Json x = Json::array();
  for (const Vec2& v : chain.x) {
    x.push_back(v[0]);
    x.push_back(v[1]);
  }
  return Json{{"a", chain.a},   {"b", chain.b}, {"gamma", chain.gamma},
              {"G", to_json(chain.G)}, {"C", to_json(chain.C)},
              {"s", chain.s},   {"z", chain.z}, {"x", x}};
}

Chain chain_from_json(const Json& j) {
  Chain c;
  c.a = read_number(require(j, "a", "chain"), "chain.a");
  c.b = read_number(require(j, "b", "chain"), "chain.b");
  c.gamma = read_number(require(j, "gamma", "chain"), "chain.gamma");
  c.G = mat2_from_json(require(j, "G", "chain"), "chain.G");
  c.C = mat2_from_json(require(j, "C", "chain"), "chain.C");
  try {
    c.s = require(j, "s", "chain").get<std::vector<std::uint8_t>>();
    c.z = require(j, "z", "chain").get<std::vector<std::uint8_t>>();
  } catch (const nlohmann::json::exception&) {
    throw SpecError("chain.s and chain.z must be arrays of 0/1");
  }
  std::vector<double> x = number_list(require(j, "x", "chain"), "chain.x");
  if (x.size() % 2 != 0) throw SpecError("chain.x must hold pairs");
  for (std::size_t i = 0; i < x.size(); i += 2) c.x.emplace_back(x[i], x[i + 1]);
  return c;
}

Json to_json(const IfldsState& state) {
  Json chains = Json::array();
  for (const Chain& c : state.chains) chains.push_back(to_json(c));
  return Json{{"spec_version", kSpecVersion},
              {"length", state.length},
              {"Q", to_json(state.Q)},
              {"R", to_json(state.R)},
              {"chains", chains}};
}

IfldsState state_from_json(const Json& j) {
  check_spec_version(j, "checkpoint");
  IfldsState st;
  st.length = require(j, "length", "checkpoint").get<std::size_t>();
  st.Q = mat2_from_json(require(j, "Q", "checkpoint"), "checkpoint.Q");
  st.R = mat2_from_json(require(j, "R", "checkpoint"), "checkpoint.R");
  for (const Json& c : require(j, "chains", "checkpoint")) st.chains.push_back(chain_from_json(c));
  st.validate();
  return st;
}

Json to_json(const Hyper& h) {
  return Json{{"alpha", h.alpha},   {"beta0", h.beta0},   {"beta1", h.beta1},
              {"gamma0", h.gamma0}, {"gamma1", h.gamma1}, {"sticky", h.sticky},
              {"empty_count_eps", h.empty_count_eps}, {"mniw", mniw_to_json(h.mniw)}};
}

Hyper hyper_from_json(const Json& j, const ObservationSeries& obs) {
  if (!j.is_null() && !j.is_object()) throw SpecError("hyper must be a JSON object");
  Json o = j.is_null() ? Json::object() : j;
  Hyper h = Hyper::reference(obs, get_or(o, "s0_scale", 0.75), get_or(o, "s0_divisor", 1.0));
  h.alpha = get_or(o, "alpha", h.alpha);
  h.beta0 = get_or(o, "beta0", h.beta0);
  h.beta1 = get_or(o, "beta1", h.beta1);
  h.gamma0 = get_or(o, "gamma0", h.gamma0);
  h.gamma1 = get_or(o, "gamma1", h.gamma1);
  h.sticky = get_or(o, "sticky", h.sticky);
  h.empty_count_eps = get_or(o, "empty_count_eps", h.empty_count_eps);
  if (o.contains("mniw")) {
    const Json& m = o["mniw"];
    h.mniw.M0 = mat2_from_json(require(m, "M0", "hyper.mniw"), "hyper.mniw.M0");
    h.mniw.K0 = mat2_from_json(require(m, "K0", "hyper.mniw"), "hyper.mniw.K0");
    h.mniw.n0 = read_number(require(m, "n0", "hyper.mniw"), "hyper.mniw.n0");
    h.mniw.S0 = mat2_from_json(require(m, "S0", "hyper.mniw"), "hyper.mniw.S0");
  }
  h.validate();
  return h;
}

Json to_json(const DetectionReport& r, bool include_trace) {
  Json j{{"detector", r.detector},
         {"tau", r.tau ? Json(*r.tau) : Json(nullptr)},
         {"alarms", r.alarms},
         {"evaluated_steps", r.evaluated},
         {"h", r.threshold},
         {"w", r.window},
         {"w_alpha", r.false_alarm_interval},
         {"alpha_tilde", r.alpha_tilde},
         {"bound_false_alarm", r.bound_false_alarm ? Json(*r.bound_false_alarm) : Json(nullptr)},
         {"bound_missed_detection",
          r.bound_missed_detection ? Json(*r.bound_missed_detection) : Json(nullptr)}};
  if (include_trace) j["W"] = r.statistic;
  return j;
}

void write_statistic_csv(std::ostream& os, const DetectionReport& r) {
  os << "t,llr,W\n";
  for (std::size_t t = 0; t < r.llr.size(); ++t) {
    os << t + 1 << ',' << format_double(r.llr[t]) << ',' << format_double(r.statistic[t]) << '\n';
  }
}

}  // namespace iflds
