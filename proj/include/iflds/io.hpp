#pragma once

#include "iflds/learn.hpp"
#include "iflds/model.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace iflds {

using Json = nlohmann::ordered_json;

inline constexpr int kSpecVersion = 1;

// Formats with %.17g so a double survives a text round trip.
std::string format_double(double v);

// `t,p_i,p_q` with 1-based t.
void write_series_csv(std::ostream& os, const ObservationSeries& obs);
ObservationSeries read_series_csv(std::istream& is, const std::string& name = "<stream>");

// Interleaved little-endian float64 pairs (p_i, p_q), no header.
void write_series_binary(std::ostream& os, const ObservationSeries& obs);
ObservationSeries read_series_binary(std::istream& is, const std::string& name = "<stream>");

// Dispatches on the extension: .bin / .f64 are binary, anything else CSV.
// A missing or unreadable file is a SpecError naming the path.
ObservationSeries load_series(const std::filesystem::path& path);
void save_series(const std::filesystem::path& path, const ObservationSeries& obs);

Json load_json(const std::filesystem::path& path);
void save_json(const std::filesystem::path& path, const Json& j);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Rejects a document whose spec_version is missing or not kSpecVersion.
void check_spec_version(const Json& j, const std::string& what);

Json to_json(const Mat2& m);
Mat2 mat2_from_json(const Json& j, const std::string& what);
Json to_json(const Vec2& v);
Vec2 vec2_from_json(const Json& j, const std::string& what);

// Either {"reference": m} or {"sources": [{G, C, Q, R}, ...]}, optionally with
// "shared_noise".
Json to_json(const FldsModel& model);
FldsModel model_from_json(const Json& j);

Json to_json(const IterationRecord& rec);
Json to_json(const Chain& chain);
Chain chain_from_json(const Json& j);
// Full sampler state including the s, z and x paths, enough to resume.
Json to_json(const IfldsState& state);
IfldsState state_from_json(const Json& j);

Json to_json(const Hyper& hyper);
Hyper hyper_from_json(const Json& j, const ObservationSeries& obs);

struct DetectionReport {
  std::string detector;
  std::optional<std::size_t> tau;
  std::size_t alarms = 0;
  // Steps at which the detector could fire.
  std::size_t evaluated = 0;
  double threshold = 0.0;
  std::size_t window = 0;
  std::size_t false_alarm_interval = 0;
  double alpha_tilde = 0.0;
  std::optional<double> bound_false_alarm;
  std::optional<double> bound_missed_detection;
  std::vector<double> llr;
  std::vector<double> statistic;
};

Json to_json(const DetectionReport& report, bool include_trace = false);
// `t,llr,W`
void write_statistic_csv(std::ostream& os, const DetectionReport& report);

}  // namespace iflds
