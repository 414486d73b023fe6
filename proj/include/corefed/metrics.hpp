#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "corefed/errors.hpp"

namespace corefed {

inline constexpr int kGlobalClient = -1;

struct MetricRow {
  int round = 0;
  int client_id = kGlobalClient;
  std::string split;
  std::string metric;
  double value = 0.0;
  double wall_ms = 0.0;

  bool operator==(const MetricRow &) const = default;
};

/// Append-only list of per-round measurements.
class MetricsTrace {
public:
  void add(int round, int client_id, std::string split, std::string metric, double value, double wall_ms = 0.0) {
    rows_.push_back({round, client_id, std::move(split), std::move(metric), value, wall_ms});
  }

  void append(const MetricsTrace &other) { rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end()); }

  const std::vector<MetricRow> &rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }

  /// Values of one (client, split, metric) series in row order.
  std::vector<double> series(const std::string &metric, const std::string &split = "test",
                             int client_id = kGlobalClient) const {
    std::vector<double> out;
    for (const auto &r : rows_) {
      if (r.metric == metric && r.split == split && r.client_id == client_id) out.push_back(r.value);
    }
    return out;
  }

  std::optional<double> last(const std::string &metric, const std::string &split = "test",
                             int client_id = kGlobalClient) const {
    for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
      if (it->metric == metric && it->split == split && it->client_id == client_id) return it->value;
    }
    return std::nullopt;
  }

  int max_round() const {
    int m = -1;
    for (const auto &r : rows_) m = std::max(m, r.round);
    return m;
  }

private:
  std::vector<MetricRow> rows_;
};

namespace detail {

/// RFC 4180: quote fields containing separators, quotes or line breaks.
inline std::string csv_field(const std::string &s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_ms(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

} // namespace detail

inline constexpr const char *kMetricsHeader = "round,client_id,split,metric,value,wall_ms";

inline void write_metrics_csv(std::ostream &os, const MetricsTrace &trace) {
  os << kMetricsHeader << "\r\n";
  for (const auto &r : trace.rows()) {
    os << r.round << ',' << r.client_id << ',' << detail::csv_field(r.split) << ','
       << detail::csv_field(r.metric) << ',' << detail::format_double(r.value) << ','
       << detail::format_ms(r.wall_ms) << "\r\n";
  }
}

inline std::string metrics_csv_string(const MetricsTrace &trace) {
  std::ostringstream os;
  write_metrics_csv(os, trace);
  return os.str();
}

inline void write_text_file(const std::filesystem::path &path, const std::string &contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << contents;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

} // namespace corefed
