#include "exitlab/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "exitlab/error.hpp"

namespace exitlab {

namespace {

void check_records(std::span<const ExitRecord> records, int total_layers) {
  if (records.empty()) throw MetricError("metrics need at least one exit record");
  if (total_layers < 1) throw MetricError("total layer count must be positive");
  for (const auto& r : records)
    if (r.exit_layer < 1 || r.exit_layer > total_layers)
      throw MetricError("exit layer " + std::to_string(r.exit_layer) + " outside [1, " +
                        std::to_string(total_layers) + "]");
}

// Warm (shallow) to cool (deep).
constexpr std::array<const char*, Palette::kBuckets> kHex = {"#d73027", "#f46d43", "#fdae61", "#fee090",
                                                            "#e0f3f8", "#abd9e9", "#74add1", "#4575b4"};
constexpr std::array<int, Palette::kBuckets> kAnsi = {160, 202, 215, 222, 195, 153, 110, 61};

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

double als(std::span<const ExitRecord> records, int total_layers) {
  check_records(records, total_layers);
  double sum = 0.0;
  for (const auto& r : records) sum += 1.0 - static_cast<double>(r.exit_layer) / total_layers;
  return 100.0 * sum / static_cast<double>(records.size());
}

double exit_rate(std::span<const ExitRecord> records, int total_layers) {
  check_records(records, total_layers);
  std::size_t early = 0;
  for (const auto& r : records) early += r.exit_layer < total_layers ? 1 : 0;
  return static_cast<double>(early) / static_cast<double>(records.size());
}

double avg_compute(std::span<const ExitRecord> records, int total_layers) {
  check_records(records, total_layers);
  double sum = 0.0;
  for (const auto& r : records) sum += static_cast<double>(r.exit_layer) / total_layers;
  return sum / static_cast<double>(records.size());
}

int exit_bucket(int exit_layer, int total_layers) {
  if (total_layers <= 1) return Palette::kBuckets - 1;
  const double t = static_cast<double>(exit_layer - 1) / (total_layers - 1);
  return static_cast<int>(std::lround(t * (Palette::kBuckets - 1)));
}

ExitMap render_exit_map(std::span<const ExitRecord> records, int total_layers, const Palette& palette) {
  ExitMap map;
  std::ostringstream body;
  for (const auto& r : records) {
    const auto b = static_cast<std::size_t>(exit_bucket(r.exit_layer, total_layers));
    if (palette.color)
      map.terminal += "\x1b[38;5;" + std::to_string(kAnsi[b]) + "m" + r.token + "\x1b[0m";
    else
      map.terminal += r.token;
    body << "<span class=\"b" << b << "\" title=\"layer " << r.exit_layer << "\">" << html_escape(r.token)
         << "</span>";
  }

  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>exit map</title>\n<style>\n"
       << "body { font-family: monospace; background: #ffffff; }\n"
       << ".tokens { white-space: pre-wrap; font-size: 16px; line-height: 1.6; }\n"
       << ".legend span { display: inline-block; padding: 2px 6px; margin-right: 4px; }\n";
  for (std::size_t b = 0; b < kHex.size(); ++b) html << ".b" << b << " { background: " << kHex[b] << "; }\n";
  html << "</style>\n</head>\n<body>\n<div class=\"legend\">";
  for (int layer = 1; layer <= total_layers; ++layer)
    html << "<span class=\"b" << exit_bucket(layer, total_layers) << "\">layer " << layer << "</span>";
  html << "</div>\n<div class=\"tokens\">" << body.str() << "</div>\n</body>\n</html>\n";
  map.html = html.str();
  return map;
}

std::string format_curves(const CurveTable& table) {
  std::string out;
  for (std::size_t c = 0; c < table.columns.size(); ++c) out += (c ? "," : "") + table.columns[c];
  out += "\n";
  for (const auto& row : table.rows) {
    if (row.size() != table.columns.size())
      throw ExportError("row has " + std::to_string(row.size()) + " values for " +
                        std::to_string(table.columns.size()) + " columns");
    for (std::size_t c = 0; c < row.size(); ++c) out += (c ? "," : "") + format_number(row[c]);
    out += "\n";
  }
  return out;
}

void export_curves(const std::filesystem::path& path, const CurveTable& table) {
  const std::string text = format_curves(table);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

CurveTable parse_curves(const std::string& csv) {
  CurveTable t;
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line)) throw ExportError("empty CSV");
  std::istringstream hs(line);
  for (std::string f; std::getline(hs, f, ',');) t.columns.push_back(f);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) row.push_back(std::stod(f));
    if (row.size() != t.columns.size()) throw ExportError("CSV row width does not match header");
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace exitlab
