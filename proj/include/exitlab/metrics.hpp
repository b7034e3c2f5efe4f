#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace exitlab {

// One generated token and the (1-based) layer its forward pass stopped at.
struct ExitRecord {
  std::string token;
  int exit_layer = 0;
  int position = 0;
};

// Average layer savings in percent: 100/N * sum(1 - exit/L).
double als(std::span<const ExitRecord> records, int total_layers);
// Fraction of tokens that exited before the final layer.
double exit_rate(std::span<const ExitRecord> records, int total_layers);
// Mean fraction of layers used per token; equals 1 - ALS/100.
double avg_compute(std::span<const ExitRecord> records, int total_layers);

struct Palette {
  bool color = true;  // false: plain text on the terminal
  static constexpr int kBuckets = 8;
};

// Colour bucket for an exit layer: 0 (warm, shallow) .. 7 (cool, deep).
int exit_bucket(int exit_layer, int total_layers);

struct ExitMap {
  std::string terminal;  // 256-colour ANSI escapes (or plain text)
  std::string html;      // standalone document with a legend
};

ExitMap render_exit_map(std::span<const ExitRecord> records, int total_layers, const Palette& palette = {});

// Column-named numeric table written as CSV with 9 significant digits.
struct CurveTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

std::string format_curves(const CurveTable& table);
void export_curves(const std::filesystem::path& path, const CurveTable& table);
CurveTable parse_curves(const std::string& csv);

}  // namespace exitlab
