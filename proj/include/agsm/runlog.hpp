#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "agsm/data.hpp"

namespace agsm {

// One training-step log line; val_alignment is NaN until the first validation
// pass and carries the latest value afterwards.
struct RunRecord {
  int step = 0;
  double pos_loss = 0.0;
  double neg_loss = 0.0;
  double delta_norm = 0.0;
  double pl_entropy = 0.0;
  double val_alignment = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr const char* kRunCsvHeader =
    "step,pos_loss,neg_loss,delta_norm,pl_entropy,val_alignment";

namespace detail {

// %.17g round-trips doubles exactly, keeping logs byte-stable across runs.
inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace detail

inline void write_run_csv(const std::string& path,
                          const std::vector<RunRecord>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << kRunCsvHeader << "\n";
  for (const RunRecord& r : records) {
    f << r.step << ',' << detail::fmt_g17(r.pos_loss) << ','
      << detail::fmt_g17(r.neg_loss) << ',' << detail::fmt_g17(r.delta_norm)
      << ',' << detail::fmt_g17(r.pl_entropy) << ','
      << detail::fmt_g17(r.val_alignment) << "\n";
  }
}

inline std::vector<RunRecord> read_run_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(f, line) || line != kRunCsvHeader)
    throw std::runtime_error("bad run CSV header in " + path);
  std::vector<RunRecord> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != 6)
      throw std::runtime_error("bad run CSV row in " + path);
    RunRecord r;
    r.step = std::stoi(fields[0]);
    r.pos_loss = std::stod(fields[1]);
    r.neg_loss = std::stod(fields[2]);
    r.delta_norm = std::stod(fields[3]);
    r.pl_entropy = std::stod(fields[4]);
    r.val_alignment = std::stod(fields[5]);
    out.push_back(r);
  }
  return out;
}

// Sample files carry the condition id followed by the coordinates.
inline void write_samples_csv(const std::string& path,
                              const std::vector<LabeledPoint>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  int d = samples.empty() ? 0 : int(samples.front().first.size());
  f << "cond";
  for (int k = 0; k < d; ++k) f << ",x" << k;
  f << "\n";
  for (const auto& [x, c] : samples) {
    f << c;
    for (int k = 0; k < x.size(); ++k) f << ',' << detail::fmt_g17(x[k]);
    f << "\n";
  }
}

inline std::vector<LabeledPoint> read_samples_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("cond", 0) != 0)
    throw std::runtime_error("bad samples CSV header in " + path);
  std::vector<LabeledPoint> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() < 2)
      throw std::runtime_error("bad samples CSV row in " + path);
    Eigen::VectorXd x(fields.size() - 1);
    for (std::size_t k = 1; k < fields.size(); ++k)
      x[int(k) - 1] = std::stod(fields[k]);
    out.emplace_back(x, std::stoi(fields[0]));
  }
  return out;
}

}  // namespace agsm
