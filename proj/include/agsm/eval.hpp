#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "agsm/data.hpp"
#include "agsm/runlog.hpp"

namespace agsm {

// Equal priors and a shared isotropic std make the Gaussian posterior argmax
// the nearest-center rule, so the alignment oracle is exact for this mixture.
inline int classify_to_mode(const Eigen::VectorXd& x, const MixtureSpec& spec) {
  int best = 0;
  double best_d2 = (x - spec.mode_center[0]).squaredNorm();
  for (int k = 1; k < spec.K; ++k) {
    double d2 = (x - spec.mode_center[k]).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

inline double alignment_accuracy(const std::vector<LabeledPoint>& samples,
                                 const MixtureSpec& spec) {
  if (samples.empty()) throw std::invalid_argument("no samples to score");
  int hits = 0;
  for (const auto& [x, c] : samples)
    if (classify_to_mode(x, spec) == c) ++hits;
  return double(hits) / double(samples.size());
}

// All-pairs V-statistic 2 E||a-b|| - E||a-a'|| - E||b-b'||: nonnegative, zero
// exactly when the two multisets coincide.
inline double energy_distance(const std::vector<Eigen::VectorXd>& a,
                              const std::vector<Eigen::VectorXd>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("empty sample set");
  const double na = double(a.size()), nb = double(b.size());
  double cross = 0.0, within_a = 0.0, within_b = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) cross += (x - y).norm();
  for (const auto& x : a)
    for (const auto& y : a) within_a += (x - y).norm();
  for (const auto& x : b)
    for (const auto& y : b) within_b += (x - y).norm();
  return 2.0 * cross / (na * nb) - within_a / (na * na) - within_b / (nb * nb);
}

struct StabilityPoint {
  int step = 0;
  double pos_loss = 0.0;
  double neg_loss = 0.0;
  double ratio_to_baseline = 0.0;  // windowed neg_loss over the first window's
};

// Reduce a run to non-overlapping window means; the first full window sets the
// negative-loss baseline. Trailing records short of a full window are dropped.
inline std::vector<StabilityPoint> stability_curve(const std::vector<RunRecord>& records,
                                                   int window) {
  if (records.empty()) throw std::invalid_argument("empty run record series");
  if (window < 1 || std::size_t(window) > records.size())
    throw std::invalid_argument("window larger than series");
  const int n_windows = int(records.size()) / window;
  std::vector<StabilityPoint> out;
  double baseline = 0.0;
  for (int w = 0; w < n_windows; ++w) {
    StabilityPoint pt;
    for (int k = 0; k < window; ++k) {
      const RunRecord& r = records[std::size_t(w) * window + k];
      pt.pos_loss += r.pos_loss;
      pt.neg_loss += r.neg_loss;
    }
    pt.pos_loss /= window;
    pt.neg_loss /= window;
    pt.step = records[std::size_t(w) * window + window - 1].step;
    if (w == 0) baseline = pt.neg_loss;
    pt.ratio_to_baseline = pt.neg_loss / baseline;
    out.push_back(pt);
  }
  return out;
}

}  // namespace agsm
