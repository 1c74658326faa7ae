#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "agsm/rng.hpp"
#include "agsm/schedule.hpp"

namespace agsm {

// Synthetic conditional data: K isotropic Gaussian modes, one per condition.
struct MixtureSpec {
  int K = 8;
  int d = 2;
  std::vector<Eigen::VectorXd> mode_center;
  double mode_std = 0.3;
};

inline void validate(const MixtureSpec& spec) {
  if (spec.K < 1 || int(spec.mode_center.size()) != spec.K)
    throw std::invalid_argument("mixture needs one center per condition");
  double min_dist = std::numeric_limits<double>::infinity();
  for (int a = 0; a < spec.K; ++a) {
    if (spec.mode_center[a].size() != spec.d)
      throw std::invalid_argument("center dimension mismatch");
    for (int b = a + 1; b < spec.K; ++b)
      min_dist = std::min(min_dist, (spec.mode_center[a] - spec.mode_center[b]).norm());
  }
  if (spec.K > 1 && !(spec.mode_std < 0.5 * min_dist))
    throw std::invalid_argument("modes overlap: mode_std must stay below half the minimum center distance");
}

// Default laboratory dataset: K modes on a circle of radius R in the first two
// coordinates (zeros beyond).
inline MixtureSpec ring_spec(int K = 8, int d = 2, double radius = 4.0,
                             double mode_std = 0.3) {
  MixtureSpec spec;
  spec.K = K;
  spec.d = d;
  spec.mode_std = mode_std;
  for (int k = 0; k < K; ++k) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(d);
    if (d > 1) {
      double ang = 2.0 * M_PI * double(k) / double(K);
      c[0] = radius * std::cos(ang);
      c[1] = radius * std::sin(ang);
    } else {
      // Ring angles collapse in one dimension; spread the modes on a line.
      c[0] = K > 1 ? radius * (2.0 * double(k) / double(K - 1) - 1.0) : 0.0;
    }
    spec.mode_center.push_back(c);
  }
  validate(spec);
  return spec;
}

using LabeledPoint = std::pair<Eigen::VectorXd, int>;

inline std::vector<LabeledPoint> sample_pairs(const MixtureSpec& spec, int n,
                                              std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("negative sample count");
  auto rng = substream(seed, "data");
  std::uniform_int_distribution<int> pick(0, spec.K - 1);
  std::vector<LabeledPoint> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    int c = pick(rng);
    Eigen::VectorXd x = spec.mode_center[c];
    if (spec.mode_std > 0.0) x += spec.mode_std * normal_vector(rng, spec.d);
    out.emplace_back(std::move(x), c);
  }
  return out;
}

// G x G pairing grid sharing one timestep and one noise draw; (i, j) is a
// positive pair iff i == j.
struct GroupBatch {
  int G = 0;
  std::vector<Eigen::VectorXd> x0;
  std::vector<int> cond;
  int t = 0;
  Eigen::VectorXd eps;
  std::vector<Eigen::VectorXd> x_t;
};

inline GroupBatch build_group(const std::vector<LabeledPoint>& pairs,
                              const NoiseSchedule& sched, std::mt19937_64& rng) {
  if (pairs.empty()) throw std::invalid_argument("empty group");
  GroupBatch g;
  g.G = int(pairs.size());
  for (const auto& [x, c] : pairs) {
    for (int prev : g.cond)
      if (prev == c) throw std::invalid_argument("duplicate condition in group");
    g.x0.push_back(x);
    g.cond.push_back(c);
  }
  std::uniform_int_distribution<int> pick_t(1, sched.T);
  g.t = pick_t(rng);
  g.eps = normal_vector(rng, int(g.x0[0].size()));
  for (const auto& x : g.x0) g.x_t.push_back(forward_noise(sched, g.t, x, g.eps));
  return g;
}

inline GroupBatch build_group(const std::vector<LabeledPoint>& pairs,
                              const NoiseSchedule& sched, std::uint64_t seed) {
  auto rng = substream(seed, "group");
  return build_group(pairs, sched, rng);
}

// Draws G dataset entries with pairwise-distinct conditions, uniformly over
// the conditions present.
inline std::vector<LabeledPoint> draw_group_pairs(const std::vector<LabeledPoint>& data,
                                                  int G, std::mt19937_64& rng) {
  std::vector<std::vector<int>> by_cond;
  for (int i = 0; i < int(data.size()); ++i) {
    int c = data[i].second;
    if (c >= int(by_cond.size())) by_cond.resize(c + 1);
    by_cond[c].push_back(i);
  }
  std::vector<int> conds;
  for (int c = 0; c < int(by_cond.size()); ++c)
    if (!by_cond[c].empty()) conds.push_back(c);
  if (int(conds.size()) < G)
    throw std::invalid_argument("group size exceeds number of distinct conditions");
  for (int i = 0; i < G; ++i) {
    std::uniform_int_distribution<int> pick(i, int(conds.size()) - 1);
    std::swap(conds[i], conds[pick(rng)]);
  }
  std::vector<LabeledPoint> out;
  for (int i = 0; i < G; ++i) {
    const auto& idx = by_cond[conds[i]];
    std::uniform_int_distribution<int> pick(0, int(idx.size()) - 1);
    out.push_back(data[idx[pick(rng)]]);
  }
  return out;
}

}  // namespace agsm
