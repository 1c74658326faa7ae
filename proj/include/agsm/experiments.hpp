#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "agsm/checkpoint.hpp"
#include "agsm/config.hpp"
#include "agsm/eval.hpp"
#include "agsm/sampling.hpp"
#include "agsm/train.hpp"

namespace agsm {

// Shared per-experiment state: the data, schedule, and one frozen pretrained
// backbone that every arm reuses.
struct Workbench {
  AppConfig cfg;
  MixtureSpec spec;
  NoiseSchedule sched;
  std::vector<LabeledPoint> data;
  DenoiserParams params;
};

inline Workbench make_workbench(const AppConfig& cfg) {
  Workbench w;
  w.cfg = cfg;
  w.spec = config_spec(cfg);
  w.sched = config_schedule(cfg);
  w.data = sample_pairs(w.spec, cfg.n_train, cfg.seed);
  w.params =
      pretrain_backbone(w.data, w.sched, config_dims(cfg), config_pretrain(cfg), cfg.seed)
          .params;
  return w;
}

// Spread n samples over all K conditions; sampling noise is keyed by the seed
// and chain only, so arms that share a seed see common random numbers.
inline std::vector<LabeledPoint> sample_all_conditions(const DenoiserParams& p,
                                                       const SoftTokenBank& bank,
                                                       const NoiseSchedule& sched, int K,
                                                       int n, double scale,
                                                       SampleStrategy strategy,
                                                       std::uint64_t seed) {
  std::vector<LabeledPoint> out;
  out.reserve(std::size_t(std::max(n, 0)));
  for (int c = 0; c < K; ++c) {
    int n_c = n / K + (c < n % K ? 1 : 0);
    auto xs = ddpm_sample(p, bank, sched, c, n_c, scale, strategy,
                          derive_seed(seed, "sample-cond", std::uint64_t(c)));
    for (auto& x : xs) out.emplace_back(std::move(x), c);
  }
  return out;
}

// Mean per-condition energy distance between generated samples and fresh
// draws from the true mode — the artifact's distribution-quality score.
inline double mean_energy_to_truth(const std::vector<LabeledPoint>& gen,
                                   const MixtureSpec& spec, int n_ref_per_cond,
                                   std::uint64_t seed) {
  double acc = 0.0;
  int used = 0;
  for (int k = 0; k < spec.K; ++k) {
    std::vector<Eigen::VectorXd> g;
    for (const auto& [x, c] : gen)
      if (c == k) g.push_back(x);
    if (g.empty()) continue;
    auto rng = substream(seed, "energy-ref", std::uint64_t(k));
    std::vector<Eigen::VectorXd> ref;
    ref.reserve(std::size_t(n_ref_per_cond));
    for (int i = 0; i < n_ref_per_cond; ++i)
      ref.push_back(spec.mode_center[k] + spec.mode_std * normal_vector(rng, spec.d));
    acc += energy_distance(g, ref);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("no generated samples to score");
  return acc / used;
}

namespace detail {

inline std::string fmt_tag(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline nlohmann::json stats_json(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= xs.empty() ? 1.0 : double(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  double sd = xs.size() > 1 ? std::sqrt(var / double(xs.size() - 1)) : 0.0;
  return {{"per_seed", xs}, {"mean", mean}, {"std", sd}};
}

inline double mean_of(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  return xs.empty() ? 0.0 : m / double(xs.size());
}

inline double sample_var(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double m = mean_of(xs), v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return v / double(xs.size() - 1);
}

inline void write_stability_csv(const std::string& path,
                                const std::vector<StabilityPoint>& curve) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << "step,pos_loss,neg_loss,ratio_to_baseline\n";
  for (const auto& pt : curve)
    f << pt.step << ',' << fmt_g17(pt.pos_loss) << ',' << fmt_g17(pt.neg_loss) << ','
      << fmt_g17(pt.ratio_to_baseline) << "\n";
}

inline void write_summary(const std::string& out_dir, const nlohmann::json& summary) {
  std::ofstream f(out_dir + "/summary.json", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write summary in " + out_dir);
  f << summary.dump(2) << "\n";
}

// One post-training run: fresh tokens from the replicate seed, train, then
// sample with the configured strategy and score alignment and energy.
struct RunScore {
  bool ok = false;
  std::string error;
  PosttrainResult result;
  double alignment = 0.0;
  double energy = 0.0;
};

inline RunScore run_and_score(const Workbench& w, const PosttrainConfig& pt,
                              std::uint64_t replicate_seed, SampleStrategy strategy) {
  RunScore rs;
  const AppConfig& cfg = w.cfg;
  SoftTokenBank bank = init_tokens(cfg.m, cfg.d_s, cfg.token_init_std,
                                   derive_seed(replicate_seed, "tokens"), cfg.ema_decay);
  try {
    rs.result = posttrain(w.params, std::move(bank), w.sched, w.data, pt, replicate_seed);
  } catch (const std::exception& e) {
    rs.error = e.what();
    return rs;
  }
  std::uint64_t sample_seed = derive_seed(replicate_seed, "sampling");
  auto samples = sample_all_conditions(w.params, rs.result.bank, w.sched, cfg.K,
                                       cfg.sample_n, cfg.cfg_scale, strategy, sample_seed);
  rs.alignment = alignment_accuracy(samples, w.spec);
  rs.energy = mean_energy_to_truth(samples, w.spec, std::max(64, cfg.sample_n / cfg.K),
                                   sample_seed);
  rs.ok = true;
  return rs;
}

}  // namespace detail

// Figure-analog: AGSM's negative-pair denoising loss stays bounded while the
// contrastive baseline's diverges on the same data and seeds.
inline bool run_stability(const AppConfig& cfg, const std::string& out_dir,
                          nlohmann::json* summary_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Workbench w = make_workbench(cfg);
  const int n_seeds = 3;
  const int window = 100;
  const double softrepa_min_ratio = 3.0;
  const double agsm_max_ratio = 1.5;

  nlohmann::json summary;
  summary["experiment"] = "stability";
  summary["thresholds"] = {{"softrepa_final_ratio_gt", softrepa_min_ratio},
                           {"agsm_final_ratio_lt", agsm_max_ratio},
                           {"window", window}};
  bool pass = true;
  for (const char* arm : {"agsm", "softrepa"}) {
    PosttrainConfig pt = config_posttrain(cfg);
    pt.method = parse_method(arm);
    std::vector<double> final_ratios;
    bool arm_ok = true;
    for (int k = 0; k < n_seeds; ++k) {
      std::uint64_t rk = derive_seed(cfg.seed, "replicate", std::uint64_t(k));
      SoftTokenBank bank = init_tokens(cfg.m, cfg.d_s, cfg.token_init_std,
                                       derive_seed(rk, "tokens"), cfg.ema_decay);
      PosttrainResult res;
      try {
        res = posttrain(w.params, std::move(bank), w.sched, w.data, pt, rk);
      } catch (const std::exception& e) {
        summary["arms"][arm]["error"] = e.what();
        arm_ok = false;
        pass = false;
        break;
      }
      std::string tag = std::string(arm) + "-seed" + std::to_string(k);
      write_run_csv(out_dir + "/" + tag + ".csv", res.records);
      auto curve = stability_curve(res.records, window);
      detail::write_stability_csv(out_dir + "/" + tag + "-stability.csv", curve);
      final_ratios.push_back(curve.back().ratio_to_baseline);
    }
    if (!arm_ok) continue;
    bool arm_pass = true;
    for (double r : final_ratios)
      arm_pass &= std::string(arm) == "softrepa" ? r > softrepa_min_ratio
                                                 : r < agsm_max_ratio;
    summary["arms"][arm] = {{"final_ratio", detail::stats_json(final_ratios)},
                            {"pass", arm_pass}};
    pass &= arm_pass;
  }
  summary["pass"] = pass;
  detail::write_summary(out_dir, summary);
  if (summary_out) *summary_out = summary;
  return pass;
}

// Negative-guidance scale sweep with gamma_pos fixed at 1: every run must
// stay finite, and the gamma_neg = 0 arm must land within seed noise of the
// positive-only training strategy.
inline bool run_gamma_sweep(const AppConfig& cfg, const std::string& out_dir,
                            nlohmann::json* summary_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Workbench w = make_workbench(cfg);
  const std::vector<double> gammas = {0.0, 0.05, 0.1, 0.5, 1.0};
  const int n_seeds = 3;

  nlohmann::json summary;
  summary["experiment"] = "gamma-sweep";
  bool all_finite = true;

  auto run_arm = [&](const std::string& tag, const PosttrainConfig& pt) {
    std::vector<double> aligns, energies;
    for (int k = 0; k < n_seeds; ++k) {
      std::uint64_t rk = derive_seed(cfg.seed, "replicate", std::uint64_t(k));
      auto rs = detail::run_and_score(w, pt, rk, SampleStrategy::kPosOnly);
      if (!rs.ok) {
        summary["arms"][tag]["error"] = rs.error;
        all_finite = false;
        return std::vector<double>{};
      }
      write_run_csv(out_dir + "/" + tag + "-seed" + std::to_string(k) + ".csv",
                    rs.result.records);
      aligns.push_back(rs.alignment);
      energies.push_back(rs.energy);
    }
    summary["arms"][tag] = {{"alignment", detail::stats_json(aligns)},
                            {"energy", detail::stats_json(energies)}};
    return aligns;
  };

  std::vector<double> align_gamma0;
  for (double g : gammas) {
    PosttrainConfig pt = config_posttrain(cfg);
    pt.method = Method::kAgsm;
    pt.guidance.gamma_pos = 1.0;
    pt.guidance.gamma_neg = g;
    auto aligns = run_arm("gamma-" + detail::fmt_tag(g), pt);
    if (g == 0.0) align_gamma0 = aligns;
  }
  PosttrainConfig pos_pt = config_posttrain(cfg);
  pos_pt.method = Method::kPositiveOnly;
  pos_pt.guidance.gamma_pos = 1.0;
  pos_pt.guidance.gamma_neg = 0.0;
  std::vector<double> align_pos = run_arm("positive-only", pos_pt);

  bool match = false;
  if (!align_gamma0.empty() && !align_pos.empty()) {
    double diff = std::abs(detail::mean_of(align_gamma0) - detail::mean_of(align_pos));
    double se = std::sqrt(detail::sample_var(align_gamma0) / double(align_gamma0.size()) +
                          detail::sample_var(align_pos) / double(align_pos.size()));
    double tol = std::max(3.0 * se, 0.05);
    match = diff <= tol;
    summary["gamma0_vs_positive_only"] = {
        {"abs_diff", diff}, {"tolerance", tol}, {"pass", match}};
  }
  bool pass = all_finite && match;
  summary["pass"] = pass;
  detail::write_summary(out_dir, summary);
  if (summary_out) *summary_out = summary;
  return pass;
}

// Two-candidate (BT) vs full-row (PL) preference weighting at the same group
// size; reports alignment and energy per arm.
inline bool run_bt_vs_pl(const AppConfig& cfg, const std::string& out_dir,
                         nlohmann::json* summary_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Workbench w = make_workbench(cfg);
  const int n_seeds = 3;

  nlohmann::json summary;
  summary["experiment"] = "bt-vs-pl";
  bool pass = true;
  for (const char* arm : {"bt", "agsm"}) {
    PosttrainConfig pt = config_posttrain(cfg);
    pt.method = parse_method(arm);
    std::vector<double> aligns, energies;
    for (int k = 0; k < n_seeds; ++k) {
      std::uint64_t rk = derive_seed(cfg.seed, "replicate", std::uint64_t(k));
      auto rs = detail::run_and_score(w, pt, rk, SampleStrategy::kPosOnly);
      if (!rs.ok) {
        summary["arms"][arm]["error"] = rs.error;
        pass = false;
        break;
      }
      write_run_csv(out_dir + "/" + std::string(arm) + "-seed" + std::to_string(k) + ".csv",
                    rs.result.records);
      aligns.push_back(rs.alignment);
      energies.push_back(rs.energy);
    }
    if (aligns.size() == std::size_t(n_seeds))
      summary["arms"][arm] = {{"alignment", detail::stats_json(aligns)},
                              {"energy", detail::stats_json(energies)}};
  }
  summary["pass"] = pass;
  detail::write_summary(out_dir, summary);
  if (summary_out) *summary_out = summary;
  return pass;
}

// Table-analog on sampling strategy: dropping the negative tokens at sampling
// time must not hurt alignment (within 0.02 per seed) and must not worsen the
// mean energy distance.
inline bool run_sampling_ablation(const AppConfig& cfg, const std::string& out_dir,
                                  nlohmann::json* summary_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Workbench w = make_workbench(cfg);
  const int n_seeds = 5;
  const double per_seed_slack = 0.02;

  nlohmann::json summary;
  summary["experiment"] = "sampling-ablation";
  summary["thresholds"] = {{"per_seed_alignment_slack", per_seed_slack}};

  std::vector<double> align_pos, align_neg, energy_pos, energy_neg;
  bool ok = true;
  for (int k = 0; k < n_seeds; ++k) {
    std::uint64_t rk = derive_seed(cfg.seed, "replicate", std::uint64_t(k));
    PosttrainConfig pt = config_posttrain(cfg);
    pt.method = Method::kAgsm;
    SoftTokenBank bank = init_tokens(cfg.m, cfg.d_s, cfg.token_init_std,
                                     derive_seed(rk, "tokens"), cfg.ema_decay);
    PosttrainResult res;
    try {
      res = posttrain(w.params, std::move(bank), w.sched, w.data, pt, rk);
    } catch (const std::exception& e) {
      summary["error"] = e.what();
      ok = false;
      break;
    }
    write_run_csv(out_dir + "/agsm-seed" + std::to_string(k) + ".csv", res.records);
    std::uint64_t sample_seed = derive_seed(rk, "sampling");
    for (SampleStrategy strat :
         {SampleStrategy::kPosOnly, SampleStrategy::kPosCondNegUncond}) {
      auto samples = sample_all_conditions(w.params, res.bank, w.sched, cfg.K, cfg.sample_n,
                                           cfg.cfg_scale, strat, sample_seed);
      double a = alignment_accuracy(samples, w.spec);
      double e = mean_energy_to_truth(samples, w.spec, std::max(64, cfg.sample_n / cfg.K),
                                      sample_seed);
      if (strat == SampleStrategy::kPosOnly) {
        align_pos.push_back(a);
        energy_pos.push_back(e);
      } else {
        align_neg.push_back(a);
        energy_neg.push_back(e);
      }
    }
  }
  bool pass = ok;
  if (ok) {
    bool per_seed = true;
    for (int k = 0; k < n_seeds; ++k)
      per_seed &= align_pos[k] >= align_neg[k] - per_seed_slack;
    bool energy_dir = detail::mean_of(energy_pos) <= detail::mean_of(energy_neg);
    pass = per_seed && energy_dir;
    summary["arms"]["pos-only"] = {{"alignment", detail::stats_json(align_pos)},
                                   {"energy", detail::stats_json(energy_pos)}};
    summary["arms"]["pos-cond-neg-uncond"] = {{"alignment", detail::stats_json(align_neg)},
                                              {"energy", detail::stats_json(energy_neg)}};
    summary["per_seed_alignment_pass"] = per_seed;
    summary["mean_energy_pass"] = energy_dir;
  }
  summary["pass"] = pass;
  detail::write_summary(out_dir, summary);
  if (summary_out) *summary_out = summary;
  return pass;
}

// Table-analog on training strategy: positive-only vs one shared token set vs
// the split dual-bank objective.
inline bool run_training_strategy(const AppConfig& cfg, const std::string& out_dir,
                                  nlohmann::json* summary_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Workbench w = make_workbench(cfg);
  const int n_seeds = 3;

  nlohmann::json summary;
  summary["experiment"] = "training-strategy";
  bool pass = true;
  for (const char* arm : {"positive-only", "agsm-shared", "agsm"}) {
    PosttrainConfig pt = config_posttrain(cfg);
    pt.method = parse_method(arm);
    std::vector<double> aligns, energies;
    for (int k = 0; k < n_seeds; ++k) {
      std::uint64_t rk = derive_seed(cfg.seed, "replicate", std::uint64_t(k));
      auto rs = detail::run_and_score(w, pt, rk, SampleStrategy::kPosOnly);
      if (!rs.ok) {
        summary["arms"][arm]["error"] = rs.error;
        pass = false;
        break;
      }
      write_run_csv(out_dir + "/" + std::string(arm) + "-seed" + std::to_string(k) + ".csv",
                    rs.result.records);
      aligns.push_back(rs.alignment);
      energies.push_back(rs.energy);
    }
    if (aligns.size() == std::size_t(n_seeds))
      summary["arms"][arm] = {{"alignment", detail::stats_json(aligns)},
                              {"energy", detail::stats_json(energies)}};
  }
  summary["pass"] = pass;
  detail::write_summary(out_dir, summary);
  if (summary_out) *summary_out = summary;
  return pass;
}

// Group-size sweep: more in-group negatives per positive.
inline bool run_batch_size(const AppConfig& cfg, const std::string& out_dir,
                           nlohmann::json* summary_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Workbench w = make_workbench(cfg);
  const std::vector<int> group_sizes = {2, 4, 8};
  const int n_seeds = 2;

  nlohmann::json summary;
  summary["experiment"] = "batch-size";
  bool pass = true;
  for (int G : group_sizes) {
    PosttrainConfig pt = config_posttrain(cfg);
    pt.method = Method::kAgsm;
    pt.group_size = G;
    std::string tag = "group-" + std::to_string(G);
    std::vector<double> aligns, energies;
    for (int k = 0; k < n_seeds; ++k) {
      std::uint64_t rk = derive_seed(cfg.seed, "replicate", std::uint64_t(k));
      auto rs = detail::run_and_score(w, pt, rk, SampleStrategy::kPosOnly);
      if (!rs.ok) {
        summary["arms"][tag]["error"] = rs.error;
        pass = false;
        break;
      }
      write_run_csv(out_dir + "/" + tag + "-seed" + std::to_string(k) + ".csv",
                    rs.result.records);
      aligns.push_back(rs.alignment);
      energies.push_back(rs.energy);
    }
    if (aligns.size() == std::size_t(n_seeds))
      summary["arms"][tag] = {{"alignment", detail::stats_json(aligns)},
                              {"energy", detail::stats_json(energies)}};
  }
  summary["pass"] = pass;
  detail::write_summary(out_dir, summary);
  if (summary_out) *summary_out = summary;
  return pass;
}

// Alignment-gain study: post-trained tokens with the default sampling rule
// against the bare frozen backbone, common sampling noise per seed.
struct AlignmentGainResult {
  std::vector<double> baseline, tuned, margin;
  bool pass = false;
};

inline AlignmentGainResult run_alignment_gain(const AppConfig& cfg, int n_seeds = 5,
                                              double min_mean_gain = 0.05) {
  Workbench w = make_workbench(cfg);
  AlignmentGainResult out;
  for (int k = 0; k < n_seeds; ++k) {
    std::uint64_t rk = derive_seed(cfg.seed, "replicate", std::uint64_t(k));
    PosttrainConfig pt = config_posttrain(cfg);
    pt.method = Method::kAgsm;
    SoftTokenBank bank = init_tokens(cfg.m, cfg.d_s, cfg.token_init_std,
                                     derive_seed(rk, "tokens"), cfg.ema_decay);
    PosttrainResult res = posttrain(w.params, bank, w.sched, w.data, pt, rk);
    std::uint64_t sample_seed = derive_seed(rk, "sampling");
    auto tuned = sample_all_conditions(w.params, res.bank, w.sched, cfg.K, cfg.sample_n,
                                       cfg.cfg_scale, SampleStrategy::kPosOnly, sample_seed);
    auto base = sample_all_conditions(w.params, bank, w.sched, cfg.K, cfg.sample_n,
                                      cfg.cfg_scale, SampleStrategy::kNoTokens, sample_seed);
    out.tuned.push_back(alignment_accuracy(tuned, w.spec));
    out.baseline.push_back(alignment_accuracy(base, w.spec));
    out.margin.push_back(out.tuned.back() - out.baseline.back());
  }
  int wins = 0;
  for (double m : out.margin) wins += m > 0.0 ? 1 : 0;
  out.pass = wins >= n_seeds - 1 && detail::mean_of(out.margin) >= min_mean_gain;
  return out;
}

// Dispatch by experiment name; returns process-style exit code (0 = all
// declared thresholds passed).
inline int run_experiment(const std::string& name, const AppConfig& cfg,
                          const std::string& out_dir) {
  bool pass = false;
  if (name == "stability") pass = run_stability(cfg, out_dir);
  else if (name == "gamma-sweep") pass = run_gamma_sweep(cfg, out_dir);
  else if (name == "bt-vs-pl") pass = run_bt_vs_pl(cfg, out_dir);
  else if (name == "sampling-ablation") pass = run_sampling_ablation(cfg, out_dir);
  else if (name == "training-strategy") pass = run_training_strategy(cfg, out_dir);
  else if (name == "batch-size") pass = run_batch_size(cfg, out_dir);
  else throw std::invalid_argument("unknown experiment: " + name);
  return pass ? 0 : 1;
}

}  // namespace agsm
