#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "agsm/agsm.hpp"
#include "agsm/baselines.hpp"
#include "agsm/data.hpp"
#include "agsm/flow.hpp"
#include "agsm/optimizer.hpp"
#include "agsm/runlog.hpp"

namespace agsm {

// kAgsmShared is the single-token-set ablation: one matrix serves both the
// positive and negative slots and receives both gradients.
enum class Method { kAgsm, kBt, kSoftrepa, kPositiveOnly, kAgsmShared };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kAgsm: return "agsm";
    case Method::kBt: return "bt";
    case Method::kSoftrepa: return "softrepa";
    case Method::kPositiveOnly: return "positive-only";
    case Method::kAgsmShared: return "agsm-shared";
  }
  return "?";
}

inline Method parse_method(const std::string& name) {
  if (name == "agsm") return Method::kAgsm;
  if (name == "bt") return Method::kBt;
  if (name == "softrepa") return Method::kSoftrepa;
  if (name == "positive-only") return Method::kPositiveOnly;
  if (name == "agsm-shared") return Method::kAgsmShared;
  throw std::invalid_argument("unknown post-training method: " + name);
}

struct PosttrainConfig {
  Method method = Method::kAgsm;
  int steps = 5000;
  int group_size = 4;      // 1 positive : group_size-1 negatives per pair
  int groups_per_step = 4; // group_size * groups_per_step pairs per step
  double lr = 2e-2;
  double weight_decay = 1e-4;
  long cosine_period = 500;
  GuidanceConfig guidance{};
  SoftrepaConfig softrepa{};
  int val_every = 0;  // 0 disables the validation hook
  std::function<double(const SoftTokenBank&)> validate;
};

struct PosttrainResult {
  SoftTokenBank bank;
  std::vector<RunRecord> records;
};

namespace detail {

inline Eigen::VectorXd flat(const Eigen::MatrixXd& M) {
  return Eigen::Map<const Eigen::VectorXd>(M.data(), M.size());
}

inline void unflat(Eigen::MatrixXd& M, const Eigen::VectorXd& v) {
  Eigen::Map<Eigen::VectorXd>(M.data(), M.size()) = v;
}

inline void validate_posttrain(const PosttrainConfig& cfg) {
  if (cfg.steps < 0 || cfg.group_size < 1 || cfg.groups_per_step < 1 ||
      !(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0))
    throw std::invalid_argument("bad post-training configuration");
  validate(cfg.guidance);
  if (cfg.method == Method::kSoftrepa) validate(cfg.softrepa);
}

}  // namespace detail

// Frozen-backbone post-training over soft tokens: per step, average the group
// loss gradient over groups_per_step fresh groups, take one optimizer step,
// then shift the EMA shadows. Only tokens move; params are read-only.
inline PosttrainResult posttrain(const DenoiserParams& params, SoftTokenBank bank,
                                 const NoiseSchedule& sched,
                                 const std::vector<LabeledPoint>& data,
                                 const PosttrainConfig& cfg, std::uint64_t seed) {
  detail::validate_posttrain(cfg);
  auto rng = substream(seed, "posttrain");
  const bool is_shared = cfg.method == Method::kAgsmShared;
  const bool is_softrepa = cfg.method == Method::kSoftrepa;
  if (is_shared) {
    bank.psi_neg = bank.psi_pos;
    bank.ema_pos = bank.psi_pos;
    bank.ema_neg = bank.psi_pos;
  }

  AdamW opt_pos, opt_neg;
  opt_pos.lr = opt_neg.lr = cfg.lr;
  opt_pos.weight_decay = opt_neg.weight_decay = cfg.weight_decay;
  CosineRestarts lr_sched{cfg.cosine_period, 1};

  Eigen::VectorXd theta_pos = detail::flat(bank.psi_pos);
  Eigen::VectorXd theta_neg = detail::flat(bank.psi_neg);

  std::vector<RunRecord> records;
  records.reserve(std::size_t(cfg.steps));
  double last_val = std::numeric_limits<double>::quiet_NaN();

  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::MatrixXd gpos = Eigen::MatrixXd::Zero(bank.psi_pos.rows(), bank.psi_pos.cols());
    Eigen::MatrixXd gneg = gpos;
    RunRecord rec;
    rec.step = step;
    for (int g = 0; g < cfg.groups_per_step; ++g) {
      GroupBatch batch =
          build_group(draw_group_pairs(data, cfg.group_size, rng), sched, rng);
      if (is_softrepa) {
        SoftrepaLossResult r =
            softrepa_group_loss(params, bank.psi_pos, sched, batch, cfg.softrepa);
        gpos += r.grad;
        rec.pos_loss += r.pos_denoise;
        rec.neg_loss += r.neg_denoise;
        rec.pl_entropy += r.mean_entropy;
        continue;
      }
      GroupLossResult r;
      switch (cfg.method) {
        case Method::kBt:
          r = bt_group_loss(params, bank, sched, batch, cfg.guidance, rng);
          break;
        case Method::kPositiveOnly:
          r = positive_only_loss(params, bank, sched, batch, cfg.guidance);
          break;
        default:
          r = agsm_group_loss(params, bank, sched, batch, cfg.guidance);
          break;
      }
      gpos += r.grad_pos;
      gneg += r.grad_neg;
      rec.pos_loss += r.pos_denoise;
      rec.neg_loss += r.neg_denoise;
      rec.delta_norm += r.mean_delta_norm;
      rec.pl_entropy += r.mean_pl_entropy;
    }
    const double inv = 1.0 / double(cfg.groups_per_step);
    gpos *= inv;
    gneg *= inv;
    rec.pos_loss *= inv;
    rec.neg_loss *= inv;
    rec.delta_norm *= inv;
    rec.pl_entropy *= inv;

    const double f = lr_sched.factor(step);
    if (is_softrepa) {
      opt_pos.step(theta_pos, detail::flat(gpos), f);
      detail::unflat(bank.psi_pos, theta_pos);
    } else if (is_shared) {
      opt_pos.step(theta_pos, detail::flat((gpos + gneg).eval()), f);
      detail::unflat(bank.psi_pos, theta_pos);
      bank.psi_neg = bank.psi_pos;
      ema_update(bank, Polarity::kPos);
      ema_update(bank, Polarity::kNeg);
    } else {
      opt_pos.step(theta_pos, detail::flat(gpos), f);
      detail::unflat(bank.psi_pos, theta_pos);
      if (cfg.method != Method::kPositiveOnly) {
        opt_neg.step(theta_neg, detail::flat(gneg), f);
        detail::unflat(bank.psi_neg, theta_neg);
      }
      ema_update(bank, Polarity::kPos);
      ema_update(bank, Polarity::kNeg);
    }

    if (cfg.validate && cfg.val_every > 0 && (step + 1) % cfg.val_every == 0)
      last_val = cfg.validate(bank);
    rec.val_alignment = last_val;
    records.push_back(rec);
  }
  return {std::move(bank), std::move(records)};
}

// Velocity-space variant: identical loop over flow group batches.
inline PosttrainResult posttrain_flow(const DenoiserParams& params, SoftTokenBank bank,
                                      const FlowConfig& fcfg,
                                      const std::vector<LabeledPoint>& data,
                                      const PosttrainConfig& cfg, std::uint64_t seed) {
  if (cfg.method != Method::kAgsm)
    throw std::invalid_argument("flow post-training supports only the agsm method");
  detail::validate_posttrain(cfg);
  validate(fcfg);
  auto rng = substream(seed, "posttrain-flow");

  AdamW opt_pos, opt_neg;
  opt_pos.lr = opt_neg.lr = cfg.lr;
  opt_pos.weight_decay = opt_neg.weight_decay = cfg.weight_decay;
  CosineRestarts lr_sched{cfg.cosine_period, 1};

  Eigen::VectorXd theta_pos = detail::flat(bank.psi_pos);
  Eigen::VectorXd theta_neg = detail::flat(bank.psi_neg);

  std::vector<RunRecord> records;
  records.reserve(std::size_t(cfg.steps));
  double last_val = std::numeric_limits<double>::quiet_NaN();

  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::MatrixXd gpos = Eigen::MatrixXd::Zero(bank.psi_pos.rows(), bank.psi_pos.cols());
    Eigen::MatrixXd gneg = gpos;
    RunRecord rec;
    rec.step = step;
    for (int g = 0; g < cfg.groups_per_step; ++g) {
      FlowGroupBatch batch =
          build_flow_group(draw_group_pairs(data, cfg.group_size, rng), fcfg, rng);
      GroupLossResult r = flow_agsm_group_loss(params, bank, fcfg, batch, cfg.guidance);
      gpos += r.grad_pos;
      gneg += r.grad_neg;
      rec.pos_loss += r.pos_denoise;
      rec.neg_loss += r.neg_denoise;
      rec.delta_norm += r.mean_delta_norm;
      rec.pl_entropy += r.mean_pl_entropy;
    }
    const double inv = 1.0 / double(cfg.groups_per_step);
    gpos *= inv;
    gneg *= inv;
    rec.pos_loss *= inv;
    rec.neg_loss *= inv;
    rec.delta_norm *= inv;
    rec.pl_entropy *= inv;

    const double f = lr_sched.factor(step);
    opt_pos.step(theta_pos, detail::flat(gpos), f);
    opt_neg.step(theta_neg, detail::flat(gneg), f);
    detail::unflat(bank.psi_pos, theta_pos);
    detail::unflat(bank.psi_neg, theta_neg);
    ema_update(bank, Polarity::kPos);
    ema_update(bank, Polarity::kNeg);

    if (cfg.validate && cfg.val_every > 0 && (step + 1) % cfg.val_every == 0)
      last_val = cfg.validate(bank);
    rec.val_alignment = last_val;
    records.push_back(rec);
  }
  return {std::move(bank), std::move(records)};
}

}  // namespace agsm
