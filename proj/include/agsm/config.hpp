#pragma once

#include <fstream>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "agsm/data.hpp"
#include "agsm/denoiser.hpp"
#include "agsm/flow.hpp"
#include "agsm/sampling.hpp"
#include "agsm/schedule.hpp"
#include "agsm/train.hpp"

namespace agsm {

// Whole-run configuration. JSON layout: a top-level "seed" plus the sections
// schedule / model / tokens / guidance / data / train / sample; unknown keys
// anywhere are errors so sweep typos fail loudly instead of silently running
// defaults.
struct AppConfig {
  std::uint64_t seed = 0;

  // schedule
  int T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  bool calibrate = true;

  // model
  std::string kind = "diffusion";  // or "flow"
  int d = 2, d_t = 8, d_e = 8, hidden = 128, layers = 3;
  double flow_delta = 0.01;
  double flow_sigma2 = 1.0;

  // tokens
  int m = 4, d_s = 8;
  double token_init_std = 0.3;
  double ema_decay = 0.999;

  // guidance
  GuidanceConfig guidance{};
  double softrepa_tau = 1.0;
  bool softrepa_double_exp = false;

  // data
  int K = 8;
  double ring_radius = 4.0;
  double mode_std = 0.3;
  int n_train = 4096;

  // train
  int pretrain_steps = 4000;
  int pretrain_batch = 128;
  double pretrain_lr = 1e-3;
  double p_uncond = 0.1;
  int posttrain_steps = 5000;
  double posttrain_lr = 2e-2;
  int group_size = 4;
  int groups_per_step = 4;
  double weight_decay = 1e-4;
  long cosine_period = 500;
  std::string method = "agsm";
  int val_every = 0;

  // sample
  int sample_n = 512;
  double cfg_scale = 3.0;
  std::string strategy = "pos-only";
  int flow_steps = 100;
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw std::runtime_error("config section is not an object: " + section);
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw std::runtime_error("unknown config key: " +
                               (section.empty() ? it.key() : section + "." + it.key()));
  }
}

template <class T>
void fetch(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

inline AppConfig parse_config(const nlohmann::json& j) {
  detail::check_keys(j, "", {"seed", "schedule", "model", "tokens", "guidance", "data",
                             "train", "sample"});
  AppConfig c;
  detail::fetch(j, "seed", c.seed);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    detail::check_keys(s, "schedule", {"T", "beta_min", "beta_max", "calibrate"});
    detail::fetch(s, "T", c.T);
    detail::fetch(s, "beta_min", c.beta_min);
    detail::fetch(s, "beta_max", c.beta_max);
    detail::fetch(s, "calibrate", c.calibrate);
  }
  if (j.contains("model")) {
    const auto& s = j.at("model");
    detail::check_keys(s, "model",
                       {"kind", "d", "d_t", "d_e", "hidden", "layers", "flow_delta",
                        "flow_sigma2"});
    detail::fetch(s, "kind", c.kind);
    if (c.kind != "diffusion" && c.kind != "flow")
      throw std::runtime_error("model.kind must be diffusion or flow");
    detail::fetch(s, "d", c.d);
    detail::fetch(s, "d_t", c.d_t);
    detail::fetch(s, "d_e", c.d_e);
    detail::fetch(s, "hidden", c.hidden);
    detail::fetch(s, "layers", c.layers);
    detail::fetch(s, "flow_delta", c.flow_delta);
    detail::fetch(s, "flow_sigma2", c.flow_sigma2);
  }
  if (j.contains("tokens")) {
    const auto& s = j.at("tokens");
    detail::check_keys(s, "tokens", {"m", "d_s", "init_std", "ema_decay"});
    detail::fetch(s, "m", c.m);
    detail::fetch(s, "d_s", c.d_s);
    detail::fetch(s, "init_std", c.token_init_std);
    detail::fetch(s, "ema_decay", c.ema_decay);
  }
  if (j.contains("guidance")) {
    const auto& s = j.at("guidance");
    detail::check_keys(s, "guidance",
                       {"gamma_pos", "gamma_neg", "pl_temperature", "softrepa_tau",
                        "softrepa_double_exp"});
    detail::fetch(s, "gamma_pos", c.guidance.gamma_pos);
    detail::fetch(s, "gamma_neg", c.guidance.gamma_neg);
    detail::fetch(s, "pl_temperature", c.guidance.pl_temperature);
    detail::fetch(s, "softrepa_tau", c.softrepa_tau);
    detail::fetch(s, "softrepa_double_exp", c.softrepa_double_exp);
  }
  if (j.contains("data")) {
    const auto& s = j.at("data");
    detail::check_keys(s, "data", {"K", "radius", "mode_std", "n_train"});
    detail::fetch(s, "K", c.K);
    detail::fetch(s, "radius", c.ring_radius);
    detail::fetch(s, "mode_std", c.mode_std);
    detail::fetch(s, "n_train", c.n_train);
  }
  if (j.contains("train")) {
    const auto& s = j.at("train");
    detail::check_keys(s, "train",
                       {"pretrain_steps", "pretrain_batch", "pretrain_lr", "p_uncond",
                        "posttrain_steps", "posttrain_lr", "group_size", "groups_per_step",
                        "weight_decay", "cosine_period", "method", "val_every"});
    detail::fetch(s, "pretrain_steps", c.pretrain_steps);
    detail::fetch(s, "pretrain_batch", c.pretrain_batch);
    detail::fetch(s, "pretrain_lr", c.pretrain_lr);
    detail::fetch(s, "p_uncond", c.p_uncond);
    detail::fetch(s, "posttrain_steps", c.posttrain_steps);
    detail::fetch(s, "posttrain_lr", c.posttrain_lr);
    detail::fetch(s, "group_size", c.group_size);
    detail::fetch(s, "groups_per_step", c.groups_per_step);
    detail::fetch(s, "weight_decay", c.weight_decay);
    detail::fetch(s, "cosine_period", c.cosine_period);
    detail::fetch(s, "method", c.method);
    parse_method(c.method);  // reject unknown names at parse time
    detail::fetch(s, "val_every", c.val_every);
  }
  if (j.contains("sample")) {
    const auto& s = j.at("sample");
    detail::check_keys(s, "sample", {"n", "scale", "strategy", "flow_steps"});
    detail::fetch(s, "n", c.sample_n);
    detail::fetch(s, "scale", c.cfg_scale);
    detail::fetch(s, "strategy", c.strategy);
    parse_strategy(c.strategy);
    detail::fetch(s, "flow_steps", c.flow_steps);
  }
  return c;
}

inline nlohmann::json config_to_json(const AppConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["schedule"] = {{"T", c.T},
                   {"beta_min", c.beta_min},
                   {"beta_max", c.beta_max},
                   {"calibrate", c.calibrate}};
  j["model"] = {{"kind", c.kind},     {"d", c.d},
                {"d_t", c.d_t},       {"d_e", c.d_e},
                {"hidden", c.hidden}, {"layers", c.layers},
                {"flow_delta", c.flow_delta}, {"flow_sigma2", c.flow_sigma2}};
  j["tokens"] = {{"m", c.m},
                 {"d_s", c.d_s},
                 {"init_std", c.token_init_std},
                 {"ema_decay", c.ema_decay}};
  j["guidance"] = {{"gamma_pos", c.guidance.gamma_pos},
                   {"gamma_neg", c.guidance.gamma_neg},
                   {"pl_temperature", c.guidance.pl_temperature},
                   {"softrepa_tau", c.softrepa_tau},
                   {"softrepa_double_exp", c.softrepa_double_exp}};
  j["data"] = {{"K", c.K},
               {"radius", c.ring_radius},
               {"mode_std", c.mode_std},
               {"n_train", c.n_train}};
  j["train"] = {{"pretrain_steps", c.pretrain_steps},
                {"pretrain_batch", c.pretrain_batch},
                {"pretrain_lr", c.pretrain_lr},
                {"p_uncond", c.p_uncond},
                {"posttrain_steps", c.posttrain_steps},
                {"posttrain_lr", c.posttrain_lr},
                {"group_size", c.group_size},
                {"groups_per_step", c.groups_per_step},
                {"weight_decay", c.weight_decay},
                {"cosine_period", c.cosine_period},
                {"method", c.method},
                {"val_every", c.val_every}};
  j["sample"] = {{"n", c.sample_n},
                 {"scale", c.cfg_scale},
                 {"strategy", c.strategy},
                 {"flow_steps", c.flow_steps}};
  return j;
}

inline AppConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  f >> j;
  return parse_config(j);
}

inline void save_config(const std::string& path, const AppConfig& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << config_to_json(c).dump(2) << "\n";
}

// Derived objects.
inline Dims config_dims(const AppConfig& c) {
  Dims dm;
  dm.d = c.d;
  dm.d_t = c.d_t;
  dm.d_e = c.d_e;
  dm.d_s = c.d_s;
  dm.m = c.m;
  dm.K = c.K;
  dm.hidden = c.hidden;
  dm.layers = c.layers;
  return dm;
}

inline MixtureSpec config_spec(const AppConfig& c) {
  return ring_spec(c.K, c.d, c.ring_radius, c.mode_std);
}

inline NoiseSchedule config_schedule(const AppConfig& c) {
  return build_schedule(c.T, c.beta_min, c.beta_max, c.calibrate);
}

inline FlowConfig config_flow(const AppConfig& c) {
  return calibrated_flow_config(c.flow_delta, c.flow_sigma2);
}

inline PretrainConfig config_pretrain(const AppConfig& c) {
  PretrainConfig p;
  p.steps = c.pretrain_steps;
  p.batch = c.pretrain_batch;
  p.lr = c.pretrain_lr;
  p.p_uncond = c.p_uncond;
  return p;
}

inline PosttrainConfig config_posttrain(const AppConfig& c) {
  PosttrainConfig p;
  p.method = parse_method(c.method);
  p.steps = c.posttrain_steps;
  p.group_size = c.group_size;
  p.groups_per_step = c.groups_per_step;
  p.lr = c.posttrain_lr;
  p.weight_decay = c.weight_decay;
  p.cosine_period = c.cosine_period;
  p.guidance = c.guidance;
  p.softrepa.tau = c.softrepa_tau;
  p.softrepa.literal_double_exp = c.softrepa_double_exp;
  p.val_every = c.val_every;
  return p;
}

}  // namespace agsm
