#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "agsm/checkpoint.hpp"
#include "agsm/config.hpp"
#include "agsm/eval.hpp"
#include "agsm/experiments.hpp"
#include "agsm/runlog.hpp"
#include "agsm/sampling.hpp"
#include "agsm/train.hpp"

namespace {

// Relative output paths land under AGSM_OUT_ROOT when it is set.
std::string resolve_out(const std::string& path) {
  const char* root = std::getenv("AGSM_OUT_ROOT");
  if (!root || *root == '\0' || std::filesystem::path(path).is_absolute()) return path;
  std::filesystem::create_directories(root);
  return (std::filesystem::path(root) / path).string();
}

int cmd_pretrain(const std::string& config_path, const std::string& out_path) {
  agsm::AppConfig cfg = agsm::load_config(config_path);
  agsm::MixtureSpec spec = agsm::config_spec(cfg);
  auto data = agsm::sample_pairs(spec, cfg.n_train, cfg.seed);
  agsm::Dims dims = agsm::config_dims(cfg);
  agsm::PretrainConfig pre = agsm::config_pretrain(cfg);

  agsm::Checkpoint ck;
  ck.kind = cfg.kind;
  if (cfg.kind == "flow") {
    auto res = agsm::pretrain_flow_backbone(data, dims, pre, cfg.seed);
    ck.params = std::move(res.params);
    ck.flow = agsm::config_flow(cfg);
    std::cout << "held-out velocity loss " << res.heldout_loss_init << " -> "
              << res.heldout_loss_final << "\n";
  } else {
    ck.sched = agsm::config_schedule(cfg);
    auto res = agsm::pretrain_backbone(data, ck.sched, dims, pre, cfg.seed);
    ck.params = std::move(res.params);
    std::cout << "held-out denoising loss " << res.heldout_loss_init << " -> "
              << res.heldout_loss_final << "\n";
  }
  ck.bank = agsm::init_tokens(cfg.m, cfg.d_s, cfg.token_init_std,
                              agsm::derive_seed(cfg.seed, "tokens"), cfg.ema_decay);
  std::string out = resolve_out(out_path);
  agsm::save_checkpoint(out, ck);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_posttrain(const std::string& config_path, const std::string& ckpt_path,
                  const std::string& method, std::uint64_t seed, const std::string& out_path,
                  const std::string& log_path) {
  agsm::AppConfig cfg = agsm::load_config(config_path);
  agsm::Checkpoint ck = agsm::load_checkpoint(ckpt_path);
  agsm::PosttrainConfig pt = agsm::config_posttrain(cfg);
  if (!method.empty()) pt.method = agsm::parse_method(method);

  auto data = agsm::sample_pairs(agsm::config_spec(cfg), cfg.n_train, cfg.seed);
  agsm::PosttrainResult res =
      ck.kind == "flow"
          ? agsm::posttrain_flow(ck.params, ck.bank, ck.flow, data, pt, seed)
          : agsm::posttrain(ck.params, ck.bank, ck.sched, data, pt, seed);
  ck.bank = std::move(res.bank);

  std::string out = resolve_out(out_path);
  agsm::save_checkpoint(out, ck);
  std::string log = resolve_out(log_path);
  agsm::write_run_csv(log, res.records);
  std::cout << "wrote " << out << " and " << log << "\n";
  return 0;
}

int cmd_sample(const std::string& ckpt_path, int condition, int n, double scale,
               const std::string& strategy, int steps, std::uint64_t seed,
               const std::string& out_path) {
  agsm::Checkpoint ck = agsm::load_checkpoint(ckpt_path);
  agsm::SampleStrategy strat = agsm::parse_strategy(strategy);
  std::vector<Eigen::VectorXd> xs =
      ck.kind == "flow"
          ? agsm::flow_sample(ck.params, ck.bank, condition, n, steps, scale, strat, seed)
          : agsm::ddpm_sample(ck.params, ck.bank, ck.sched, condition, n, scale, strat, seed);
  std::vector<agsm::LabeledPoint> rows;
  rows.reserve(xs.size());
  for (auto& x : xs) rows.emplace_back(std::move(x), condition);
  std::string out = resolve_out(out_path);
  agsm::write_samples_csv(out, rows);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& samples_path, const std::string& config_path,
             const std::string& out_path) {
  agsm::AppConfig cfg = agsm::load_config(config_path);
  agsm::MixtureSpec spec = agsm::config_spec(cfg);
  auto samples = agsm::read_samples_csv(samples_path);

  nlohmann::json metrics;
  metrics["alignment_accuracy"] = agsm::alignment_accuracy(samples, spec);
  nlohmann::json per_cond;
  double mean_ed = 0.0;
  int used = 0;
  for (int k = 0; k < spec.K; ++k) {
    std::vector<Eigen::VectorXd> gen;
    for (const auto& [x, c] : samples)
      if (c == k) gen.push_back(x);
    if (gen.empty()) continue;
    auto rng = agsm::substream(cfg.seed, "energy-ref", std::uint64_t(k));
    std::vector<Eigen::VectorXd> ref;
    for (int i = 0; i < std::max(64, cfg.sample_n / cfg.K); ++i)
      ref.push_back(spec.mode_center[k] + spec.mode_std * agsm::normal_vector(rng, spec.d));
    double ed = agsm::energy_distance(gen, ref);
    per_cond[std::to_string(k)] = ed;
    mean_ed += ed;
    ++used;
  }
  metrics["energy_distance"] = {{"per_condition", per_cond},
                                {"mean", used ? mean_ed / used : 0.0}};
  std::string dumped = metrics.dump(2);
  std::cout << dumped << "\n";
  if (!out_path.empty()) {
    std::string out = resolve_out(out_path);
    std::ofstream f(out, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + out);
    f << dumped << "\n";
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft-token post-training laboratory for conditional diffusion and flow models"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, out_path, log_path, method, strategy, samples_path;
  std::string experiment_name;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int condition = 0, n = 512, steps = 100;
  double scale = 3.0;

  auto* pre = app.add_subcommand("pretrain", "Train a frozen backbone from a config");
  pre->add_option("--config", config_path, "JSON config path")->required();
  pre->add_option("--out", out_path, "checkpoint output path")->required();

  auto* post = app.add_subcommand("posttrain", "Tune soft tokens on a pretrained checkpoint");
  post->add_option("--config", config_path)->required();
  post->add_option("--checkpoint", ckpt_path)->required();
  post->add_option("--method", method, "agsm | bt | softrepa | positive-only | agsm-shared");
  post->add_option("--seed", seed)->capture_default_str();
  post->add_option("--out", out_path)->required();
  post->add_option("--log", log_path, "run CSV output path")->required();

  auto* smp = app.add_subcommand("sample", "Draw samples from a checkpoint");
  smp->add_option("--checkpoint", ckpt_path)->required();
  smp->add_option("--condition", condition)->required();
  smp->add_option("--n", n)->capture_default_str();
  smp->add_option("--scale", scale)->capture_default_str();
  smp->add_option("--strategy", strategy)->default_val("pos-only");
  smp->add_option("--steps", steps, "integration steps (flow checkpoints)")
      ->capture_default_str();
  smp->add_option("--seed", seed)->capture_default_str();
  smp->add_option("--out", out_path)->required();

  auto* ev = app.add_subcommand("eval", "Score a samples CSV against the data spec");
  ev->add_option("--samples", samples_path)->required();
  ev->add_option("--config", config_path)->required();
  ev->add_option("--out", out_path, "metrics JSON output path");

  auto* exp = app.add_subcommand("experiment", "Run a scripted study");
  exp->add_option("name", experiment_name,
                  "stability | gamma-sweep | bt-vs-pl | sampling-ablation | "
                  "training-strategy | batch-size")
      ->required();
  exp->add_option("--config", config_path)->required();
  exp->add_option("--out", out_path, "report directory");
  exp->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pre) return cmd_pretrain(config_path, out_path);
    if (*post) return cmd_posttrain(config_path, ckpt_path, method, seed, out_path, log_path);
    if (*smp) return cmd_sample(ckpt_path, condition, n, scale, strategy, steps, seed, out_path);
    if (*ev) return cmd_eval(samples_path, config_path, out_path);
    if (*exp) {
      agsm::AppConfig cfg = agsm::load_config(config_path);
      if (seed_given) cfg.seed = seed;
      std::string out = resolve_out(out_path.empty() ? "runs/" + experiment_name : out_path);
      int rc = agsm::run_experiment(experiment_name, cfg, out);
      std::cout << (rc == 0 ? "PASS" : "FAIL") << " " << experiment_name << " -> " << out
                << "/summary.json\n";
      return rc;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
