#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "agsm/checkpoint.hpp"
#include "agsm/config.hpp"
#include "agsm/runlog.hpp"

using namespace agsm;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("config serialization is a fixed point", "[io]") {
  nlohmann::json j = {{"seed", 42},
                      {"schedule", {{"T", 64}, {"beta_max", 0.015}}},
                      {"guidance", {{"gamma_neg", 0.5}}},
                      {"data", {{"K", 4}}}};
  AppConfig c = parse_config(j);
  REQUIRE(c.seed == 42);
  REQUIRE(c.T == 64);
  REQUIRE(c.beta_max == 0.015);
  REQUIRE(c.beta_min == 1e-4);  // untouched default
  REQUIRE(c.guidance.gamma_neg == 0.5);
  REQUIRE(c.K == 4);

  std::string once = config_to_json(c).dump(2);
  std::string twice = config_to_json(parse_config(nlohmann::json::parse(once))).dump(2);
  REQUIRE(once == twice);
}

TEST_CASE("unknown config keys are rejected", "[io]") {
  REQUIRE_THROWS_WITH(parse_config({{"sede", 1}}),
                      Catch::Matchers::ContainsSubstring("sede"));
  REQUIRE_THROWS_WITH(parse_config({{"schedule", {{"beta_mn", 0.1}}}}),
                      Catch::Matchers::ContainsSubstring("schedule.beta_mn"));
  REQUIRE_THROWS_WITH(parse_config({{"train", {{"method", "softrpa"}}}}),
                      Catch::Matchers::ContainsSubstring("softrpa"));
  REQUIRE_THROWS_WITH(parse_config({{"sample", {{"strategy", "pos"}}}}),
                      Catch::Matchers::ContainsSubstring("pos"));
  REQUIRE_THROWS_WITH(parse_config({{"model", {{"kind", "vae"}}}}),
                      Catch::Matchers::ContainsSubstring("kind"));
}

TEST_CASE("run CSV round trip", "[io]") {
  std::vector<RunRecord> recs(3);
  recs[0] = {0, 1.25, 2.5, 0.1, 1.386, std::numeric_limits<double>::quiet_NaN()};
  recs[1] = {1, 1.0 / 3.0, 0.7071067811865476, 1e-300, 0.0, 0.5};
  recs[2] = {2, -0.0, 5e17, 3.3, 1.1, 0.75};
  std::string path = tmp_path("agsm-test-run.csv");
  write_run_csv(path, recs);
  auto back = read_run_csv(path);
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(back[i].step == recs[i].step);
    REQUIRE(back[i].pos_loss == recs[i].pos_loss);
    REQUIRE(back[i].neg_loss == recs[i].neg_loss);
    REQUIRE(back[i].delta_norm == recs[i].delta_norm);
    REQUIRE(back[i].pl_entropy == recs[i].pl_entropy);
  }
  REQUIRE(std::isnan(back[0].val_alignment));
  REQUIRE(back[1].val_alignment == 0.5);

  write_run_csv(path + ".2", back);
  REQUIRE(slurp(path) == slurp(path + ".2"));
  REQUIRE(slurp(path).rfind("step,pos_loss,neg_loss,delta_norm,pl_entropy,val_alignment\n",
                            0) == 0);
  std::remove(path.c_str());
  std::remove((path + ".2").c_str());
}

TEST_CASE("samples CSV round trip", "[io]") {
  std::vector<LabeledPoint> samples;
  auto rng = substream(3, "io");
  for (int i = 0; i < 5; ++i) samples.emplace_back(normal_vector(rng, 3), i % 2);
  std::string path = tmp_path("agsm-test-samples.csv");
  write_samples_csv(path, samples);
  auto back = read_samples_csv(path);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    REQUIRE(back[i].second == samples[i].second);
    REQUIRE((back[i].first - samples[i].first).norm() == 0.0);
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoint round trip is bitwise", "[io]") {
  Dims dm;
  dm.d = 2;
  dm.d_t = 4;
  dm.d_e = 3;
  dm.d_s = 2;
  dm.m = 3;
  dm.K = 5;
  dm.hidden = 8;
  dm.layers = 2;
  Checkpoint ck;
  ck.kind = "diffusion";
  ck.params = init_denoiser(dm, 17);
  ck.bank = init_tokens(dm.m, dm.d_s, 0.4, 18, 0.99);
  auto rng = substream(19, "ema");
  ck.bank.ema_pos += normal_matrix(rng, dm.m, dm.d_s, 0.2);
  ck.sched = build_schedule(32, 1e-4, 0.02);

  std::string path = tmp_path("agsm-test.ckpt");
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);

  REQUIRE(back.kind == "diffusion");
  REQUIRE(back.params.dims.hidden == 8);
  REQUIRE((pack_params(back.params) - pack_params(ck.params)).norm() == 0.0);
  REQUIRE((back.bank.psi_pos - ck.bank.psi_pos).norm() == 0.0);
  REQUIRE((back.bank.psi_neg - ck.bank.psi_neg).norm() == 0.0);
  REQUIRE((back.bank.ema_pos - ck.bank.ema_pos).norm() == 0.0);
  REQUIRE((back.bank.ema_neg - ck.bank.ema_neg).norm() == 0.0);
  REQUIRE(back.bank.ema_decay == 0.99);
  REQUIRE(back.sched.T == 32);
  REQUIRE(back.sched.beta[32] == ck.sched.beta[32]);
  REQUIRE(back.sched.A_tilde[7] == ck.sched.A_tilde[7]);

  // Save-load-save reproduces the file byte for byte.
  save_checkpoint(path + ".2", back);
  REQUIRE(slurp(path) == slurp(path + ".2"));
  std::remove(path.c_str());
  std::remove((path + ".2").c_str());
}

TEST_CASE("flow checkpoints carry the flow constants", "[io]") {
  Dims dm;
  dm.d = 1;
  dm.d_t = 4;
  dm.d_e = 3;
  dm.d_s = 2;
  dm.m = 2;
  dm.K = 3;
  dm.hidden = 6;
  dm.layers = 2;
  Checkpoint ck;
  ck.kind = "flow";
  ck.params = init_denoiser(dm, 21);
  ck.bank = init_tokens(dm.m, dm.d_s, 0.3, 22);
  ck.flow = calibrated_flow_config(0.05, 2.0);

  std::string path = tmp_path("agsm-test-flow.ckpt");
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  REQUIRE(back.kind == "flow");
  REQUIRE(back.flow.delta_step == 0.05);
  REQUIRE(back.flow.sigma2 == 2.0);
  REQUIRE(back.flow.lambda == ck.flow.lambda);
  REQUIRE(back.flow.B == 1.0);
  REQUIRE((pack_params(back.params) - pack_params(ck.params)).norm() == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are refused", "[io]") {
  std::string path = tmp_path("agsm-test-bad.ckpt");
  {
    std::ofstream f(path, std::ios::binary);
    f << "MSGA???";
  }
  REQUIRE_THROWS_WITH(load_checkpoint(path),
                      Catch::Matchers::ContainsSubstring("not a checkpoint"));
  {
    std::ofstream f(path, std::ios::binary);
    f << "AGSM";
    std::uint32_t bad_version = 999;
    f.write(reinterpret_cast<const char*>(&bad_version), sizeof bad_version);
  }
  REQUIRE_THROWS_WITH(load_checkpoint(path),
                      Catch::Matchers::ContainsSubstring("version"));
  REQUIRE_THROWS_AS(load_checkpoint(tmp_path("agsm-does-not-exist.ckpt")),
                    std::runtime_error);
  std::remove(path.c_str());
}
