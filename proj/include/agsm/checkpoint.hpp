#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "agsm/denoiser.hpp"
#include "agsm/flow.hpp"
#include "agsm/schedule.hpp"

namespace agsm {

// Versioned binary snapshot of a trained model: magic + version + model kind,
// the dimension block, schedule betas (diffusion) or flow constants, then
// named double tensors (column-major, fixed-width little-endian fields).
struct Checkpoint {
  std::string kind = "diffusion";  // or "flow"
  DenoiserParams params;
  SoftTokenBank bank;
  NoiseSchedule sched;  // T == 0 for flow checkpoints
  FlowConfig flow;      // meaningful only for kind == "flow"
};

namespace detail {

constexpr char kMagic[4] = {'A', 'G', 'S', 'M'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
void get(std::ifstream& f, T& v) {
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw std::runtime_error("truncated checkpoint");
}

inline void put_tensor(std::ofstream& f, const std::string& name, const Eigen::MatrixXd& M) {
  put(f, std::uint32_t(name.size()));
  f.write(name.data(), std::streamsize(name.size()));
  put(f, std::uint32_t(M.rows()));
  put(f, std::uint32_t(M.cols()));
  f.write(reinterpret_cast<const char*>(M.data()),
          std::streamsize(sizeof(double)) * M.size());
}

inline std::pair<std::string, Eigen::MatrixXd> get_tensor(std::ifstream& f) {
  std::uint32_t len = 0, rows = 0, cols = 0;
  get(f, len);
  std::string name(len, '\0');
  f.read(name.data(), len);
  get(f, rows);
  get(f, cols);
  Eigen::MatrixXd M(rows, cols);
  f.read(reinterpret_cast<char*>(M.data()), std::streamsize(sizeof(double)) * M.size());
  if (!f) throw std::runtime_error("truncated checkpoint tensor: " + name);
  return {name, M};
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(detail::kMagic, 4);
  detail::put(f, detail::kVersion);
  detail::put(f, std::uint8_t(ck.kind == "flow" ? 1 : 0));

  const Dims& dm = ck.params.dims;
  for (int v : {dm.d, dm.d_t, dm.d_e, dm.d_s, dm.m, dm.K, dm.hidden, dm.layers})
    detail::put(f, std::uint32_t(v));

  if (ck.kind == "flow") {
    detail::put(f, std::uint32_t(0));  // no discrete schedule
    detail::put(f, std::uint8_t(0));
    detail::put(f, ck.flow.delta_step);
    detail::put(f, ck.flow.sigma2);
    detail::put(f, ck.flow.lambda);
    detail::put(f, ck.flow.B);
  } else {
    detail::put(f, std::uint32_t(ck.sched.T));
    detail::put(f, std::uint8_t(ck.sched.calibrated ? 1 : 0));
    for (int t = 1; t <= ck.sched.T; ++t) detail::put(f, ck.sched.beta[t]);
  }
  detail::put(f, ck.bank.ema_decay);

  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;
  for (std::size_t l = 0; l < ck.params.W.size(); ++l)
    tensors.emplace_back("W" + std::to_string(l), ck.params.W[l]);
  for (std::size_t l = 0; l < ck.params.b.size(); ++l)
    tensors.emplace_back("b" + std::to_string(l), Eigen::MatrixXd(ck.params.b[l]));
  tensors.emplace_back("label_embed", ck.params.label_embed);
  tensors.emplace_back("null_embed", Eigen::MatrixXd(ck.params.null_embed));
  tensors.emplace_back("psi_pos", ck.bank.psi_pos);
  tensors.emplace_back("psi_neg", ck.bank.psi_neg);
  tensors.emplace_back("ema_pos", ck.bank.ema_pos);
  tensors.emplace_back("ema_neg", ck.bank.ema_neg);

  detail::put(f, std::uint32_t(tensors.size()));
  for (const auto& [name, M] : tensors) detail::put_tensor(f, name, M);
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != std::string(detail::kMagic, 4))
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  detail::get(f, version);
  if (version != detail::kVersion)
    throw std::runtime_error("unsupported checkpoint version in " + path);

  Checkpoint ck;
  std::uint8_t kind = 0;
  detail::get(f, kind);
  ck.kind = kind == 1 ? "flow" : "diffusion";

  Dims dm;
  std::uint32_t v = 0;
  detail::get(f, v); dm.d = int(v);
  detail::get(f, v); dm.d_t = int(v);
  detail::get(f, v); dm.d_e = int(v);
  detail::get(f, v); dm.d_s = int(v);
  detail::get(f, v); dm.m = int(v);
  detail::get(f, v); dm.K = int(v);
  detail::get(f, v); dm.hidden = int(v);
  detail::get(f, v); dm.layers = int(v);

  std::uint32_t T = 0;
  std::uint8_t calibrated = 0;
  detail::get(f, T);
  detail::get(f, calibrated);
  if (ck.kind == "flow") {
    detail::get(f, ck.flow.delta_step);
    detail::get(f, ck.flow.sigma2);
    detail::get(f, ck.flow.lambda);
    detail::get(f, ck.flow.B);
  } else {
    std::vector<double> beta(std::size_t(T) + 1, 0.0);  // index 0 is unused
    for (std::uint32_t t = 1; t <= T; ++t) detail::get(f, beta[t]);
    ck.sched = make_schedule(std::move(beta), calibrated != 0);
  }
  double ema_decay = 0.0;
  detail::get(f, ema_decay);

  std::uint32_t count = 0;
  detail::get(f, count);
  ck.params.dims = dm;
  ck.params.W.resize(std::size_t(dm.layers) + 1);
  ck.params.b.resize(std::size_t(dm.layers) + 1);
  ck.bank.ema_decay = ema_decay;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, M] = detail::get_tensor(f);
    if (name.size() > 1 && name[0] == 'W') {
      ck.params.W.at(std::size_t(std::stoi(name.substr(1)))) = M;
    } else if (name.size() > 1 && name[0] == 'b') {
      ck.params.b.at(std::size_t(std::stoi(name.substr(1)))) = Eigen::VectorXd(M.col(0));
    } else if (name == "label_embed") {
      ck.params.label_embed = M;
    } else if (name == "null_embed") {
      ck.params.null_embed = Eigen::VectorXd(M.col(0));
    } else if (name == "psi_pos") {
      ck.bank.psi_pos = M;
    } else if (name == "psi_neg") {
      ck.bank.psi_neg = M;
    } else if (name == "ema_pos") {
      ck.bank.ema_pos = M;
    } else if (name == "ema_neg") {
      ck.bank.ema_neg = M;
    } else {
      throw std::runtime_error("unknown checkpoint tensor: " + name);
    }
  }
  return ck;
}

}  // namespace agsm
