#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>

namespace agsm {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a, used to hash substream names into the seed mix.
inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Every random draw in the project flows from one root seed through named
// substreams, so runs are reproducible and ablation arms can share noise.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = splitmix64(seed ^ hash_name(name));
  s = splitmix64(s ^ (0x9e3779b97f4a7c15ULL + a));
  s = splitmix64(s ^ (0xc2b2ae3d27d4eb4fULL + b));
  return s;
}

inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  return std::mt19937_64(derive_seed(seed, name, a, b));
}

inline Eigen::VectorXd normal_vector(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = n(rng);
  return v;
}

inline Eigen::MatrixXd normal_matrix(std::mt19937_64& rng, int rows, int cols,
                                     double std_dev = 1.0) {
  std::normal_distribution<double> n(0.0, std_dev);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = n(rng);
  return m;
}

}  // namespace agsm
