#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace gplab {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Error taxonomy mirrored by the CLI exit codes: config -> 2, data -> 3,
// everything else -> 4.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};
struct TrainError : Error {
  using Error::Error;
};
struct EvalError : Error {
  using Error::Error;
};

// All randomness flows through explicitly seeded engines.
using Rng = std::mt19937_64;

inline Mat gaussian(int rows, int cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

// FNV-1a over the raw bytes of a matrix list; used for frozen-weight audits
// and reproducibility checks.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t checksum(const Mat& m, std::uint64_t h = 14695981039346656037ull) {
  h = fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
  std::int64_t dims[2] = {m.rows(), m.cols()};
  return fnv1a(dims, sizeof(dims), h);
}

}  // namespace gplab
