#pragma once

#include <json.hpp>

#include "gplab/common.hpp"

namespace gplab {

// Matrices serialize as {rows, cols, data(row-major)}; nlohmann emits
// shortest round-trip doubles, so load(save(m)) == m bitwise.
inline nlohmann::json mat_to_json(const Mat& m) {
  if (!m.allFinite()) throw DataError("mat_to_json: non-finite values");
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Mat mat_from_json(const nlohmann::json& j) {
  auto rows = j.at("rows").get<Eigen::Index>();
  auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw DataError("mat_from_json: data length != rows*cols");
  Mat m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[k++].get<double>();
  return m;
}

}  // namespace gplab
