#include "gplab/coverage.hpp"

namespace gplab::cov {

std::set<std::string>& touched() {
  static std::set<std::string> s;
  return s;
}

std::vector<std::string> missing(const std::vector<std::string>& required) {
  std::vector<std::string> out;
  for (const auto& r : required)
    if (!touched().count(r)) out.push_back(r);
  return out;
}

}  // namespace gplab::cov
