#pragma once

#include <set>
#include <string>
#include <vector>

namespace gplab::cov {

// Process-wide registry of exercised operations; the acceptance suite audits
// it against the full operation list after running every stage.
std::set<std::string>& touched();

inline void touch(const std::string& op) { touched().insert(op); }

std::vector<std::string> missing(const std::vector<std::string>& required);

}  // namespace gplab::cov
