#pragma once

#include <cstdio>
#include <string>
#include <vector>

namespace gpd {

// One numeric check: the observed deviation against its tolerance.
struct CheckResult {
  std::string name;
  double deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct Report {
  std::vector<CheckResult> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }

  CheckResult& add(std::string name, double deviation, double tolerance, std::string detail = {}) {
    checks.push_back({std::move(name), deviation, tolerance, deviation < tolerance, std::move(detail)});
    return checks.back();
  }

  // Records a check that must hold exactly (deviation == 0).
  CheckResult& add_exact(std::string name, double deviation, std::string detail = {}) {
    checks.push_back({std::move(name), deviation, 0.0, deviation == 0.0, std::move(detail)});
    return checks.back();
  }

  void append(const Report& other) { checks.insert(checks.end(), other.checks.begin(), other.checks.end()); }

  void print(std::FILE* out = stdout) const {
    for (const auto& c : checks) {
      std::fprintf(out, "%-4s %-44s dev=%.3e tol=%.1e%s%s\n", c.passed ? "ok" : "FAIL", c.name.c_str(), c.deviation,
                   c.tolerance, c.detail.empty() ? "" : "  ", c.detail.c_str());
    }
  }
};

}  // namespace gpd
