#pragma once

// Finite-difference verification of every autodiff op and every composed objective.
//
// A check passes when |analytic - numeric| <= rtol * max(|analytic|, |numeric|) + atol for
// every checked coordinate, with central differences of step h. Ops are checked on all
// coordinates; model-level losses on a random subset of parameter coordinates per case.

#include <cstdint>
#include <string>
#include <vector>

namespace qeebm {

struct GradcheckOptions {
  int cases = 100;
  double h = 1e-5;
  double rtol = 1e-4;
  double atol = 1e-8;
  int coords_per_case = 12;
  std::uint64_t seed = 1;
  /// Name of an op or loss whose backward pass is corrupted (gradients scaled by 1.5).
  std::string inject_fault;
  /// Restrict the suite to these names (all when empty).
  std::vector<std::string> only;
};

struct GradcheckEntry {
  std::string name;
  int cases = 0;
  int failures = 0;
  /// max |a - n| / (max(|a|, |n|) + atol / rtol) over all checked coordinates.
  double worst_rel = 0.0;
  std::uint64_t first_failing_case = 0;
  std::string detail;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double seconds = 0.0;
  bool ok() const;
};

std::vector<std::string> gradcheck_names();
GradcheckReport run_gradcheck(const GradcheckOptions& opts);

}  // namespace qeebm
