#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradinit/autodiff/grad.hpp"

// Randomized finite-difference verification of every primitive and layer, and
// of gradients taken through a first backward pass.
namespace gi::ad::gradcheck {

enum class CaseKind { primitive, layer, second_order };
std::string to_string(CaseKind kind);

struct CaseResult {
  std::string name;
  CaseKind kind = CaseKind::primitive;
  std::int64_t instances = 0;
  std::int64_t coordinates = 0;
  double max_rel_err = 0;
  double max_abs_err = 0;
  double tol = 0;
  bool pass = false;
  double seconds = 0;
  std::int64_t worst_instance = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct SuiteOptions {
  std::int64_t instances = 100;
  std::uint64_t seed = 0;
  double h = 1e-5;
  double tol = 1e-6;
  double second_order_tol = 1e-4;
  // Case names to run; empty runs everything.
  std::vector<std::string> only;
};

struct SuiteReport {
  std::vector<CaseResult> cases;
  double seconds = 0;
  bool pass() const;
};

/// All registered case names in run order.
std::vector<std::string> case_names();

/// Each instance draws shapes and values from the seed, reads the op out as
/// sum(w * op(x)) with fixed random w, and compares central differences with
/// reverse mode. Inputs keep clear of kinks (relu, abs, max ties) by more
/// than h. Throws std::invalid_argument for an unknown name in `only`.
SuiteReport run_suite(const SuiteOptions& options = {});

}  // namespace gi::ad::gradcheck
