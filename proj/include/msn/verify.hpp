#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Self-check suites run by `msn verify` and the acceptance tests.

namespace msn::verify {

struct CheckResult {
  std::string name;
  double worst_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Reverse-mode gradients of every layer op, msl_total, and the full
/// network loss (config 7, width 0.25, depth 1, batch of 4) against 64-bit
/// central differences.
std::vector<CheckResult> gradcheck_suite(std::uint64_t seed);

/// Brute-force all-pairs within-class loss, cross-entropy degeneracy and
/// head averaging on random batches.
std::vector<CheckResult> oracle_suite(std::uint64_t seed);

/// xi schedule, lr schedule, momentum recurrence, loss invariances, flip
/// involution and checkpoint round trip.
std::vector<CheckResult> invariants_suite(std::uint64_t seed);

/// "<name> worst_error=<e> tolerance=<t> PASS|FAIL"
std::string format(const CheckResult& result);

// Individual checks, shared with the acceptance binary.
CheckResult check_network_gradient(std::uint64_t seed);
CheckResult check_degeneracy(std::uint64_t seed, int batches = 100);
CheckResult check_within_oracle(std::uint64_t seed, int batches = 200);
CheckResult check_xi_sequence();
CheckResult check_head_averaging(std::uint64_t seed, int trials_per_count = 25);

}  // namespace msn::verify
