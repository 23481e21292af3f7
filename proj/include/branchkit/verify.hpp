#pragma once

#include <string>
#include <vector>

namespace branchkit::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;  // worst metric or failure description
};

CheckResult check_tensor_properties();            // round trip, linearity, broadcast grads
CheckResult check_composite_gradients(int seeds); // op-level gradcheck sweep
CheckResult check_primitive_invariants();         // layer norm/batch norm stats, delta kernels
CheckResult check_mask_hygiene();                 // garbage padding never leaks into valid frames
CheckResult check_attention_invariants();         // softmax rows, oracle equalities
CheckResult check_structural_identities();        // zero-param reduction, merge reduction, halving
CheckResult check_gradient_suite(int seeds_per_case);
CheckResult check_ctc_equivalence(int instances);
CheckResult check_ctc_properties();
CheckResult check_profiler_exactness(bool include_large_preset);
CheckResult check_profiler_properties();
CheckResult check_schedule_and_adam();
CheckResult check_sampling_statistics();  // dropout / stochastic depth / specaugment Monte Carlo
CheckResult check_determinism();

std::vector<CheckResult> run_all();

}  // namespace branchkit::verify
