#pragma once

// Data-parallel batch kernels. Each has a serial reference; the OpenMP path
// computes per-item results independently and reduces them in item order, so
// both produce bit-identical output for any thread count.

#include <cstdint>
#include <span>
#include <vector>

#include "cuma/exec.hpp"
#include "cuma/grpo.hpp"
#include "cuma/policy.hpp"

namespace cuma {

void set_num_threads(int threads);
int max_threads();

/// One rollout group per prompt; prompt i draws from stream (seed, step, i).
std::vector<RolloutGroup> sample_batch(const PolicyParams& params, std::span<const TaskInstance> prompts,
                                       std::size_t n, double temperature, std::size_t max_length, std::uint64_t seed,
                                       std::size_t step, Exec exec = Exec::parallel);

/// Same contract as batch_gradient (the serial reference in grpo).
SurrogateResult batch_gradient_parallel(const PolicyParams& params, std::span<const GroupBatchItem> batch,
                                        const TrainConfig& config, const PolicyParams& ref_params);

/// Mean self-certainty per group (one value per group), used for diagnostics.
std::vector<double> group_self_certainty(const PolicyParams& params, std::span<const RolloutGroup> groups,
                                         Exec exec = Exec::parallel);

}  // namespace cuma
