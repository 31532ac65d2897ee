#pragma once

// Sequential easy-to-hard schedule over difficulty bins, plus a label-free
// difficulty estimate for instances that arrive without a level.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cuma/corpus.hpp"
#include "cuma/policy.hpp"

namespace cuma {

// level 0 marks a pooled phase drawing from every bin.
inline constexpr int kPooledLevel = 0;

struct Phase {
    int level = kPooledLevel;
    std::size_t steps = 0;

    bool operator==(const Phase&) const = default;
};

struct CurriculumSchedule {
    std::vector<Phase> phases;
    std::size_t cursor = 0;
    std::size_t used_in_phase = 0;
    std::size_t skipped_bins = 0;
    bool enabled = true;

    std::size_t total_steps() const;
    bool exhausted() const { return cursor >= phases.size(); }
    // Level of the phase that serves `step` (global step count from 0).
    int level_at(std::size_t step) const;
    std::string summary() const;
};

using StepsPerBin = std::array<std::size_t, kNumLevels>;

/// total / 5 per bin, remainder spread over the first bins.
StepsPerBin uniform_steps(std::size_t total);

/// Enabled: phases (1, s1) .. (5, s5); an empty bin's budget moves to the next
/// non-empty phase (or the last one). Disabled: one pooled phase of sum(s).
CurriculumSchedule build_schedule(std::span<const DifficultyBin> bins, const StepsPerBin& steps_per_bin, bool enabled);

struct Batch {
    int level = kPooledLevel;
    std::vector<TaskInstance> instances;
};

/// Uniform with-replacement draw of `batch_size` instances from the active phase.
/// Returns std::nullopt once the schedule is exhausted.
std::optional<Batch> next_batch(CurriculumSchedule& schedule, std::span<const DifficultyBin> bins,
                                std::size_t batch_size, std::uint64_t seed, std::size_t step);

struct DifficultyThresholds {
    // consensus-rate lower bounds for levels 1..4; anything lower is level 5
    std::array<double, 4> bounds{0.9, 0.7, 0.5, 0.3};
};

double consensus_rate(const PolicyParams& base, const TaskInstance& instance, std::size_t n, double temperature,
                      std::size_t max_length, std::size_t trials, std::uint64_t seed);

int level_from_consensus(double rate, const DifficultyThresholds& thresholds = {});

/// Never reads the instance's gold answer.
int estimate_difficulty(const PolicyParams& base, const TaskInstance& instance, std::size_t n, double temperature,
                        std::size_t trials, std::uint64_t seed, std::size_t max_length = kDefaultMaxLength,
                        const DifficultyThresholds& thresholds = {});

}  // namespace cuma
