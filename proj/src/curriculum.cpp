#include "cuma/curriculum.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>
#include <sstream>

#include "cuma/error.hpp"
#include "cuma/rewards.hpp"
#include "cuma/rng.hpp"

namespace cuma {

std::size_t CurriculumSchedule::total_steps() const {
    std::size_t total = 0;
    for (const auto& p : phases) {
        total += p.steps;
    }
    return total;
}

int CurriculumSchedule::level_at(std::size_t step) const {
    std::size_t start = 0;
    for (const auto& p : phases) {
        if (step < start + p.steps) {
            return p.level;
        }
        start += p.steps;
    }
    return phases.empty() ? kPooledLevel : phases.back().level;
}

std::string CurriculumSchedule::summary() const {
    std::ostringstream s;
    s << (enabled ? "sequential" : "pooled") << ':';
    for (const auto& p : phases) {
        s << " L" << p.level << 'x' << p.steps;
    }
    return s.str();
}

StepsPerBin uniform_steps(std::size_t total) {
    StepsPerBin s{};
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = total / kNumLevels + (i < total % kNumLevels ? 1 : 0);
    }
    return s;
}

CurriculumSchedule build_schedule(std::span<const DifficultyBin> bins, const StepsPerBin& steps_per_bin, bool enabled) {
    if (bins.size() != kNumLevels) {
        throw InvalidInput("curriculum needs exactly five difficulty bins");
    }
    const bool all_empty = std::all_of(bins.begin(), bins.end(), [](const auto& b) { return b.instances.empty(); });
    if (all_empty) {
        throw InvalidInput("every difficulty bin is empty");
    }
    CurriculumSchedule sched;
    sched.enabled = enabled;
    if (!enabled) {
        sched.phases.push_back({kPooledLevel, std::accumulate(steps_per_bin.begin(), steps_per_bin.end(), std::size_t{0})});
        return sched;
    }
    std::size_t carry = 0;
    for (std::size_t i = 0; i < bins.size(); ++i) {
        if (bins[i].instances.empty()) {
            std::cerr << "warning: difficulty bin " << bins[i].level << " is empty; its " << steps_per_bin[i]
                      << " steps move to the next phase\n";
            ++sched.skipped_bins;
            carry += steps_per_bin[i];
            continue;
        }
        sched.phases.push_back({bins[i].level, steps_per_bin[i] + carry});
        carry = 0;
    }
    sched.phases.back().steps += carry;
    // skip zero-length phases at the start
    while (sched.cursor < sched.phases.size() && sched.phases[sched.cursor].steps == 0) {
        ++sched.cursor;
    }
    return sched;
}

std::optional<Batch> next_batch(CurriculumSchedule& schedule, std::span<const DifficultyBin> bins,
                                std::size_t batch_size, std::uint64_t seed, std::size_t step) {
    while (!schedule.exhausted() && schedule.used_in_phase >= schedule.phases[schedule.cursor].steps) {
        ++schedule.cursor;
        schedule.used_in_phase = 0;
    }
    if (schedule.exhausted()) {
        return std::nullopt;
    }
    const auto& phase = schedule.phases[schedule.cursor];
    Batch batch;
    batch.level = phase.level;

    Rng rng(derive_seed(seed, {0xB47C4ULL, step}));
    if (phase.level == kPooledLevel) {
        std::size_t pool = 0;
        for (const auto& b : bins) {
            pool += b.instances.size();
        }
        for (std::size_t i = 0; i < batch_size; ++i) {
            std::size_t k = rng.index(pool);
            for (const auto& b : bins) {
                if (k < b.instances.size()) {
                    batch.instances.push_back(b.instances[k]);
                    break;
                }
                k -= b.instances.size();
            }
        }
    } else {
        const auto& src = bins[static_cast<std::size_t>(phase.level - 1)].instances;
        for (std::size_t i = 0; i < batch_size; ++i) {
            batch.instances.push_back(src[rng.index(src.size())]);
        }
    }
    ++schedule.used_in_phase;
    return batch;
}

double consensus_rate(const PolicyParams& base, const TaskInstance& instance, std::size_t n, double temperature,
                      std::size_t max_length, std::size_t trials, std::uint64_t seed) {
    if (trials == 0) {
        throw InvalidInput("difficulty estimation needs at least one trial");
    }
    // only the prompt text enters sampling; the gold field is not consulted
    TaskInstance unlabeled{instance.id, instance.prompt, std::nullopt, std::nullopt, instance.source};
    double total = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        const auto group = sample_group(base, unlabeled, n, temperature, max_length, derive_seed(seed, {trial}));
        const auto mv = majority_vote(extract_answers(base.vocab(), group));
        total += static_cast<double>(mv.consensus_count) / static_cast<double>(n);
    }
    return total / static_cast<double>(trials);
}

int level_from_consensus(double rate, const DifficultyThresholds& thresholds) {
    for (std::size_t i = 0; i < thresholds.bounds.size(); ++i) {
        if (rate >= thresholds.bounds[i]) {
            return static_cast<int>(i) + 1;
        }
    }
    return kMaxLevel;
}

int estimate_difficulty(const PolicyParams& base, const TaskInstance& instance, std::size_t n, double temperature,
                        std::size_t trials, std::uint64_t seed, std::size_t max_length,
                        const DifficultyThresholds& thresholds) {
    return level_from_consensus(consensus_rate(base, instance, n, temperature, max_length, trials, seed), thresholds);
}

}  // namespace cuma
