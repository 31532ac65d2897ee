#include <set>

#include <gtest/gtest.h>

#include "cuma/corpus.hpp"
#include "cuma/curriculum.hpp"
#include "cuma/error.hpp"
#include "cuma/rng.hpp"

using namespace cuma;

namespace {

std::vector<DifficultyBin> full_bins(std::size_t per_level = 20) {
    std::vector<TaskInstance> all;
    for (int level = 1; level <= kNumLevels; ++level) {
        auto part = generate_corpus(level, per_level, 31);
        all.insert(all.end(), part.begin(), part.end());
    }
    return partition_bins(all);
}

const StepsPerBin kTen{10, 10, 10, 10, 10};

}  // namespace

TEST(Schedule, FivePhasesWhenAllBinsFilled) {
    const auto bins = full_bins();
    const auto s = build_schedule(bins, kTen, true);
    ASSERT_EQ(s.phases.size(), 5u);
    EXPECT_EQ(s.total_steps(), 50u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(s.phases[i], (Phase{static_cast<int>(i) + 1, 10}));
    }
    EXPECT_EQ(s.skipped_bins, 0u);
    EXPECT_EQ(s.summary(), "sequential: L1x10 L2x10 L3x10 L4x10 L5x10");
}

TEST(Schedule, EmptyBinIsSkippedAndBudgetMoves) {
    auto bins = full_bins();
    bins[2].instances.clear();
    const auto s = build_schedule(bins, kTen, true);
    ASSERT_EQ(s.phases.size(), 4u);
    EXPECT_EQ(s.skipped_bins, 1u);
    EXPECT_EQ(s.phases[2], (Phase{4, 20}));
    EXPECT_EQ(s.total_steps(), 50u);
    // trailing empty bin hands its budget to the last phase
    bins[4].instances.clear();
    const auto t = build_schedule(bins, kTen, true);
    EXPECT_EQ(t.phases.back(), (Phase{4, 30}));
    EXPECT_EQ(t.total_steps(), 50u);
}

TEST(Schedule, DisabledIsOnePooledPhase) {
    const auto s = build_schedule(full_bins(), kTen, false);
    ASSERT_EQ(s.phases.size(), 1u);
    EXPECT_EQ(s.phases[0], (Phase{kPooledLevel, 50}));
}

TEST(Schedule, RejectsAllEmptyOrWrongShape) {
    std::vector<DifficultyBin> empty(5);
    for (int i = 0; i < 5; ++i) {
        empty[static_cast<std::size_t>(i)].level = i + 1;
    }
    EXPECT_THROW(build_schedule(empty, kTen, true), InvalidInput);
    auto bins = full_bins();
    bins.pop_back();
    EXPECT_THROW(build_schedule(bins, kTen, true), InvalidInput);
}

TEST(Schedule, UniformStepsSpreadRemainder) {
    EXPECT_EQ(uniform_steps(500), (StepsPerBin{100, 100, 100, 100, 100}));
    EXPECT_EQ(uniform_steps(7), (StepsPerBin{2, 2, 1, 1, 1}));
}

TEST(NextBatch, PhasePurityMonotoneExposureAndBoundaries) {
    const auto bins = full_bins();
    const StepsPerBin steps{3, 7, 1, 4, 5};
    auto s = build_schedule(bins, steps, true);
    std::vector<int> trace;
    int last = 0;
    for (std::size_t step = 0;; ++step) {
        const auto b = next_batch(s, bins, 6, 99, step);
        if (!b) {
            EXPECT_EQ(step, 20u);
            break;
        }
        ASSERT_EQ(b->instances.size(), 6u);
        for (const auto& t : b->instances) {
            ASSERT_EQ(t.level, b->level);
        }
        EXPECT_GE(b->level, last);
        EXPECT_EQ(b->level, s.level_at(step));
        last = b->level;
        trace.push_back(b->level);
    }
    const std::vector<int> expected{1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 3, 4, 4, 4, 4, 5, 5, 5, 5, 5};
    EXPECT_EQ(trace, expected);
}

TEST(NextBatch, WithReplacementBeyondBinSize) {
    const auto bins = full_bins(3);
    auto s = build_schedule(bins, kTen, true);
    const auto b = next_batch(s, bins, 50, 1, 0);
    ASSERT_TRUE(b);
    EXPECT_EQ(b->instances.size(), 50u);
}

TEST(NextBatch, PooledDrawsFromUnionAndIsDeterministic) {
    const auto bins = full_bins();
    auto a = build_schedule(bins, kTen, false);
    auto b = build_schedule(bins, kTen, false);
    std::set<int> levels;
    for (std::size_t step = 0; step < 50; ++step) {
        const auto x = next_batch(a, bins, 8, 5, step);
        const auto y = next_batch(b, bins, 8, 5, step);
        ASSERT_TRUE(x && y);
        EXPECT_EQ(x->instances, y->instances);
        EXPECT_EQ(x->level, kPooledLevel);
        for (const auto& t : x->instances) {
            levels.insert(*t.level);
        }
    }
    EXPECT_EQ(levels.size(), 5u);
    EXPECT_FALSE(next_batch(a, bins, 8, 5, 50).has_value());
}

TEST(Difficulty, ThresholdMapping) {
    EXPECT_EQ(level_from_consensus(1.0), 1);
    EXPECT_EQ(level_from_consensus(0.9), 1);
    EXPECT_EQ(level_from_consensus(0.75), 2);
    EXPECT_EQ(level_from_consensus(0.5), 3);
    EXPECT_EQ(level_from_consensus(0.3), 4);
    EXPECT_EQ(level_from_consensus(0.29), 5);
}

TEST(Difficulty, NearDeterministicPolicyIsLevelOne) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    const auto& v = p.vocab();
    p.row(p.layout().prev_token(std::nullopt))[v.sep()] = 200.0;
    p.row(p.layout().prev_token(v.sep()))[4] = 200.0;
    p.row(p.layout().prev_token(4))[v.eos()] = 200.0;
    const TaskInstance t{"x", "2+2=?", std::nullopt, std::nullopt, Source::ingested};
    EXPECT_EQ(consensus_rate(p, t, 8, 0.6, 16, 3, 1), 1.0);
    EXPECT_EQ(estimate_difficulty(p, t, 8, 0.6, 3, 1), 1);
}

TEST(Difficulty, UniformPolicyIsLevelFive) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    const TaskInstance t{"x", "12*7=?", std::nullopt, std::nullopt, Source::ingested};
    EXPECT_LT(consensus_rate(p, t, 8, 1.0, 16, 10, 2), 0.3);
    EXPECT_EQ(estimate_difficulty(p, t, 8, 1.0, 10, 2), 5);
    EXPECT_THROW(consensus_rate(p, t, 8, 1.0, 16, 0, 2), InvalidInput);
}

TEST(Difficulty, IgnoresGoldAnswers) {
    PolicyParams p(Vocabulary::standard(), {64, 8});
    Rng rng(3);
    for (auto& w : p.weights()) {
        w = 2.0 * rng.uniform() - 1.0;
    }
    for (const auto& t : generate_corpus(2, 30, 8)) {
        auto poisoned = t;
        poisoned.gold_answer = "SENTINEL";
        auto stripped = t;
        stripped.gold_answer.reset();
        const double r = consensus_rate(p, t, 8, 0.6, 16, 4, 6);
        EXPECT_EQ(r, consensus_rate(p, poisoned, 8, 0.6, 16, 4, 6));
        EXPECT_EQ(r, consensus_rate(p, stripped, 8, 0.6, 16, 4, 6));
    }
}
