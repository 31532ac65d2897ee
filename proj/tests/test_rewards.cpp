#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "cuma/error.hpp"
#include "cuma/policy.hpp"
#include "cuma/rewards.hpp"
#include "cuma/rng.hpp"
#include "oracles.hpp"

using namespace cuma;

namespace {

const Vocabulary kVocab = Vocabulary::standard();

Sequence toks(std::initializer_list<const char*> names) {
    Sequence s;
    for (const char* n : names) {
        s.push_back(*kVocab.find(n));
    }
    return s;
}

std::vector<CanonicalAnswer> answers_of(std::initializer_list<const char*> texts) {
    std::vector<CanonicalAnswer> out;
    for (const char* t : texts) {
        out.push_back(t ? CanonicalAnswer::from_text(t) : CanonicalAnswer::none());
    }
    return out;
}

// Symbol i >= 0 becomes the answer str(i); -1 becomes NO_ANSWER.
std::vector<CanonicalAnswer> answers_of(const std::vector<int>& symbols) {
    std::vector<CanonicalAnswer> out;
    for (int s : symbols) {
        out.push_back(s < 0 ? CanonicalAnswer::none() : CanonicalAnswer::from_text(std::to_string(s)));
    }
    return out;
}

void expect_matches_oracle(const std::vector<int>& symbols) {
    const auto o = oracle::vote(symbols);
    const auto sig = vote_rewards(answers_of(symbols));
    ASSERT_EQ(sig.rewards, o.rewards);
    ASSERT_EQ(sig.keep, o.keep);
    ASSERT_EQ(sig.consensus_count, o.count);
    if (o.majority < 0) {
        ASSERT_FALSE(sig.majority.has_value());
    } else {
        ASSERT_TRUE(sig.majority.has_value());
        ASSERT_EQ(sig.majority->text(), std::to_string(o.majority));
    }
}

// Group of sequences that each end in SEP <answer> EOS.
RolloutGroup group_with_answers(std::initializer_list<const char*> answers) {
    RolloutGroup g;
    g.prompt_id = "p";
    g.prompt_hash = prompt_hash("1+1=?");
    for (const char* a : answers) {
        Candidate c;
        c.tokens = a ? kVocab.encode_answer(a) : toks({"1", "EOS"});
        c.logprobs.assign(c.tokens.size(), -1.0);
        g.candidates.push_back(c);
    }
    return g;
}

}  // namespace

TEST(Canonical, Normalization) {
    EXPECT_EQ(CanonicalAnswer::from_text(" 007 ").text(), "7");
    EXPECT_EQ(CanonicalAnswer::from_text("-0").text(), "0");
    EXPECT_EQ(CanonicalAnswer::from_text("+12").text(), "12");
    EXPECT_EQ(CanonicalAnswer::from_text("\xE2\x88\x92" "3"), CanonicalAnswer::from_text("-3"));
    EXPECT_FALSE(CanonicalAnswer::from_text("").has_value());
    EXPECT_FALSE(CanonicalAnswer::from_text("-").has_value());
    EXPECT_EQ(CanonicalAnswer::none().str(), "<NO_ANSWER>");
}

TEST(ExtractAnswer, Examples) {
    EXPECT_EQ(extract_answer(kVocab, toks({"1", "+", "2", "SEP", "3", "EOS"})).text(), "3");
    EXPECT_EQ(extract_answer(kVocab, toks({"SEP", "0", "0", "7", "EOS"})).text(), "7");
    EXPECT_FALSE(extract_answer(kVocab, toks({"1", "2", "EOS"})).has_value());
    EXPECT_FALSE(extract_answer(kVocab, toks({"SEP", "EOS"})).has_value());
    // last SEP wins, missing EOS reads to the end
    EXPECT_EQ(extract_answer(kVocab, toks({"SEP", "4", "SEP", "-", "5"})).text(), "-5");
}

TEST(MajorityVote, Examples) {
    const auto a = majority_vote(answers_of({"4", "4", "7"}));
    EXPECT_EQ(a.majority.text(), "4");
    EXPECT_EQ(a.consensus_count, 2);
    const auto b = majority_vote(answers_of({"b", "a", "b", "a"}));
    EXPECT_EQ(b.majority.text(), "b");
    EXPECT_EQ(b.consensus_count, 2);
    const auto c = majority_vote(answers_of({nullptr, nullptr, "5"}));
    EXPECT_EQ(c.majority.text(), "5");
    EXPECT_EQ(c.consensus_count, 1);
    const auto d = majority_vote(answers_of({nullptr, nullptr}));
    EXPECT_FALSE(d.majority.has_value());
    EXPECT_EQ(d.consensus_count, 0);
}

TEST(VoteRewards, Examples) {
    const auto a = vote_rewards(answers_of({"4", "4", "7"}));
    EXPECT_EQ(a.rewards, (std::vector<double>{1, 1, 0}));
    EXPECT_TRUE(a.keep);
    const auto b = vote_rewards(answers_of({"1", "2", "3", "5"}));
    EXPECT_FALSE(b.keep);
    EXPECT_EQ(b.consensus_count, 1);
    EXPECT_THROW(vote_rewards(answers_of({"1"})), InvalidInput);
}

TEST(VoteRewards, ExhaustiveFourByFourMatchesOracle) {
    for (int code = 0; code < 256; ++code) {
        std::vector<int> symbols;
        for (int k = 0; k < 4; ++k) {
            symbols.push_back((code >> (2 * k)) & 3);
        }
        expect_matches_oracle(symbols);
    }
}

TEST(VoteRewards, RandomTuplesMatchOracle) {
    Rng rng(11);
    for (int i = 0; i < 10000; ++i) {
        const auto n = 2 + rng.index(7);
        const auto alphabet = 1 + rng.index(5);
        std::vector<int> symbols;
        for (std::size_t j = 0; j < n; ++j) {
            // index == alphabet maps to NO_ANSWER
            const auto s = rng.index(alphabet + 1);
            symbols.push_back(s == alphabet ? -1 : static_cast<int>(s));
        }
        expect_matches_oracle(symbols);
        const auto sig = vote_rewards(answers_of(symbols));
        if (sig.keep) {
            double sum = 0.0;
            for (double r : sig.rewards) {
                sum += r;
            }
            ASSERT_EQ(sum, static_cast<double>(sig.consensus_count));
        }
    }
}

TEST(VoteRewards, PermutationInvarianceWithUniqueMode) {
    Rng rng(12);
    int checked = 0;
    for (int i = 0; i < 2000; ++i) {
        std::vector<int> symbols;
        const auto n = 2 + rng.index(7);
        for (std::size_t j = 0; j < n; ++j) {
            symbols.push_back(static_cast<int>(rng.index(4)) - 1);
        }
        const auto base = vote_rewards(answers_of(symbols));
        // unique mode: no other value attains the maximal count
        int attaining = 0;
        for (int v = 0; v < 3; ++v) {
            attaining += std::count(symbols.begin(), symbols.end(), v) == base.consensus_count ? 1 : 0;
        }
        if (base.consensus_count == 0 || attaining != 1) {
            continue;
        }
        ++checked;
        auto shuffled = symbols;
        std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(rng.next()));
        const auto perm = vote_rewards(answers_of(shuffled));
        EXPECT_EQ(perm.majority, base.majority);
        auto a = base.rewards, b = perm.rewards;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        EXPECT_EQ(a, b);
    }
    EXPECT_GT(checked, 500);
}

TEST(VerifierRewards, Examples) {
    const auto gold = CanonicalAnswer::from_text("5");
    EXPECT_EQ(verifier_rewards(answers_of({"5", "4", "5"}), gold).rewards, (std::vector<double>{1, 0, 1}));
    const auto none = verifier_rewards(answers_of({nullptr, nullptr}), gold);
    EXPECT_EQ(none.rewards, (std::vector<double>{0, 0}));
    EXPECT_TRUE(none.keep);
    const auto neg = verifier_rewards(std::vector<CanonicalAnswer>{extract_answer(kVocab, kVocab.encode_answer("-3"))},
                                      CanonicalAnswer::from_text("\xE2\x88\x92" "3"));
    EXPECT_EQ(neg.rewards, (std::vector<double>{1}));
    EXPECT_THROW(verifier_rewards(answers_of({"1", "2"}), std::nullopt), InvalidInput);
}

TEST(IntuitorRewards, UniformPolicyGivesZeros) {
    PolicyParams p(kVocab, {8, 4});
    const auto sig = intuitor_rewards(group_with_answers({"3", "4", "5"}), p);
    EXPECT_EQ(sig.rewards, (std::vector<double>{0, 0, 0}));
    EXPECT_TRUE(sig.keep);
}

TEST(IntuitorRewards, ClosedFormAgainstUniform) {
    // the sharp prompt's bucket carries logits (ln 9, 0); the other bucket stays uniform
    const auto vocab = Vocabulary::from_tokens({"SEP", "EOS"});
    PolicyParams p(vocab, {4, 2});
    const auto sharp = prompt_hash("sharp");
    std::string other = "flat";
    while (p.layout().prompt(prompt_hash(other)) == p.layout().prompt(sharp)) {
        other += "x";
    }
    p.row(p.layout().prompt(sharp))[0] = std::log(9.0);
    auto make = [&](std::uint64_t h) {
        RolloutGroup g;
        g.prompt_hash = h;
        g.candidates.resize(2);
        for (auto& c : g.candidates) {
            c.tokens = {0};
            c.logprobs = {-1.0};
        }
        return g;
    };
    const auto a = intuitor_rewards(make(sharp), p);
    const auto b = intuitor_rewards(make(prompt_hash(other)), p);
    EXPECT_NEAR(a.rewards[0], 0.51083, 1e-5);
    EXPECT_NEAR(a.rewards[0], oracle::kl_uniform({0.9, 0.1}), 1e-12);
    EXPECT_EQ(b.rewards[0], 0.0);
}

TEST(IntuitorRewards, PermutingCandidatesPermutesRewards) {
    PolicyParams p(kVocab, {8, 4});
    Rng rng(3);
    for (auto& w : p.weights()) {
        w = rng.uniform() - 0.5;
    }
    auto g = group_with_answers({"3", "41", "-5", nullptr});
    const auto base = intuitor_rewards(g, p);
    std::reverse(g.candidates.begin(), g.candidates.end());
    auto rev = intuitor_rewards(g, p).rewards;
    std::reverse(rev.begin(), rev.end());
    EXPECT_EQ(rev, base.rewards);
}

TEST(ComputeSignal, StrategyExamples) {
    PolicyParams p(kVocab, {8, 4});
    const auto distinct = group_with_answers({"1", "2", "3", "4"});
    const auto cuma_sig = compute_signal(RewardStrategy::cuma, distinct, p, std::nullopt);
    EXPECT_FALSE(cuma_sig.keep);
    const auto ttrl = compute_signal(RewardStrategy::ttrl, distinct, p, std::nullopt);
    EXPECT_TRUE(ttrl.keep);
    EXPECT_EQ(ttrl.rewards, (std::vector<double>{1, 0, 0, 0}));
    SignalOptions strict;
    strict.ttrl_mode_min_count = 2;
    EXPECT_EQ(compute_signal(RewardStrategy::ttrl, distinct, p, std::nullopt, strict).rewards,
              (std::vector<double>{0, 0, 0, 0}));
    SignalOptions no_mask;
    no_mask.disable_mask = true;
    EXPECT_TRUE(compute_signal(RewardStrategy::cuma, distinct, p, std::nullopt, no_mask).keep);

    const auto agree = group_with_answers({"7", "7", "2", nullptr});
    EXPECT_EQ(compute_signal(RewardStrategy::verifier, agree, p, std::string("7")).rewards,
              compute_signal(RewardStrategy::cuma, agree, p, std::nullopt).rewards);
    EXPECT_THROW(compute_signal(RewardStrategy::verifier, agree, p, std::nullopt), InvalidInput);
}

TEST(ComputeSignal, LabelFreeStrategiesIgnoreGold) {
    PolicyParams p(kVocab, {8, 4});
    Rng rng(21);
    for (auto& w : p.weights()) {
        w = 2.0 * rng.uniform() - 1.0;
    }
    for (int i = 0; i < 200; ++i) {
        const auto g = sample_group(p, {"q", "1+2=?", 1, "3", Source::generated}, 6, 1.0, 8, rng.next());
        for (auto s : {RewardStrategy::ttrl, RewardStrategy::intuitor, RewardStrategy::cuma}) {
            const auto real = compute_signal(s, g, p, std::string("3"));
            EXPECT_EQ(real, compute_signal(s, g, p, std::string("SENTINEL-GOLD")));
            EXPECT_EQ(real, compute_signal(s, g, p, std::nullopt));
        }
    }
}

TEST(Strategy, ParseAndLabelFreedom) {
    EXPECT_EQ(parse_strategy("cuma"), RewardStrategy::cuma);
    EXPECT_EQ(parse_strategy("ttrl"), RewardStrategy::ttrl);
    EXPECT_FALSE(parse_strategy("ppo").has_value());
    EXPECT_FALSE(is_label_free(RewardStrategy::verifier));
    EXPECT_TRUE(is_label_free(RewardStrategy::intuitor));
    EXPECT_EQ(to_string(RewardStrategy::intuitor), "intuitor");
}
