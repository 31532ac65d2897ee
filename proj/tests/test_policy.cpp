#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "cuma/corpus.hpp"
#include "cuma/error.hpp"
#include "cuma/policy.hpp"
#include "cuma/rewards.hpp"
#include "cuma/rng.hpp"
#include "oracles.hpp"

using namespace cuma;

namespace {

TaskInstance prompt_of(const std::string& text) { return {"t", text, std::nullopt, std::nullopt, Source::generated}; }

Vocabulary binary_vocab() { return Vocabulary::from_tokens({"SEP", "EOS"}); }

void randomize(PolicyParams& p, std::uint64_t seed, double scale) {
    Rng rng(seed);
    for (auto& w : p.weights()) {
        w = scale * (2.0 * rng.uniform() - 1.0);
    }
}

Sequence random_sequence(Rng& rng, const Vocabulary& vocab, std::size_t max_len) {
    const auto len = 1 + rng.index(max_len);
    Sequence s;
    for (std::size_t i = 0; i < len; ++i) {
        s.push_back(static_cast<TokenId>(rng.index(vocab.size())));
    }
    return s;
}

}  // namespace

TEST(Vocabulary, StandardLayout) {
    const auto v = Vocabulary::standard();
    EXPECT_EQ(v.size(), 14u);
    EXPECT_EQ(v.token(v.sep()), "SEP");
    EXPECT_EQ(v.token(v.eos()), "EOS");
    EXPECT_EQ(v.find("7"), std::optional<TokenId>(7));
    const auto enc = v.encode_answer("-12");
    ASSERT_EQ(enc.size(), 5u);
    EXPECT_EQ(enc.front(), v.sep());
    EXPECT_EQ(enc.back(), v.eos());
}

TEST(Vocabulary, RejectsMissingOrDuplicateMarkers) {
    EXPECT_THROW(Vocabulary::from_tokens({"0", "1", "EOS"}), InvalidInput);
    EXPECT_THROW(Vocabulary::from_tokens({"SEP", "SEP", "EOS"}), InvalidInput);
    std::vector<std::string> big;
    for (int i = 0; i < 40; ++i) {
        big.push_back("t" + std::to_string(i));
    }
    big.push_back("SEP");
    big.push_back("EOS");
    EXPECT_THROW(Vocabulary::from_tokens(big), InvalidInput);
}

TEST(Features, EmptyPrefixHasBiasAndPositionZero) {
    PolicyParams p(Vocabulary::standard(), {});
    const auto f = features(p, prompt_of("2+3=?"), {}, 0);
    const auto& layout = p.layout();
    EXPECT_EQ(f[0], layout.bias());
    EXPECT_EQ(f[2], layout.position(0));
    EXPECT_EQ(f[1], layout.prev_token(std::nullopt));
    EXPECT_EQ(layout.count(), 1 + 15 + 8 + 4096 + 4096 * 8);
}

TEST(Features, DeterministicAndPositionBucketSaturates) {
    PolicyParams p(Vocabulary::standard(), {});
    const Sequence prefix{1, 2, 3, 4, 5, 6, 7, 8, 9, 0};
    const auto a = features(p, prompt_of("1+1=?"), prefix, prefix.size());
    EXPECT_EQ(a, features(p, prompt_of("1+1=?"), prefix, prefix.size()));
    EXPECT_EQ(a[2], p.layout().position(7));
    EXPECT_THROW(features(p, prompt_of("1+1=?"), prefix, 3), InvalidInput);
}

TEST(Features, PairwiseHashCollisionRateBelowTenPercent) {
    const FeatureLayout layout({}, 14);
    std::vector<std::string> distinct;
    std::set<std::string> seen;
    for (int level = 2; level <= 5 && distinct.size() < 1000; ++level) {
        for (const auto& t : generate_corpus(level, 400, 77)) {
            if (distinct.size() < 1000 && seen.insert(t.prompt).second) {
                distinct.push_back(t.prompt);
            }
        }
    }
    ASSERT_EQ(distinct.size(), 1000u);
    std::vector<ActiveFeatures> f;
    for (const auto& s : distinct) {
        f.push_back(features(layout, prompt_hash(s), {}, 0));
    }
    std::size_t pairs = 0, same = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        for (std::size_t j = i + 1; j < f.size(); ++j) {
            ++pairs;
            same += f[i] == f[j] ? 1 : 0;
        }
    }
    const double rate = static_cast<double>(same) / static_cast<double>(pairs);
    EXPECT_LT(rate, 0.10);
    // a uniform hash collides with probability 1/H per pair
    EXPECT_LT(rate, 3.0 / 4096.0);
}

TEST(NextTokenDist, ZeroWeightsUniform) {
    PolicyParams p(Vocabulary::standard(), {});
    for (double x : next_token_dist(p, prompt_of("x"), {}, 0.6)) {
        EXPECT_DOUBLE_EQ(x, 1.0 / 14.0);
    }
}

TEST(NextTokenDist, ClosedFormBinarySoftmax) {
    PolicyParams p(binary_vocab(), {});
    p.row(p.layout().bias())[0] = 1.0;
    const auto d = next_token_dist(p, prompt_of("x"), {}, 1.0);
    EXPECT_NEAR(d[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 1e-15);
    EXPECT_NEAR(d[0], 0.7311, 5e-5);
    EXPECT_NEAR(d[1], 0.2689, 5e-5);
}

TEST(NextTokenDist, HugeTemperatureFlattens) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    randomize(p, 3, 5.0);
    const auto d = next_token_dist(p, prompt_of("9+9=?"), {}, 1e6);
    const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
    EXPECT_LT(*hi - *lo, 1e-4);
}

TEST(NextTokenDist, SumsToOneOverRandomDrawsAndMatchesOracle) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    Rng rng(9);
    for (int i = 0; i < 10000; ++i) {
        if (i % 100 == 0) {
            randomize(p, rng.next(), 1.0 + static_cast<double>(i % 700) / 10.0);
        }
        const Sequence prefix = random_sequence(rng, p.vocab(), 6);
        const auto prompt = prompt_of(std::to_string(rng.next()));
        const auto d = next_token_dist(p, prompt, prefix, 1.0);
        double s = 0.0;
        for (double x : d) {
            EXPECT_GT(x, 0.0);
            s += x;
        }
        ASSERT_NEAR(s, 1.0, 1e-12);
        if (i % 500 == 0) {
            std::vector<double> z(p.vocab_size(), 0.0);
            for (auto f : features(p, prompt, prefix, prefix.size())) {
                for (std::size_t k = 0; k < z.size(); ++k) {
                    z[k] += p.row(f)[k];
                }
            }
            const auto o = oracle::softmax(z);
            for (std::size_t k = 0; k < z.size(); ++k) {
                EXPECT_NEAR(d[k], o[k], 1e-12);
            }
        }
    }
}

TEST(NextTokenDist, RejectsNonPositiveTemperature) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    EXPECT_THROW(next_token_dist(p, prompt_of("x"), {}, 0.0), InvalidInput);
    EXPECT_THROW(next_token_dist(p, prompt_of("x"), {}, -1.0), InvalidInput);
}

TEST(SampleGroup, NearDeterministicParamsGiveIdenticalCandidates) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    const auto& v = p.vocab();
    // SEP first, then 7, then EOS
    p.row(p.layout().prev_token(std::nullopt))[v.sep()] = 200.0;
    p.row(p.layout().prev_token(v.sep()))[7] = 200.0;
    p.row(p.layout().prev_token(7))[v.eos()] = 200.0;
    const auto g = sample_group(p, prompt_of("3+4=?"), 8, 0.6, 16, 5);
    for (const auto& c : g.candidates) {
        EXPECT_EQ(c.tokens, g.candidates[0].tokens);
    }
    EXPECT_EQ(extract_answer(v, g.candidates[0].tokens), CanonicalAnswer::from_text("7"));
}

TEST(SampleGroup, ZeroWeightsUniformWithinThreeSigma) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    const std::size_t v = p.vocab_size();
    std::vector<double> counts(v, 0.0);
    double draws = 0.0;
    Rng seeds(1);
    // L=1 makes every candidate a single draw from the first-step distribution
    while (draws < 100000.0) {
        const auto g = sample_group(p, prompt_of("z"), 100, 1.0, 1, seeds.next());
        for (const auto& c : g.candidates) {
            counts[c.tokens[0]] += 1.0;
            draws += 1.0;
        }
    }
    const double q = 1.0 / static_cast<double>(v);
    const double sigma = std::sqrt(draws * q * (1.0 - q));
    for (std::size_t k = 0; k < v; ++k) {
        EXPECT_LT(std::abs(counts[k] - draws * q), 3.0 * sigma) << "token " << k;
    }
}

TEST(SampleGroup, DeterministicPerSeedAndWellFormed) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    randomize(p, 2, 1.0);
    const auto a = sample_group(p, prompt_of("5+5=?"), 8, 0.6, 16, 99);
    const auto b = sample_group(p, prompt_of("5+5=?"), 8, 0.6, 16, 99);
    ASSERT_EQ(a.candidates.size(), 8u);
    for (std::size_t i = 0; i < a.candidates.size(); ++i) {
        EXPECT_EQ(a.candidates[i].tokens, b.candidates[i].tokens);
        EXPECT_EQ(a.candidates[i].logprobs, b.candidates[i].logprobs);
        const auto& c = a.candidates[i];
        EXPECT_LE(c.tokens.size(), 16u);
        EXPECT_EQ(c.tokens.size(), c.logprobs.size());
        EXPECT_EQ(c.truncated, c.tokens.back() != p.vocab().eos());
        for (double lp : c.logprobs) {
            EXPECT_LE(lp, 0.0);
        }
        // stored log-probs are temperature-1 values
        EXPECT_NEAR(sequence_logprob(p, a.prompt_hash, c.tokens),
                    std::accumulate(c.logprobs.begin(), c.logprobs.end(), 0.0), 1e-12);
    }
    EXPECT_THROW(sample_group(p, prompt_of("x"), 1, 0.6, 16, 0), InvalidInput);
}

TEST(LogProbGrad, BinarySymmetricCase) {
    PolicyParams p(binary_vocab(), {4, 2});
    const Sequence seq{0};
    const auto r = logprob_and_grad(p, prompt_hash("x"), seq);
    EXPECT_NEAR(r.logprob, std::log(0.5), 1e-15);
    const auto active = features(p.layout(), prompt_hash("x"), {}, 0);
    for (auto f : active) {
        EXPECT_DOUBLE_EQ(r.grad.at(f, 0), 0.5);
        EXPECT_DOUBLE_EQ(r.grad.at(f, 1), -0.5);
    }
}

TEST(LogProbGrad, MatchesCentralDifferencesOnRandomConfigs) {
    const double h = 1e-5;
    double worst = 0.0;
    Rng rng(2024);
    for (int c = 0; c < 100; ++c) {
        PolicyParams p(Vocabulary::standard(), {8, 4});
        randomize(p, rng.next(), 1.5);
        const auto hash = rng.next();
        const auto seq = random_sequence(rng, p.vocab(), 8);
        const auto r = logprob_and_grad(p, hash, seq);
        double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
        auto w = p.weights();
        const std::size_t v = p.vocab_size();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double keep = w[i];
            w[i] = keep + h;
            const double up = sequence_logprob(p, hash, seq);
            w[i] = keep - h;
            const double down = sequence_logprob(p, hash, seq);
            w[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = r.grad.at(static_cast<std::uint32_t>(i / v), i % v);
            max_diff = std::max(max_diff, std::abs(analytic - numeric));
            max_a = std::max(max_a, std::abs(analytic));
            max_n = std::max(max_n, std::abs(numeric));
        }
        worst = std::max(worst, max_diff / std::max({max_a, max_n, 1e-8}));
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(LogProbGrad, SaturatedTokenHasVanishingGradient) {
    PolicyParams p(binary_vocab(), {4, 2});
    p.row(p.layout().bias())[0] = 40.0;
    const auto r = logprob_and_grad(p, prompt_hash("x"), Sequence{0});
    EXPECT_LT(r.grad.max_abs(), 1e-6);
}

TEST(LogProbGrad, UnknownTokenRejected) {
    PolicyParams p(binary_vocab(), {4, 2});
    EXPECT_THROW(logprob_and_grad(p, 1, Sequence{5}), InvalidInput);
}

TEST(SelfCertainty, UniformIsExactlyZero) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    EXPECT_EQ(self_certainty(p, 5, Sequence{1, 2, 3}), 0.0);
}

TEST(SelfCertainty, BinaryClosedForm) {
    PolicyParams p(binary_vocab(), {4, 2});
    p.row(p.layout().bias())[0] = std::log(9.0);
    const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    EXPECT_NEAR(expected, 0.5 * std::log(25.0 / 9.0), 1e-15);
    EXPECT_NEAR(self_certainty(p, 3, Sequence{0, 0, 1}), expected, 1e-12);
    EXPECT_NEAR(self_certainty(p, 3, Sequence{0, 0, 1}), 0.51083, 1e-5);
    EXPECT_NEAR(self_certainty(p, 3, Sequence{0}), oracle::kl_uniform({0.9, 0.1}), 1e-12);
}

TEST(SelfCertainty, StrictlyIncreasingTowardOneHot) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    double prev = -1.0;
    for (int i = 0; i < 20; ++i) {
        p.row(p.layout().bias())[3] = 0.5 * i;
        const double s = self_certainty(p, 1, Sequence{3, 3});
        EXPECT_GE(s, 0.0);
        EXPECT_GT(s, prev);
        prev = s;
    }
}

TEST(SelfCertainty, EmptySequenceRejected) {
    PolicyParams p(Vocabulary::standard(), {8, 4});
    EXPECT_THROW(self_certainty(p, 1, Sequence{}), InvalidInput);
}

TEST(Pretrain, ZeroStepsIsIdentity) {
    PolicyParams p(Vocabulary::standard(), {64, 8});
    randomize(p, 4, 0.3);
    std::vector<LabeledExample> data{make_labeled(p.vocab(), generate_corpus(1, 1, 1)[0])};
    EXPECT_EQ(pretrain(p, data, {0, 0.5, 0, 0}), p);
}

TEST(Pretrain, LossWindowsNonIncreasing) {
    PolicyParams p(Vocabulary::standard(), {});
    std::vector<LabeledExample> data;
    for (const auto& t : generate_corpus(1, 100, 1001)) {
        data.push_back(make_labeled(p.vocab(), t));
    }
    std::vector<double> losses;
    const auto trained = pretrain(p, data, {200, 0.5, 0, 1001}, &losses);
    ASSERT_EQ(losses.size(), 200u);
    for (std::size_t t = 0; t + 50 < losses.size(); ++t) {
        EXPECT_LE(losses[t + 50], losses[t] * 1.05) << "window at " << t;
    }
    EXPECT_LT(supervised_loss(trained, data), supervised_loss(p, data));
}

TEST(Pretrain, StrongBaseGreedyBetterOnLevelOneThanFive) {
    PolicyParams p(Vocabulary::standard(), {});
    std::vector<LabeledExample> data;
    for (int level = 1; level <= 3; ++level) {
        for (const auto& t : generate_corpus(level, 100, 1001)) {
            data.push_back(make_labeled(p.vocab(), t));
        }
    }
    const auto strong = pretrain(p, data, {2000, 0.5, 0, 1001});
    auto greedy_acc = [&](int level) {
        double hits = 0.0;
        const auto c = generate_corpus(level, 100, 1001);
        for (const auto& t : c) {
            hits += extract_answer(strong.vocab(), greedy_decode(strong, t, 16)) ==
                            CanonicalAnswer::from_text(*t.gold_answer)
                        ? 1.0
                        : 0.0;
        }
        return hits / static_cast<double>(c.size());
    };
    EXPECT_GT(greedy_acc(1), greedy_acc(5));
}

TEST(Checkpoint, BitExactRoundTrip) {
    PolicyParams p(Vocabulary::standard(), {16, 4});
    Rng rng(8);
    for (auto& w : p.weights()) {
        // awkward magnitudes, subnormals and exact zeros
        const double u = rng.uniform();
        w = u < 0.1 ? 0.0 : u < 0.2 ? 4.9e-324 * static_cast<double>(rng.index(1000)) : (u - 0.5) * std::pow(10.0, rng.uniform_int(-300, 300));
    }
    p.seed = 123456789012345ULL;
    const auto back = checkpoint_from_json(checkpoint_to_json(p));
    EXPECT_EQ(back, p);
    for (std::size_t i = 0; i < p.weights().size(); ++i) {
        ASSERT_EQ(std::memcmp(&back.weights()[i], &p.weights()[i], sizeof(double)), 0) << i;
    }
    const auto path = std::filesystem::temp_directory_path() / "cuma_ckpt_test.json";
    write_checkpoint(path, p);
    EXPECT_EQ(read_checkpoint(path), p);
}

TEST(Checkpoint, ShapeMismatchRejected) {
    PolicyParams p(Vocabulary::standard(), {16, 4});
    auto text = checkpoint_to_json(p);
    const auto pos = text.find("\"hash_buckets\":16");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, 17, "\"hash_buckets\":17");
    EXPECT_THROW(checkpoint_from_json(text), InvalidInput);
}
