#pragma once

// Answer extraction and the per-group reward signals: majority vote with the
// no-consensus keep-mask, verifier rewards, and self-certainty rewards.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cuma/policy.hpp"

namespace cuma {

class CanonicalAnswer {
public:
    static CanonicalAnswer none() { return CanonicalAnswer(); }
    // Canonicalizes `text`; an empty result becomes NO_ANSWER.
    static CanonicalAnswer from_text(std::string_view text);

    bool has_value() const noexcept { return value_.has_value(); }
    const std::string& text() const { return *value_; }
    std::string str() const { return value_ ? *value_ : std::string("<NO_ANSWER>"); }

    bool operator==(const CanonicalAnswer&) const = default;

private:
    std::optional<std::string> value_;
};

/// Tokens strictly after the last SEP and before EOS, canonicalized.
CanonicalAnswer extract_answer(const Vocabulary& vocab, std::span<const TokenId> seq);

struct MajorityResult {
    CanonicalAnswer majority;  // NO_ANSWER when every entry is NO_ANSWER
    int consensus_count = 0;
};

/// Mode of the answers, ignoring NO_ANSWER. Ties go to the lowest first-occurrence index.
MajorityResult majority_vote(std::span<const CanonicalAnswer> answers);

struct GroupSignal {
    std::vector<double> rewards;
    bool keep = true;
    std::optional<CanonicalAnswer> majority;
    int consensus_count = 0;

    bool operator==(const GroupSignal&) const = default;
};

inline constexpr int kMaskThreshold = 2;

GroupSignal vote_rewards(std::span<const CanonicalAnswer> answers);
GroupSignal verifier_rewards(std::span<const CanonicalAnswer> answers, const std::optional<CanonicalAnswer>& gold);
GroupSignal intuitor_rewards(const RolloutGroup& group, const PolicyParams& params);

enum class RewardStrategy { verifier, ttrl, intuitor, cuma };

std::string_view to_string(RewardStrategy s);
std::optional<RewardStrategy> parse_strategy(std::string_view s);
bool is_label_free(RewardStrategy s) noexcept;

struct SignalOptions {
    // TTRL: a mode below this count yields all-zero rewards.
    int ttrl_mode_min_count = 1;
    // Ablation: ignore the keep-mask for cuma.
    bool disable_mask = false;
};

std::vector<CanonicalAnswer> extract_answers(const Vocabulary& vocab, const RolloutGroup& group);

/// Strategy dispatch. Label-free strategies never look at `gold`.
GroupSignal compute_signal(RewardStrategy strategy, const RolloutGroup& group, const PolicyParams& params,
                           const std::optional<std::string>& gold, const SignalOptions& options = {});

}  // namespace cuma
