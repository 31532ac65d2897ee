#include "cuma/rewards.hpp"

#include <cctype>

#include "cuma/error.hpp"

namespace cuma {

CanonicalAnswer CanonicalAnswer::from_text(std::string_view text) {
    std::string s;
    for (char c : text) {
        if (!std::isspace(static_cast<unsigned char>(c))) {
            s += c;
        }
    }
    // Unicode minus sign (U+2212) is treated like '-'.
    for (auto pos = s.find("\xE2\x88\x92"); pos != std::string::npos; pos = s.find("\xE2\x88\x92")) {
        s.replace(pos, 3, "-");
    }
    bool negative = false;
    std::size_t i = 0;
    while (i < s.size() && (s[i] == '+' || s[i] == '-')) {
        negative ^= s[i] == '-';
        ++i;
    }
    std::string body = s.substr(i);
    const bool numeric = !body.empty() && body.find_first_not_of("0123456789") == std::string::npos;
    CanonicalAnswer a;
    if (numeric) {
        const auto nz = body.find_first_not_of('0');
        body = nz == std::string::npos ? "0" : body.substr(nz);
        if (body == "0") {
            negative = false;
        }
        a.value_ = (negative ? "-" : "") + body;
    } else if (!s.empty()) {
        // Non-integer text: only whitespace is normalized.
        a.value_ = s;
    }
    if (i > 0 && body.empty()) {
        // a bare sign is not an answer
        a.value_.reset();
    }
    return a;
}

CanonicalAnswer extract_answer(const Vocabulary& vocab, std::span<const TokenId> seq) {
    std::size_t last_sep = seq.size();
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] == vocab.sep()) {
            last_sep = i;
        }
    }
    if (last_sep == seq.size()) {
        return CanonicalAnswer::none();
    }
    std::string text;
    for (std::size_t i = last_sep + 1; i < seq.size() && seq[i] != vocab.eos(); ++i) {
        text += vocab.token(seq[i]);
    }
    return CanonicalAnswer::from_text(text);
}

MajorityResult majority_vote(std::span<const CanonicalAnswer> answers) {
    MajorityResult best;
    // O(N^2) is fine for group sizes in the tens; first occurrence wins ties
    for (std::size_t j = 0; j < answers.size(); ++j) {
        if (!answers[j].has_value()) {
            continue;
        }
        bool seen_before = false;
        for (std::size_t k = 0; k < j && !seen_before; ++k) {
            seen_before = answers[k] == answers[j];
        }
        if (seen_before) {
            continue;
        }
        int count = 0;
        for (std::size_t k = j; k < answers.size(); ++k) {
            count += answers[k] == answers[j] ? 1 : 0;
        }
        if (count > best.consensus_count) {
            best.consensus_count = count;
            best.majority = answers[j];
        }
    }
    return best;
}

GroupSignal vote_rewards(std::span<const CanonicalAnswer> answers) {
    if (answers.size() < 2) {
        throw InvalidInput("vote rewards need at least two candidates");
    }
    const auto mv = majority_vote(answers);
    GroupSignal sig;
    sig.consensus_count = mv.consensus_count;
    sig.keep = mv.consensus_count >= kMaskThreshold;
    if (mv.majority.has_value()) {
        sig.majority = mv.majority;
    }
    sig.rewards.resize(answers.size(), 0.0);
    for (std::size_t j = 0; j < answers.size(); ++j) {
        if (answers[j].has_value() && answers[j] == mv.majority) {
            sig.rewards[j] = 1.0;
        }
    }
    return sig;
}

GroupSignal verifier_rewards(std::span<const CanonicalAnswer> answers, const std::optional<CanonicalAnswer>& gold) {
    if (!gold || !gold->has_value()) {
        throw InvalidInput("verifier rewards need a gold answer");
    }
    GroupSignal sig;
    sig.keep = true;
    sig.rewards.resize(answers.size(), 0.0);
    const auto mv = majority_vote(answers);
    sig.consensus_count = mv.consensus_count;
    if (mv.majority.has_value()) {
        sig.majority = mv.majority;
    }
    for (std::size_t j = 0; j < answers.size(); ++j) {
        sig.rewards[j] = answers[j].has_value() && answers[j] == *gold ? 1.0 : 0.0;
    }
    return sig;
}

GroupSignal intuitor_rewards(const RolloutGroup& group, const PolicyParams& params) {
    if (group.size() < 2) {
        throw InvalidInput("intuitor rewards need at least two candidates");
    }
    GroupSignal sig;
    sig.keep = true;
    sig.rewards.reserve(group.size());
    for (const auto& c : group.candidates) {
        sig.rewards.push_back(c.tokens.empty() ? 0.0 : self_certainty(params, group.prompt_hash, c.tokens));
    }
    const auto mv = majority_vote(extract_answers(params.vocab(), group));
    sig.consensus_count = mv.consensus_count;
    if (mv.majority.has_value()) {
        sig.majority = mv.majority;
    }
    return sig;
}

std::string_view to_string(RewardStrategy s) {
    switch (s) {
        case RewardStrategy::verifier:
            return "verifier";
        case RewardStrategy::ttrl:
            return "ttrl";
        case RewardStrategy::intuitor:
            return "intuitor";
        case RewardStrategy::cuma:
            return "cuma";
    }
    return "cuma";
}

std::optional<RewardStrategy> parse_strategy(std::string_view s) {
    for (auto k : {RewardStrategy::verifier, RewardStrategy::ttrl, RewardStrategy::intuitor, RewardStrategy::cuma}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    return std::nullopt;
}

bool is_label_free(RewardStrategy s) noexcept { return s != RewardStrategy::verifier; }

std::vector<CanonicalAnswer> extract_answers(const Vocabulary& vocab, const RolloutGroup& group) {
    std::vector<CanonicalAnswer> out;
    out.reserve(group.size());
    for (const auto& c : group.candidates) {
        out.push_back(extract_answer(vocab, c.tokens));
    }
    return out;
}

GroupSignal compute_signal(RewardStrategy strategy, const RolloutGroup& group, const PolicyParams& params,
                           const std::optional<std::string>& gold, const SignalOptions& options) {
    switch (strategy) {
        case RewardStrategy::verifier: {
            if (!gold) {
                throw InvalidInput("verifier strategy needs a gold answer for prompt '" + group.prompt_id + "'");
            }
            return verifier_rewards(extract_answers(params.vocab(), group), CanonicalAnswer::from_text(*gold));
        }
        case RewardStrategy::ttrl: {
            auto sig = vote_rewards(extract_answers(params.vocab(), group));
            sig.keep = true;
            if (sig.consensus_count < options.ttrl_mode_min_count) {
                std::fill(sig.rewards.begin(), sig.rewards.end(), 0.0);
            }
            return sig;
        }
        case RewardStrategy::intuitor:
            return intuitor_rewards(group, params);
        case RewardStrategy::cuma: {
            auto sig = vote_rewards(extract_answers(params.vocab(), group));
            if (options.disable_mask) {
                sig.keep = true;
            }
            return sig;
        }
    }
    throw InvalidInput("unknown reward strategy");
}

}  // namespace cuma
