#pragma once

// Autoregressive feature-linear softmax policy over a small token vocabulary.
//
// The logit vector at a decoding position is the sum of the weight rows of
// five active features: a bias, the previous token, the position bucket, the
// prompt-hash bucket and the prompt-hash x position-bucket cross. Everything
// is linear in the weights, so log-probabilities, their gradients and the
// per-step KL terms are exact.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cuma/corpus.hpp"

namespace cuma {

using TokenId = std::uint8_t;
using Sequence = std::vector<TokenId>;

inline constexpr std::size_t kMaxVocab = 32;

class Vocabulary {
public:
    // Digits 0-9, "-", "+", SEP, EOS.
    static Vocabulary standard();
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    std::size_t size() const noexcept { return tokens_.size(); }
    TokenId sep() const noexcept { return sep_; }
    TokenId eos() const noexcept { return eos_; }
    std::optional<TokenId> find(std::string_view token) const;
    const std::string& token(TokenId id) const { return tokens_.at(id); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    /// SEP, answer characters, EOS. Throws InvalidInput for characters outside the vocabulary.
    Sequence encode_answer(std::string_view answer) const;
    std::string render(std::span<const TokenId> seq) const;

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<std::string> tokens_;
    TokenId sep_ = 0;
    TokenId eos_ = 0;
};

struct FeatureConfig {
    std::uint32_t hash_buckets = 4096;
    std::uint32_t position_buckets = 8;

    bool operator==(const FeatureConfig&) const = default;
};

// Feature-index layout: [bias | prev token (V + start) | position | prompt hash | hash x position].
class FeatureLayout {
public:
    FeatureLayout(const FeatureConfig& config, std::size_t vocab_size);

    std::uint32_t bias() const noexcept { return 0; }
    // prev == std::nullopt marks the start of the sequence.
    std::uint32_t prev_token(std::optional<TokenId> prev) const noexcept;
    std::uint32_t position(std::size_t t) const noexcept;
    std::uint32_t prompt(std::uint64_t prompt_hash) const noexcept;
    std::uint32_t cross(std::uint64_t prompt_hash, std::size_t t) const noexcept;
    std::uint32_t count() const noexcept { return count_; }
    std::uint32_t position_bucket(std::size_t t) const noexcept;

private:
    FeatureConfig config_;
    std::uint32_t vocab_size_;
    std::uint32_t prev_base_, pos_base_, prompt_base_, cross_base_, count_;
};

using ActiveFeatures = std::array<std::uint32_t, 5>;

// FNV-1a over the prompt bytes.
std::uint64_t prompt_hash(std::string_view prompt) noexcept;

class PolicyParams {
public:
    PolicyParams(Vocabulary vocab, FeatureConfig config);

    const Vocabulary& vocab() const noexcept { return vocab_; }
    const FeatureConfig& feature_config() const noexcept { return config_; }
    const FeatureLayout& layout() const noexcept { return layout_; }
    std::size_t vocab_size() const noexcept { return vocab_.size(); }
    std::size_t feature_count() const noexcept { return layout_.count(); }

    std::span<double> row(std::uint32_t feature) {
        return {weights_.data() + static_cast<std::size_t>(feature) * vocab_.size(), vocab_.size()};
    }
    std::span<const double> row(std::uint32_t feature) const {
        return {weights_.data() + static_cast<std::size_t>(feature) * vocab_.size(), vocab_.size()};
    }
    std::span<double> weights() noexcept { return weights_; }
    std::span<const double> weights() const noexcept { return weights_; }

    // Raw (temperature-1) logits for one context.
    void logits(const ActiveFeatures& active, std::span<double> out) const;

    std::uint64_t seed = 0;
    std::string version = "cuma-policy-1";

    bool operator==(const PolicyParams& o) const {
        return vocab_ == o.vocab_ && config_ == o.config_ && weights_ == o.weights_;
    }

private:
    Vocabulary vocab_;
    FeatureConfig config_;
    FeatureLayout layout_;
    std::vector<double> weights_;
};

/// Sparse F x V table: only rows for features that were active somewhere are stored.
class GradTable {
public:
    explicit GradTable(std::size_t vocab_size) : vocab_size_(vocab_size) {}

    std::size_t vocab_size() const noexcept { return vocab_size_; }
    std::size_t rows() const noexcept { return features_.size(); }
    bool empty() const noexcept { return features_.empty(); }

    std::span<double> row(std::uint32_t feature);
    // Zero when the feature has no stored row.
    double at(std::uint32_t feature, std::size_t token) const;

    void add(const ActiveFeatures& active, std::span<const double> delta);
    // this += scale * other, visiting other's rows in insertion order.
    void merge(const GradTable& other, double scale = 1.0);
    void scale(double factor);

    std::span<const std::uint32_t> features() const noexcept { return features_; }
    std::span<const double> row_at(std::size_t slot) const {
        return {values_.data() + slot * vocab_size_, vocab_size_};
    }

    double max_abs() const;

private:
    std::size_t vocab_size_;
    std::vector<std::uint32_t> features_;
    std::vector<double> values_;
    std::unordered_map<std::uint32_t, std::size_t> slot_;
};

// params += scale * grad
void apply_update(PolicyParams& params, const GradTable& grad, double scale);

ActiveFeatures features(const FeatureLayout& layout, std::uint64_t prompt_hash, std::span<const TokenId> prefix,
                        std::size_t t);
ActiveFeatures features(const PolicyParams& params, const TaskInstance& prompt, std::span<const TokenId> prefix,
                        std::size_t t);

std::vector<double> next_token_dist(const PolicyParams& params, const TaskInstance& prompt,
                                    std::span<const TokenId> prefix, double temperature);

struct Candidate {
    Sequence tokens;
    // Temperature-1 log-probabilities of each sampled token under the sampling-time parameters.
    std::vector<double> logprobs;
    bool truncated = false;
};

struct RolloutGroup {
    std::string prompt_id;
    std::uint64_t prompt_hash = 0;
    double temperature = 1.0;
    std::vector<Candidate> candidates;

    std::size_t size() const noexcept { return candidates.size(); }
};

inline constexpr std::size_t kDefaultCandidates = 8;
inline constexpr double kDefaultTemperature = 0.6;
inline constexpr std::size_t kDefaultMaxLength = 16;

RolloutGroup sample_group(const PolicyParams& params, const TaskInstance& prompt, std::size_t n, double temperature,
                          std::size_t max_length, std::uint64_t seed);

Sequence greedy_decode(const PolicyParams& params, const TaskInstance& prompt, std::size_t max_length);

struct LogProbGrad {
    double logprob = 0.0;
    GradTable grad;
};

/// Temperature-1 sequence log-probability and its exact gradient.
LogProbGrad logprob_and_grad(const PolicyParams& params, std::uint64_t prompt_hash, std::span<const TokenId> seq);
LogProbGrad logprob_and_grad(const PolicyParams& params, const TaskInstance& prompt, std::span<const TokenId> seq);
double sequence_logprob(const PolicyParams& params, std::uint64_t prompt_hash, std::span<const TokenId> seq);

/// Mean over steps of KL(uniform || p_t) at temperature 1.
double self_certainty(const PolicyParams& params, std::uint64_t prompt_hash, std::span<const TokenId> seq);
double self_certainty(const PolicyParams& params, const TaskInstance& prompt, std::span<const TokenId> seq);

struct LabeledExample {
    std::uint64_t prompt_hash = 0;
    Sequence target;
};

LabeledExample make_labeled(const Vocabulary& vocab, const TaskInstance& instance);

struct PretrainOptions {
    std::size_t steps = 0;
    double lr = 0.5;
    // 0 = full batch.
    std::size_t batch_size = 0;
    std::uint64_t seed = 0;
};

/// Supervised cross-entropy gradient descent. `loss_log`, when given, receives the
/// mean per-example loss measured before each step.
PolicyParams pretrain(PolicyParams params, std::span<const LabeledExample> data, const PretrainOptions& options,
                      std::vector<double>* loss_log = nullptr);

double supervised_loss(const PolicyParams& params, std::span<const LabeledExample> data);

std::string checkpoint_to_json(const PolicyParams& params);
PolicyParams checkpoint_from_json(std::string_view text);
void write_checkpoint(const std::filesystem::path& path, const PolicyParams& params);
PolicyParams read_checkpoint(const std::filesystem::path& path);

namespace detail {
// In-place softmax of `z / temperature`; returns log-sum-exp of the scaled logits.
double softmax(std::span<const double> z, double temperature, std::span<double> out);
}  // namespace detail

}  // namespace cuma
