#pragma once

// Group Relative Policy Optimization over the feature-linear policy.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cuma/exec.hpp"
#include "cuma/policy.hpp"
#include "cuma/rewards.hpp"

namespace cuma {

struct AdvantageSet {
    std::vector<double> values;
};

inline constexpr double kDefaultEpsStd = 1e-8;

/// (r - mean) / (std + eps_std) with the population std; all zeros when std < eps_std.
AdvantageSet normalize_advantages(std::span<const double> rewards, double eps_std = kDefaultEpsStd);

enum class OptimizerKind { sgd, adamw };

struct TrainConfig {
    std::size_t candidates = kDefaultCandidates;
    double temperature = kDefaultTemperature;
    std::size_t max_length = kDefaultMaxLength;
    double peak_lr = 1.0;
    double clip_eps = 0.2;
    double kl_coef = 0.01;
    double eps_std = kDefaultEpsStd;
    std::size_t inner_epochs = 1;
    std::size_t batch_size = 16;
    std::size_t total_steps = 100;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;

    // Throws ConfigError naming the offending field.
    void validate() const;
};

/// Cosine decay from peak at step 0 to zero at step total.
double cosine_lr(double peak, std::size_t step, std::size_t total);

struct SurrogateResult {
    double loss = 0.0;
    GradTable grad;
    double kl = 0.0;          // mean per-context KL(current || ref)
    std::size_t contexts = 0;  // visited token positions
    std::size_t clipped = 0;   // tokens whose clipped branch was active
};

/// Clipped-ratio surrogate averaged over tokens then candidates, plus
/// kl_coef * exact per-step KL(current || ref) averaged over visited contexts.
SurrogateResult surrogate_loss(const PolicyParams& params, const RolloutGroup& old_group,
                               std::span<const double> advantages, const PolicyParams& ref_params, double clip_eps,
                               double kl_coef);

struct GroupBatchItem {
    const RolloutGroup* group = nullptr;
    const GroupSignal* signal = nullptr;
};

struct StepStats {
    std::size_t groups = 0;
    std::size_t masked = 0;
    double mean_reward = 0.0;
    double consensus_rate = 0.0;
    double kl_ref = 0.0;
    double lr = 0.0;
    double loss = 0.0;
    bool applied = false;
};

class Optimizer {
public:
    Optimizer(const TrainConfig& config, std::size_t parameter_count);

    // params -= lr * update_direction(grad)
    void step(PolicyParams& params, const GradTable& grad, double lr);

private:
    TrainConfig config_;
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

/// One optimizer step over a batch of sampled groups. Groups with keep == false
/// contribute nothing. When every group is masked, params are left untouched.
StepStats train_step(PolicyParams& params, std::span<const GroupBatchItem> batch, const TrainConfig& config,
                     const PolicyParams& ref_params, std::size_t step_index, Optimizer& optimizer,
                     Exec exec = Exec::serial);

/// Mean of the per-group surrogate gradients over kept groups (serial reference).
SurrogateResult batch_gradient(const PolicyParams& params, std::span<const GroupBatchItem> batch,
                               const TrainConfig& config, const PolicyParams& ref_params);

struct GradcheckReport {
    std::size_t cases = 0;
    double max_rel_error = 0.0;
    std::size_t worst_case = 0;
    std::size_t clipped_cases = 0;
    std::size_t kl_cases = 0;
    std::size_t zero_advantage_cases = 0;
    bool passed = false;

    std::string summary() const;
};

inline constexpr double kGradcheckTolerance = 1e-5;
inline constexpr double kGradcheckStep = 1e-5;

/// Random small surrogate configurations checked against central differences.
GradcheckReport gradcheck(std::uint64_t seed, std::size_t cases);

}  // namespace cuma
