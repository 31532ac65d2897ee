#include "cuma/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cuma/error.hpp"
#include "cuma/kernels.hpp"
#include "cuma/rng.hpp"

namespace cuma {

AdvantageSet normalize_advantages(std::span<const double> rewards, double eps_std) {
    if (rewards.size() < 2) {
        throw InvalidInput("advantage normalization needs at least two rewards");
    }
    const auto n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) {
        mean += r;
    }
    mean /= n;
    double var = 0.0;
    for (double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double sd = std::sqrt(var / n);
    AdvantageSet out{std::vector<double>(rewards.size(), 0.0)};
    if (sd < eps_std) {
        return out;
    }
    for (std::size_t j = 0; j < rewards.size(); ++j) {
        out.values[j] = (rewards[j] - mean) / (sd + eps_std);
    }
    return out;
}

void TrainConfig::validate() const {
    if (candidates < 2) {
        throw ConfigError("candidates", "must be at least 2");
    }
    if (!(temperature > 0.0)) {
        throw ConfigError("temperature", "must be positive");
    }
    if (max_length == 0) {
        throw ConfigError("max_length", "must be positive");
    }
    if (!(peak_lr > 0.0)) {
        throw ConfigError("lr", "must be positive");
    }
    if (!(clip_eps > 0.0)) {
        throw ConfigError("clip_eps", "must be positive");
    }
    if (kl_coef < 0.0) {
        throw ConfigError("kl_coef", "must be non-negative");
    }
    if (!(eps_std > 0.0)) {
        throw ConfigError("eps_std", "must be positive");
    }
    if (inner_epochs < 1) {
        throw ConfigError("inner_epochs", "must be at least 1");
    }
    if (batch_size < 1) {
        throw ConfigError("batch_size", "must be at least 1");
    }
    if (total_steps < 1) {
        throw ConfigError("total_steps", "must be at least 1");
    }
}

double cosine_lr(double peak, std::size_t step, std::size_t total) {
    if (total == 0) {
        return peak;
    }
    const double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

SurrogateResult surrogate_loss(const PolicyParams& params, const RolloutGroup& old_group,
                               std::span<const double> advantages, const PolicyParams& ref_params, double clip_eps,
                               double kl_coef) {
    if (advantages.size() != old_group.size()) {
        throw InvalidInput("advantage count must match the number of candidates");
    }
    const std::size_t v = params.vocab_size();
    const auto n = static_cast<double>(old_group.size());
    SurrogateResult out{0.0, GradTable(v), 0.0, 0, 0};

    std::size_t total_tokens = 0;
    for (const auto& c : old_group.candidates) {
        total_tokens += c.tokens.size();
    }
    if (total_tokens == 0) {
        return out;
    }
    const double kl_scale = kl_coef / static_cast<double>(total_tokens);

    std::array<double, kMaxVocab> z{}, p{}, zr{}, q{}, dz{};
    double kl_sum = 0.0;
    for (std::size_t j = 0; j < old_group.size(); ++j) {
        const auto& cand = old_group.candidates[j];
        const std::span<const TokenId> seq = cand.tokens;
        if (seq.empty()) {
            continue;
        }
        const double a = advantages[j];
        const double coef = 1.0 / (n * static_cast<double>(seq.size()));
        for (std::size_t t = 0; t < seq.size(); ++t) {
            const auto active = features(params.layout(), old_group.prompt_hash, seq.first(t), t);
            params.logits(active, z);
            const double lse = detail::softmax(std::span<const double>(z.data(), v), 1.0, p);
            const double logp = z[seq[t]] - lse;
            const double ratio = std::exp(logp - cand.logprobs[t]);
            const double unclipped = ratio * a;
            const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a;
            const bool use_unclipped = unclipped <= clipped;
            out.loss -= coef * std::min(unclipped, clipped);
            out.clipped += use_unclipped ? 0 : 1;

            const double g = use_unclipped ? -coef * a * ratio : 0.0;
            for (std::size_t k = 0; k < v; ++k) {
                dz[k] = g * ((k == seq[t] ? 1.0 : 0.0) - p[k]);
            }

            {
                ref_params.logits(active, zr);
                const double lse_r = detail::softmax(std::span<const double>(zr.data(), v), 1.0, q);
                double kl = 0.0;
                for (std::size_t k = 0; k < v; ++k) {
                    kl += p[k] * ((z[k] - lse) - (zr[k] - lse_r));
                }
                kl_sum += kl;
                out.loss += kl_scale * kl;
                // d KL / d z_k = p_k (log p_k - log q_k - KL)
                for (std::size_t k = 0; k < v; ++k) {
                    dz[k] += kl_scale * p[k] * ((z[k] - lse) - (zr[k] - lse_r) - kl);
                }
            }
            out.grad.add(active, std::span<const double>(dz.data(), v));
        }
    }
    out.contexts = total_tokens;
    out.kl = kl_sum / static_cast<double>(total_tokens);
    return out;
}

SurrogateResult batch_gradient(const PolicyParams& params, std::span<const GroupBatchItem> batch,
                               const TrainConfig& config, const PolicyParams& ref_params) {
    SurrogateResult total{0.0, GradTable(params.vocab_size()), 0.0, 0, 0};
    std::size_t kept = 0;
    for (const auto& item : batch) {
        if (!item.signal->keep) {
            continue;
        }
        const auto adv = normalize_advantages(item.signal->rewards, config.eps_std);
        auto r = surrogate_loss(params, *item.group, adv.values, ref_params, config.clip_eps, config.kl_coef);
        total.loss += r.loss;
        total.kl += r.kl;
        total.contexts += r.contexts;
        total.clipped += r.clipped;
        total.grad.merge(r.grad);
        ++kept;
    }
    if (kept > 0) {
        const double inv = 1.0 / static_cast<double>(kept);
        total.loss *= inv;
        total.kl *= inv;
        total.grad.scale(inv);
    }
    return total;
}

Optimizer::Optimizer(const TrainConfig& config, std::size_t parameter_count) : config_(config) {
    if (config.optimizer == OptimizerKind::adamw) {
        m_.assign(parameter_count, 0.0);
        v_.assign(parameter_count, 0.0);
    }
}

void Optimizer::step(PolicyParams& params, const GradTable& grad, double lr) {
    if (config_.optimizer == OptimizerKind::sgd) {
        apply_update(params, grad, -lr);
        return;
    }
    ++t_;
    const std::size_t vs = params.vocab_size();
    const double b1 = config_.adam_beta1;
    const double b2 = config_.adam_beta2;
    for (auto& m : m_) {
        m *= b1;
    }
    for (auto& v : v_) {
        v *= b2;
    }
    const auto feats = grad.features();
    for (std::size_t s = 0; s < feats.size(); ++s) {
        const auto row = grad.row_at(s);
        const std::size_t base = static_cast<std::size_t>(feats[s]) * vs;
        for (std::size_t k = 0; k < vs; ++k) {
            m_[base + k] += (1.0 - b1) * row[k];
            v_[base + k] += (1.0 - b2) * row[k] * row[k];
        }
    }
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto w = params.weights();
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= lr * (config_.weight_decay * w[i] + (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.adam_eps));
    }
}

StepStats train_step(PolicyParams& params, std::span<const GroupBatchItem> batch, const TrainConfig& config,
                     const PolicyParams& ref_params, std::size_t step_index, Optimizer& optimizer, Exec exec) {
    StepStats stats;
    stats.groups = batch.size();
    stats.lr = cosine_lr(config.peak_lr, step_index, config.total_steps);
    double reward_sum = 0.0;
    std::size_t reward_count = 0;
    for (const auto& item : batch) {
        stats.masked += item.signal->keep ? 0 : 1;
        for (double r : item.signal->rewards) {
            reward_sum += r;
        }
        reward_count += item.signal->rewards.size();
        stats.consensus_rate +=
            static_cast<double>(item.signal->consensus_count) / static_cast<double>(item.group->size());
    }
    if (reward_count > 0) {
        stats.mean_reward = reward_sum / static_cast<double>(reward_count);
    }
    if (!batch.empty()) {
        stats.consensus_rate /= static_cast<double>(batch.size());
    }
    if (stats.masked == stats.groups) {
        return stats;
    }
    for (std::size_t epoch = 0; epoch < config.inner_epochs; ++epoch) {
        auto g = exec == Exec::serial ? batch_gradient(params, batch, config, ref_params)
                                      : batch_gradient_parallel(params, batch, config, ref_params);
        if (epoch == 0) {
            stats.loss = g.loss;
            stats.kl_ref = g.kl;
        }
        optimizer.step(params, g.grad, stats.lr);
    }
    stats.applied = true;
    return stats;
}

// ----------------------------- gradient check -----------------------------

std::string GradcheckReport::summary() const {
    std::ostringstream s;
    s.precision(3);
    s << "gradcheck: " << cases << " cases, max relative error " << std::scientific << max_rel_error
      << " (case " << worst_case << "), clipped-branch cases " << clipped_cases << ", kl cases " << kl_cases
      << ", zero-advantage cases " << zero_advantage_cases << " -> " << (passed ? "PASS" : "FAIL");
    return s.str();
}

namespace {

double normal(Rng& rng) {
    // Box-Muller
    double u1 = rng.uniform();
    while (u1 <= 0.0) {
        u1 = rng.uniform();
    }
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * rng.uniform());
}

bool near_kink(const PolicyParams& params, const RolloutGroup& g, double eps) {
    const std::size_t v = params.vocab_size();
    std::array<double, kMaxVocab> z{}, p{};
    for (const auto& c : g.candidates) {
        for (std::size_t t = 0; t < c.tokens.size(); ++t) {
            const auto active = features(params.layout(), g.prompt_hash, std::span<const TokenId>(c.tokens).first(t), t);
            params.logits(active, z);
            const double lse = detail::softmax(std::span<const double>(z.data(), v), 1.0, p);
            const double ratio = std::exp(z[c.tokens[t]] - lse - c.logprobs[t]);
            if (std::abs(ratio - (1.0 - eps)) < 1e-3 || std::abs(ratio - (1.0 + eps)) < 1e-3) {
                return true;
            }
        }
    }
    return false;
}

}  // namespace

GradcheckReport gradcheck(std::uint64_t seed, std::size_t cases) {
    GradcheckReport report;
    report.cases = cases;
    const auto vocab = Vocabulary::standard();
    const FeatureConfig fc{8, 4};
    TaskInstance prompt{"gc", "", 1, std::nullopt, Source::generated};

    for (std::size_t c = 0; c < cases; ++c) {
        Rng rng(derive_seed(seed, {c}));
        PolicyParams current(vocab, fc);
        PolicyParams old(vocab, fc);
        PolicyParams ref(vocab, fc);
        const double scale = 0.3 + rng.uniform();
        for (auto& w : current.weights()) {
            w = scale * normal(rng);
        }
        const bool stale = c % 4 != 0;  // ratio != 1 in most cases
        for (std::size_t i = 0; i < current.weights().size(); ++i) {
            old.weights()[i] = current.weights()[i] + (stale ? 0.4 * normal(rng) : 0.0);
            ref.weights()[i] = current.weights()[i] + 0.5 * normal(rng);
        }
        const std::size_t n = 2 + rng.index(5);
        const std::size_t max_len = 1 + rng.index(8);
        const double eps = 0.1 + 0.2 * rng.uniform();
        const bool with_kl = c % 3 != 0;
        const double beta = with_kl ? 0.01 + rng.uniform() : 0.0;
        const bool zero_adv = c % 10 == 7;
        prompt.prompt = "gradcheck-" + std::to_string(c);

        RolloutGroup group;
        for (int attempt = 0;; ++attempt) {
            group = sample_group(old, prompt, n, 1.0, max_len, derive_seed(seed, {c, static_cast<std::uint64_t>(attempt)}));
            if (!near_kink(current, group, eps) || attempt > 50) {
                break;
            }
        }
        std::vector<double> adv(n, 0.0);
        if (!zero_adv) {
            for (auto& a : adv) {
                a = normal(rng);
            }
        }

        const auto analytic = surrogate_loss(current, group, adv, ref, eps, beta);
        report.clipped_cases += analytic.clipped > 0 ? 1 : 0;
        report.kl_cases += with_kl ? 1 : 0;
        report.zero_advantage_cases += zero_adv ? 1 : 0;

        double max_diff = 0.0;
        double max_mag = 0.0;
        PolicyParams probe = current;
        auto w = probe.weights();
        const std::size_t vs = probe.vocab_size();
        for (std::size_t f = 0; f < probe.feature_count(); ++f) {
            for (std::size_t k = 0; k < vs; ++k) {
                const std::size_t i = f * vs + k;
                const double orig = w[i];
                w[i] = orig + kGradcheckStep;
                const double up = surrogate_loss(probe, group, adv, ref, eps, beta).loss;
                w[i] = orig - kGradcheckStep;
                const double down = surrogate_loss(probe, group, adv, ref, eps, beta).loss;
                w[i] = orig;
                const double numeric = (up - down) / (2.0 * kGradcheckStep);
                const double a = analytic.grad.at(static_cast<std::uint32_t>(f), k);
                max_diff = std::max(max_diff, std::abs(a - numeric));
                max_mag = std::max({max_mag, std::abs(a), std::abs(numeric)});
            }
        }
        const double rel = max_diff / std::max(max_mag, 1e-8);
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_case = c;
        }
    }
    report.passed = report.max_rel_error < kGradcheckTolerance;
    return report;
}

}  // namespace cuma
