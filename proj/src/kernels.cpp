#include "cuma/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <optional>

#include "cuma/rng.hpp"

namespace cuma {

void set_num_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) {
        omp_set_num_threads(threads);
    }
#else
    (void)threads;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

std::vector<RolloutGroup> sample_batch(const PolicyParams& params, std::span<const TaskInstance> prompts,
                                       std::size_t n, double temperature, std::size_t max_length, std::uint64_t seed,
                                       std::size_t step, Exec exec) {
    std::vector<RolloutGroup> groups(prompts.size());
    const auto count = static_cast<std::ptrdiff_t>(prompts.size());
    auto one = [&](std::ptrdiff_t i) {
        const auto idx = static_cast<std::size_t>(i);
        groups[idx] = sample_group(params, prompts[idx], n, temperature, max_length,
                                   derive_seed(seed, {0x5A3B1EULL, step, idx}));
    };
    if (exec == Exec::serial) {
        for (std::ptrdiff_t i = 0; i < count; ++i) {
            one(i);
        }
    } else {
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t i = 0; i < count; ++i) {
            one(i);
        }
    }
    return groups;
}

SurrogateResult batch_gradient_parallel(const PolicyParams& params, std::span<const GroupBatchItem> batch,
                                        const TrainConfig& config, const PolicyParams& ref_params) {
    const auto count = static_cast<std::ptrdiff_t>(batch.size());
    std::vector<std::optional<SurrogateResult>> parts(batch.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
        const auto& item = batch[static_cast<std::size_t>(i)];
        if (!item.signal->keep) {
            continue;
        }
        const auto adv = normalize_advantages(item.signal->rewards, config.eps_std);
        parts[static_cast<std::size_t>(i)] =
            surrogate_loss(params, *item.group, adv.values, ref_params, config.clip_eps, config.kl_coef);
    }

    // fixed-order reduction, identical to the serial reference
    SurrogateResult total{0.0, GradTable(params.vocab_size()), 0.0, 0, 0};
    std::size_t kept = 0;
    for (auto& r : parts) {
        if (!r) {
            continue;
        }
        total.loss += r->loss;
        total.kl += r->kl;
        total.contexts += r->contexts;
        total.clipped += r->clipped;
        total.grad.merge(r->grad);
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

std::vector<double> group_self_certainty(const PolicyParams& params, std::span<const RolloutGroup> groups,
                                         Exec exec) {
    std::vector<double> out(groups.size(), 0.0);
    const auto count = static_cast<std::ptrdiff_t>(groups.size());
    auto one = [&](std::ptrdiff_t i) {
        const auto& g = groups[static_cast<std::size_t>(i)];
        double s = 0.0;
        for (const auto& c : g.candidates) {
            s += c.tokens.empty() ? 0.0 : self_certainty(params, g.prompt_hash, c.tokens);
        }
        out[static_cast<std::size_t>(i)] = s / static_cast<double>(g.size());
    };
    if (exec == Exec::serial) {
        for (std::ptrdiff_t i = 0; i < count; ++i) {
            one(i);
        }
    } else {
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t i = 0; i < count; ++i) {
            one(i);
        }
    }
    return out;
}

}  // namespace cuma
