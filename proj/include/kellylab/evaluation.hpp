#pragma once

// Episode rollouts of fixed policies and the growth/MAD/bankruptcy summary.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <vector>

#include "kellylab/env.hpp"
#include "kellylab/random.hpp"

namespace kellylab {

/// Anything that can pick target weights from the environment's current state.
template <class P>
concept EpisodePolicy = requires(P p, const PortfolioEnv& env) {
    p.begin_episode(env);
    { p.act(env) } -> std::convertible_to<VectorXd>;
};

inline double mean_absolute_deviation(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double mad = 0.0;
    for (double x : xs) mad += std::abs(x - mean);
    return mad / static_cast<double>(xs.size());
}

struct EpisodeOutcome {
    std::optional<double> growth;  ///< empty when bankrupt
    bool bankrupt = false;
};

struct EvalStats {
    int episodes = 0;
    int bankruptcies = 0;
    std::vector<std::optional<double>> growths;  ///< per episode, in seed order

    std::vector<double> valid_growths() const {
        std::vector<double> out;
        for (const auto& g : growths)
            if (g) out.push_back(*g);
        return out;
    }
    /// Undefined when every episode went bankrupt.
    std::optional<double> mean_growth() const {
        const auto v = valid_growths();
        if (v.empty()) return std::nullopt;
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    }
    std::optional<double> mad() const {
        const auto v = valid_growths();
        if (v.empty()) return std::nullopt;
        return mean_absolute_deviation(v);
    }
};

inline std::uint64_t episode_seed(std::uint64_t master, std::uint64_t episode) { return derive_seed(master, episode); }

template <EpisodePolicy P>
EpisodeOutcome run_episode(PortfolioEnv& env, P& policy, std::uint64_t seed) {
    env.reset(seed);
    policy.begin_episode(env);
    double total = 0.0;
    bool bankrupt = false;
    while (!env.done()) {
        const StepResult r = env.step(policy.act(env));
        total += r.reward;
        bankrupt = r.info.bankrupt;
    }
    EpisodeOutcome out;
    out.bankrupt = bankrupt;
    if (!bankrupt) out.growth = total / env.config().horizon_years;
    return out;
}

/// Episode i uses seed episode_seed(seed, i), so two policies evaluated with the
/// same seed face identical market paths.
template <EpisodePolicy P>
EvalStats evaluate_policy(P policy, const EnvConfig& config, int n_episodes, std::uint64_t seed) {
    PortfolioEnv env(config);
    EvalStats stats;
    stats.episodes = n_episodes;
    for (int i = 0; i < n_episodes; ++i) {
        const EpisodeOutcome o = run_episode(env, policy, episode_seed(seed, static_cast<std::uint64_t>(i)));
        stats.growths.push_back(o.growth);
        if (o.bankrupt) ++stats.bankruptcies;
    }
    return stats;
}

} // namespace kellylab
