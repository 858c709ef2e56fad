#pragma once

// Rollout collection, the update loop, deterministic evaluation and the training log.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kellylab/env.hpp"
#include "kellylab/error.hpp"
#include "kellylab/evaluation.hpp"
#include "kellylab/hmm.hpp"
#include "kellylab/nn.hpp"
#include "kellylab/onpolicy.hpp"
#include "kellylab/parallel.hpp"
#include "kellylab/policy.hpp"
#include "kellylab/random.hpp"

namespace kellylab {

/// Summary of one finished training episode.
struct TrainingRecord {
    Index episode = 0;
    long long steps = 0;         ///< environment steps taken so far, this episode included
    VectorXd mean_weights;       ///< cash first, then one per asset
    VectorXd mad_weights;        ///< within-episode mean absolute deviation, same layout
    std::optional<double> growth;
    bool bankrupt = false;
    double clip_fraction = std::numeric_limits<double>::quiet_NaN();  ///< latest update; NaN before the first
    double approx_kl = std::numeric_limits<double>::quiet_NaN();
};

struct TrainingLog {
    std::vector<TrainingRecord> episodes;
    std::vector<UpdateDiagnostics> updates;
};

/// Regime-context options for a context network: the HMM is fitted once on the
/// first `fit_episodes` training episodes and then frozen. Until then the
/// context is regime 0.
struct ContextSettings {
    HmmFitConfig hmm;
    int fit_episodes = 10;
};

struct TrainResult {
    ActorCritic net;
    TrainingLog log;
    std::optional<GaussianHmmModel> hmm;
    long long steps = 0;
};

namespace detail {

struct EpisodeAccumulator {
    std::vector<VectorXd> weights;
    std::vector<double> rewards;
    std::vector<VectorXd> prices;

    void clear() {
        weights.clear();
        rewards.clear();
        prices.clear();
    }
};

inline VectorXd with_cash_weight(const VectorXd& stocks) {
    VectorXd w(stocks.size() + 1);
    w[0] = 1.0 - stocks.sum();
    w.tail(stocks.size()) = stocks;
    return w;
}

inline TrainingRecord summarise_episode(const EpisodeAccumulator& acc, Index episode, long long steps, bool bankrupt,
                                        double horizon_years) {
    TrainingRecord rec;
    rec.episode = episode;
    rec.steps = steps;
    rec.bankrupt = bankrupt;
    rec.growth = episode_growth_rate(acc.rewards, horizon_years, bankrupt);
    const Index d = acc.weights.front().size();
    rec.mean_weights = VectorXd::Zero(d);
    for (const auto& w : acc.weights) rec.mean_weights += w;
    rec.mean_weights /= static_cast<double>(acc.weights.size());
    rec.mad_weights = VectorXd::Zero(d);
    for (const auto& w : acc.weights) rec.mad_weights += (w - rec.mean_weights).cwiseAbs();
    rec.mad_weights /= static_cast<double>(acc.weights.size());
    return rec;
}

inline MatrixXd stack_rows(const std::vector<VectorXd>& rows) {
    MatrixXd m(static_cast<Index>(rows.size()), rows.empty() ? 0 : rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i].transpose();
    return m;
}

/// Context label from the env's observed return window; 0 when no model is available.
inline int current_context(const PortfolioEnv& env, const GaussianHmmModel* hmm) {
    if (!hmm) return 0;
    const MatrixXd window = env.log_return_window();
    if (window.rows() < 1) return 0;
    return predict_current(*hmm, window);
}

} // namespace detail

/// Trains `net` in place of a copy and returns it with the log.
///
/// Only whole rollouts are collected, so the step count is total_steps rounded up
/// to a multiple of rollout_steps. Episode k runs on market seed
/// episode_seed(derive_seed(seed, 0), k); action noise and minibatch shuffling use
/// their own streams of `seed`. Throws NumericalError if an update is aborted.
/// `on_episode` sees every record as it is logged.
inline TrainResult train(const EnvConfig& env_config, ActorCritic net, const TrainConfig& cfg, std::uint64_t seed,
                         const ContextSettings* context = nullptr,
                         const std::function<void(const TrainingRecord&)>& on_episode = {}) {
    cfg.validate();
    if (net.spec().obs_dim != env_config.observation_dim() || net.spec().act_dim != env_config.n_assets())
        throw ConfigError("train: network dimensions do not match the environment");
    const bool use_context = net.spec().has_context();
    if (use_context && !context) throw ConfigError("train: a context network needs HMM settings");
    if (use_context) {
        context->hmm.validate();
        if (context->hmm.n_states != net.spec().context_dim)
            throw ConfigError("train: hmm n_states must equal the network's context size");
        if (context->fit_episodes < 1) throw ConfigError("train: fit_episodes must be >= 1");
    }

    PortfolioEnv env(env_config);
    Rng policy_rng = Rng::stream(seed, 1);
    Rng shuffle_rng = Rng::stream(seed, 2);
    const std::uint64_t market_seed = derive_seed(seed, 0);
    nn::Adam adam(net.parameter_count(), nn::AdamConfig{cfg.learning_rate});

    TrainResult result;
    RolloutBuffer buffer(cfg.rollout_steps, env_config.observation_dim(), env_config.n_assets());
    const long long rollouts = (cfg.total_steps + cfg.rollout_steps - 1) / cfg.rollout_steps;

    Index episode = 0;
    Observation obs = env.reset(episode_seed(market_seed, 0));
    detail::EpisodeAccumulator acc;
    acc.prices.push_back(env.prices());
    std::vector<MatrixXd> hmm_sequences;
    const Index min_rows = use_context ? static_cast<Index>(10 * context->hmm.n_states) : 0;
    double last_clip = std::numeric_limits<double>::quiet_NaN();
    double last_kl = std::numeric_limits<double>::quiet_NaN();

    for (long long u = 0; u < rollouts; ++u) {
        buffer.clear();
        bool last_done = false;
        while (!buffer.full()) {
            const GaussianHmmModel* hmm = result.hmm ? &*result.hmm : nullptr;
            const int ctx = use_context ? detail::current_context(env, hmm) : 0;
            const ActionSample a = sample_action(net, obs.features, ctx, policy_rng, false);
            const StepResult r = env.step(a.action);
            ++result.steps;
            buffer.add(obs.features, ctx, a.action, a.log_prob, r.reward, a.value, r.done);
            acc.weights.push_back(detail::with_cash_weight(a.action));
            acc.rewards.push_back(r.reward);
            if (use_context && !result.hmm) acc.prices.push_back(env.prices());
            obs = r.observation;
            last_done = r.done;
            if (!r.done) continue;

            TrainingRecord rec = detail::summarise_episode(acc, episode, result.steps, r.info.bankrupt,
                                                           env_config.horizon_years);
            rec.clip_fraction = last_clip;
            rec.approx_kl = last_kl;
            if (on_episode) on_episode(rec);
            result.log.episodes.push_back(std::move(rec));

            if (use_context && !result.hmm) {
                MatrixXd seq = log_returns(detail::stack_rows(acc.prices));
                if (seq.rows() >= min_rows) hmm_sequences.push_back(std::move(seq));
                if (static_cast<int>(hmm_sequences.size()) == context->fit_episodes)
                    result.hmm = fit_hmm(hmm_sequences, context->hmm, derive_seed(seed, 3)).model;
            }
            ++episode;
            acc.clear();
            obs = env.reset(episode_seed(market_seed, static_cast<std::uint64_t>(episode)));
            acc.prices.push_back(env.prices());
        }

        double bootstrap = 0.0;
        if (!last_done) {
            const GaussianHmmModel* hmm = result.hmm ? &*result.hmm : nullptr;
            const int ctx = use_context ? detail::current_context(env, hmm) : 0;
            bootstrap = sample_action(net, obs.features, ctx, policy_rng, true).value;
        }
        buffer.compute_advantages(bootstrap, cfg.discount, cfg.gae_lambda);

        UpdateDiagnostics d = cfg.algo == Algo::ppo ? ppo_update(net, adam, buffer, cfg, shuffle_rng)
                                                    : a2c_update(net, adam, buffer, cfg);
        if (d.aborted) throw NumericalError("train: update " + std::to_string(u) + " aborted: " + d.message);
        last_clip = d.clip_fraction;
        last_kl = d.approx_kl;
        result.log.updates.push_back(std::move(d));
    }
    result.net = std::move(net);
    return result;
}

/// Deterministic network policy for evaluation.
class NetPolicy {
public:
    explicit NetPolicy(const ActorCritic& net, const GaussianHmmModel* hmm = nullptr) : net_(&net), hmm_(hmm) {}

    void begin_episode(const PortfolioEnv&) {}

    VectorXd act(const PortfolioEnv& env) {
        const int ctx = net_->spec().has_context() ? detail::current_context(env, hmm_) : 0;
        return sample_action(*net_, env.observe().features, ctx, rng_, true).action;
    }

private:
    const ActorCritic* net_;
    const GaussianHmmModel* hmm_;
    Rng rng_;
};

/// Runs n_episodes with the mean action. Episode i uses market seed
/// episode_seed(seed, i); episodes run in parallel.
inline EvalStats evaluate(const ActorCritic& net, const EnvConfig& env_config, int n_episodes, std::uint64_t seed,
                          const GaussianHmmModel* hmm = nullptr) {
    if (n_episodes < 1) throw ConfigError("evaluate: n_episodes must be >= 1");
    env_config.validate();
    std::vector<EpisodeOutcome> outcomes(static_cast<std::size_t>(n_episodes));
    parallel_for(outcomes.size(), [&](std::size_t i) {
        PortfolioEnv env(env_config);
        NetPolicy policy(net, hmm);
        outcomes[i] = run_episode(env, policy, episode_seed(seed, i));
    });
    EvalStats stats;
    stats.episodes = n_episodes;
    for (const auto& o : outcomes) {
        stats.growths.push_back(o.growth);
        if (o.bankrupt) ++stats.bankruptcies;
    }
    return stats;
}

/// CSV `episode,steps,mean_w0..,mad_w0..,growth,bankrupt,clip_fraction,approx_kl`.
/// Undefined values (growth of a bankrupt episode, diagnostics before the first
/// update) are written as empty fields.
inline void write_training_log_csv(std::ostream& os, const TrainingLog& log, Index n_assets) {
    const auto prec = os.precision(17);
    os << "episode,steps";
    for (Index i = 0; i <= n_assets; ++i) os << ",mean_w" << i;
    for (Index i = 0; i <= n_assets; ++i) os << ",mad_w" << i;
    os << ",growth,bankrupt,clip_fraction,approx_kl\n";
    auto field = [&](double v) {
        os << ',';
        if (std::isfinite(v)) os << v;
    };
    for (const auto& r : log.episodes) {
        os << r.episode << ',' << r.steps;
        for (Index i = 0; i < r.mean_weights.size(); ++i) os << ',' << r.mean_weights[i];
        for (Index i = 0; i < r.mad_weights.size(); ++i) os << ',' << r.mad_weights[i];
        os << ',';
        if (r.growth) os << *r.growth;
        os << ',' << (r.bankrupt ? 1 : 0);
        field(r.clip_fraction);
        field(r.approx_kl);
        os << '\n';
    }
    os.precision(prec);
}

} // namespace kellylab
