#pragma once

// Generalised advantage estimation and the A2C / clipped-PPO updates.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kellylab/error.hpp"
#include "kellylab/nn.hpp"
#include "kellylab/policy.hpp"
#include "kellylab/random.hpp"

namespace kellylab {

enum class Algo { ppo, a2c };

struct TrainConfig {
    Algo algo = Algo::ppo;
    double discount = 0.99;
    double gae_lambda = 0.9;
    double learning_rate = 3e-4;
    Index batch_size = 64;
    Index rollout_steps = 1280;
    int epochs = 10;
    double clip_range = 0.2;
    double value_coef = 1.0;
    double entropy_coef = 0.0;
    double max_grad_norm = 0.5;
    bool clipping_enabled = true;
    bool normalize_advantage = true;
    double log_std_init = 0.0;
    long long total_steps = 1'000'000;

    static TrainConfig ppo() { return {}; }

    static TrainConfig a2c() {
        TrainConfig c;
        c.algo = Algo::a2c;
        c.learning_rate = 1e-4;
        c.batch_size = 256;
        c.rollout_steps = 256;
        c.epochs = 1;
        c.normalize_advantage = false;
        c.log_std_init = -2.0;
        return c;
    }

    /// Epoch count actually used: an unclipped surrogate only gets one pass.
    int effective_epochs() const noexcept { return algo == Algo::ppo && clipping_enabled ? epochs : 1; }

    void validate() const {
        auto require = [](bool ok, const char* what) {
            if (!ok) throw ConfigError(what);
        };
        require(discount > 0.0 && discount <= 1.0, "algo: discount must lie in (0, 1]");
        require(gae_lambda >= 0.0 && gae_lambda <= 1.0, "algo: gae_lambda must lie in [0, 1]");
        require(learning_rate > 0.0, "algo: learning_rate must be > 0");
        require(batch_size >= 1 && rollout_steps >= 1 && epochs >= 1, "algo: batch_size, rollout_steps, epochs must be >= 1");
        require(!clipping_enabled || clip_range > 0.0, "algo: clip_range must be > 0 when clipping is enabled");
        require(value_coef >= 0.0 && entropy_coef >= 0.0, "algo: loss coefficients must be >= 0");
        require(max_grad_norm > 0.0, "algo: max_grad_norm must be > 0");
        require(total_steps >= 1, "algo: total_steps must be >= 1");
    }
};

/// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1},
/// delta_t = r_t + gamma (1 - done_t) V_{t+1} - V_t, with V_n = bootstrap_value.
/// dones[t] marks that the episode ended with transition t. Returns
/// (advantages, return targets = advantages + values).
inline std::pair<VectorXd, VectorXd> gae_advantages(std::span<const double> rewards, std::span<const double> values,
                                                    std::span<const double> dones, double bootstrap_value,
                                                    double gamma, double lambda) {
    const std::size_t n = rewards.size();
    if (values.size() != n || dones.size() != n) throw ConfigError("gae: rewards, values and dones must align");
    VectorXd adv(static_cast<Index>(n));
    double next_adv = 0.0;
    double next_value = bootstrap_value;
    for (std::size_t i = n; i-- > 0;) {
        const double live = 1.0 - dones[i];
        const double delta = rewards[i] + gamma * next_value * live - values[i];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[static_cast<Index>(i)] = next_adv;
        next_value = values[i];
    }
    VectorXd ret = adv + Eigen::Map<const VectorXd>(values.data(), static_cast<Index>(n));
    return {adv, ret};
}

/// (x - mean) / std with the sample standard deviation. Unchanged when the batch
/// has fewer than two entries or std < 1e-8.
inline VectorXd normalize_advantages(const VectorXd& adv) {
    if (adv.size() < 2) return adv;
    const double mean = adv.mean();
    const double sd = std::sqrt((adv.array() - mean).square().sum() / static_cast<double>(adv.size() - 1));
    if (sd < 1e-8) return adv;
    return (adv.array() - mean) / sd;
}

struct RolloutBuffer {
    MatrixXd observations;  ///< obs_dim x capacity
    std::vector<int> contexts;
    MatrixXd actions;  ///< act_dim x capacity
    VectorXd log_probs, rewards, values, dones;
    VectorXd advantages, returns;
    Index size = 0;
    bool advantages_ready = false;

    RolloutBuffer() = default;
    RolloutBuffer(Index capacity, Index obs_dim, Index act_dim)
        : observations(obs_dim, capacity), contexts(static_cast<std::size_t>(capacity), 0), actions(act_dim, capacity),
          log_probs(capacity), rewards(capacity), values(capacity), dones(capacity), advantages(capacity),
          returns(capacity) {}

    Index capacity() const noexcept { return observations.cols(); }
    bool full() const noexcept { return size == capacity(); }

    void clear() {
        size = 0;
        advantages_ready = false;
    }

    void add(const VectorXd& obs, int context, const VectorXd& action, double log_prob, double reward, double value,
             bool done) {
        if (full()) throw LifecycleError("rollout buffer is full");
        observations.col(size) = obs;
        contexts[static_cast<std::size_t>(size)] = context;
        actions.col(size) = action;
        log_probs[size] = log_prob;
        rewards[size] = reward;
        values[size] = value;
        dones[size] = done ? 1.0 : 0.0;
        ++size;
        advantages_ready = false;
    }

    void compute_advantages(double bootstrap_value, double gamma, double lambda) {
        auto [adv, ret] = gae_advantages({rewards.data(), static_cast<std::size_t>(size)},
                                         {values.data(), static_cast<std::size_t>(size)},
                                         {dones.data(), static_cast<std::size_t>(size)}, bootstrap_value, gamma, lambda);
        advantages.head(size) = adv;
        returns.head(size) = ret;
        advantages_ready = true;
    }
};

// ---------------------------------------------------------------------------
// Losses

enum class Surrogate {
    clipped,    ///< min(rho A, clip(rho, 1-eps, 1+eps) A)
    unclipped,  ///< rho A
    log_prob,   ///< A log pi (vanilla policy gradient, A2C)
};

struct LossSettings {
    Surrogate surrogate = Surrogate::clipped;
    double clip_range = 0.2;
    double value_coef = 1.0;
    double entropy_coef = 0.0;
};

struct Minibatch {
    MatrixXd observations;
    MatrixXd context;  ///< one-hot, empty without a context branch
    MatrixXd actions;
    VectorXd old_log_probs;
    VectorXd advantages;
    VectorXd returns;

    Index size() const noexcept { return observations.cols(); }
};

struct LossReport {
    double total = 0.0;
    double policy = 0.0;
    double value = 0.0;
    double entropy = 0.0;
    double approx_kl = 0.0;
    double clip_fraction = 0.0;
};

/// True where the clipped objective is flat in rho, so the sample contributes no
/// policy gradient.
inline bool clip_active(double advantage, double ratio, double clip_range) {
    return (advantage > 0.0 && ratio > 1.0 + clip_range) || (advantage < 0.0 && ratio < 1.0 - clip_range);
}

/// d(per-sample surrogate objective)/d(rho).
inline double surrogate_slope(double advantage, double ratio, double clip_range) {
    return clip_active(advantage, ratio, clip_range) ? 0.0 : advantage;
}

/// Loss (to minimise) = -mean(surrogate) + value_coef mean((V - R)^2) - entropy_coef entropy.
/// When `grad` is given it receives the full parameter gradient (overwritten).
inline LossReport actor_critic_loss(const ActorCritic& net, const Minibatch& mb, const LossSettings& s,
                                    VectorXd* grad = nullptr) {
    const Index b = mb.size();
    const double inv_b = 1.0 / static_cast<double>(b);
    ActorCritic::Cache cache;
    const auto out = net.forward(mb.observations, mb.context, &cache);
    const VectorXd log_std = net.log_std();
    const Eigen::ArrayXd inv_var = (-2.0 * log_std.array()).exp();

    const MatrixXd diff = mb.actions - out.mean;  // act x b
    const double log_norm = log_std.sum() + 0.5 * static_cast<double>(log_std.size()) * std::log(2.0 * std::numbers::pi);
    VectorXd log_prob(b);
    for (Index j = 0; j < b; ++j)
        log_prob[j] = -0.5 * (diff.col(j).array().square() * inv_var).sum() - log_norm;

    LossReport r;
    VectorXd dlogp(b);  // d(loss)/d(log pi_j)
    double surrogate_sum = 0.0;
    Index clipped = 0;
    for (Index j = 0; j < b; ++j) {
        const double a = mb.advantages[j];
        if (s.surrogate == Surrogate::log_prob) {
            surrogate_sum += a * log_prob[j];
            dlogp[j] = -a * inv_b;
            const double lr = log_prob[j] - mb.old_log_probs[j];
            r.approx_kl += (std::exp(lr) - 1.0) - lr;
            continue;
        }
        const double log_ratio = log_prob[j] - mb.old_log_probs[j];
        const double ratio = std::exp(log_ratio);
        if (std::abs(ratio - 1.0) > s.clip_range) ++clipped;
        r.approx_kl += (ratio - 1.0) - log_ratio;
        if (s.surrogate == Surrogate::clipped) {
            const double clamped = std::clamp(ratio, 1.0 - s.clip_range, 1.0 + s.clip_range);
            surrogate_sum += std::min(ratio * a, clamped * a);
            dlogp[j] = -surrogate_slope(a, ratio, s.clip_range) * ratio * inv_b;
        } else {
            surrogate_sum += ratio * a;
            dlogp[j] = -a * ratio * inv_b;
        }
    }
    r.policy = -surrogate_sum * inv_b;
    r.value = (out.value.transpose() - mb.returns).squaredNorm() * inv_b;
    r.entropy = gaussian_entropy(log_std);
    r.total = r.policy + s.value_coef * r.value - s.entropy_coef * r.entropy;
    r.approx_kl *= inv_b;
    r.clip_fraction = static_cast<double>(clipped) * inv_b;

    if (grad) {
        grad->setZero(net.parameter_count());
        // d log pi / d mean = (a - m) / sigma^2
        MatrixXd d_mean = diff.array().colwise() * inv_var;
        d_mean = d_mean * dlogp.asDiagonal();
        const Eigen::RowVectorXd d_value = (2.0 * s.value_coef * inv_b) * (out.value - mb.returns.transpose());
        net.backward(cache, d_mean, d_value, *grad);
        // d log pi / d log_std_i = (a_i - m_i)^2 / sigma_i^2 - 1 ; entropy slope is 1
        const auto raw = net.parameters().segment(net.log_std_offset(), log_std.size());
        for (Index i = 0; i < log_std.size(); ++i) {
            if (raw[i] < kLogStdMin || raw[i] > kLogStdMax) continue;
            double g = 0.0;
            for (Index j = 0; j < b; ++j) g += dlogp[j] * (diff(i, j) * diff(i, j) * inv_var[i] - 1.0);
            (*grad)[net.log_std_offset() + i] = g - s.entropy_coef;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Updates

struct UpdateDiagnostics {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double approx_kl = 0.0;
    double clip_fraction = 0.0;
    double grad_norm = 0.0;
    int gradient_steps = 0;
    bool aborted = false;
    std::string message;
};

inline Minibatch gather_minibatch(const ActorCritic& net, const RolloutBuffer& buf, std::span<const Index> idx,
                                  bool normalize) {
    const auto b = static_cast<Index>(idx.size());
    Minibatch mb;
    mb.observations.resize(buf.observations.rows(), b);
    mb.actions.resize(buf.actions.rows(), b);
    mb.old_log_probs.resize(b);
    mb.advantages.resize(b);
    mb.returns.resize(b);
    std::vector<int> ctx(static_cast<std::size_t>(b));
    for (Index j = 0; j < b; ++j) {
        const Index i = idx[static_cast<std::size_t>(j)];
        mb.observations.col(j) = buf.observations.col(i);
        mb.actions.col(j) = buf.actions.col(i);
        mb.old_log_probs[j] = buf.log_probs[i];
        mb.advantages[j] = buf.advantages[i];
        mb.returns[j] = buf.returns[i];
        ctx[static_cast<std::size_t>(j)] = buf.contexts[static_cast<std::size_t>(i)];
    }
    if (net.spec().has_context()) mb.context = net.one_hot(ctx);
    if (normalize) mb.advantages = normalize_advantages(mb.advantages);
    return mb;
}

namespace detail {

/// One optimiser step on a minibatch. False if the loss or gradient is not finite.
inline bool gradient_step(ActorCritic& net, nn::Adam& opt, const Minibatch& mb, const LossSettings& s,
                          double max_grad_norm, UpdateDiagnostics& d) {
    VectorXd grad;
    const LossReport r = actor_critic_loss(net, mb, s, &grad);
    if (!std::isfinite(r.total) || !grad.allFinite()) {
        d.message = "non-finite loss or gradient (loss " + std::to_string(r.total) + ")";
        return false;
    }
    d.grad_norm += nn::clip_grad_norm(grad, max_grad_norm);
    opt.step(net.parameters(), grad);
    d.policy_loss += r.policy;
    d.value_loss += r.value;
    d.entropy += r.entropy;
    d.approx_kl += r.approx_kl;
    d.clip_fraction += r.clip_fraction;
    ++d.gradient_steps;
    return true;
}

inline void average(UpdateDiagnostics& d) {
    if (d.gradient_steps == 0) return;
    const double n = d.gradient_steps;
    d.policy_loss /= n;
    d.value_loss /= n;
    d.entropy /= n;
    d.approx_kl /= n;
    d.clip_fraction /= n;
    d.grad_norm /= n;
}

} // namespace detail

/// Clipped (or, with clipping disabled, plain ratio) surrogate over shuffled
/// minibatches. Diagnostics are minibatch averages. On a non-finite loss the
/// parameters are restored to their pre-update values and `aborted` is set.
inline UpdateDiagnostics ppo_update(ActorCritic& net, nn::Adam& opt, const RolloutBuffer& buf, const TrainConfig& cfg,
                                    Rng& rng) {
    if (!buf.advantages_ready) throw LifecycleError("ppo_update: advantages have not been computed");
    const VectorXd snapshot = net.parameters();
    const LossSettings s{cfg.clipping_enabled ? Surrogate::clipped : Surrogate::unclipped, cfg.clip_range,
                         cfg.value_coef, cfg.entropy_coef};
    UpdateDiagnostics d;
    std::vector<Index> order(static_cast<std::size_t>(buf.size));
    for (int epoch = 0; epoch < cfg.effective_epochs(); ++epoch) {
        std::iota(order.begin(), order.end(), Index{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (Index start = 0; start < buf.size; start += cfg.batch_size) {
            const Index len = std::min(cfg.batch_size, buf.size - start);
            const Minibatch mb = gather_minibatch(net, buf, {order.data() + start, static_cast<std::size_t>(len)},
                                                  cfg.normalize_advantage);
            if (!detail::gradient_step(net, opt, mb, s, cfg.max_grad_norm, d)) {
                net.parameters() = snapshot;
                d.aborted = true;
                detail::average(d);
                return d;
            }
        }
    }
    detail::average(d);
    return d;
}

/// One gradient step on -A log pi + value_coef (V - R)^2 over the whole buffer.
inline UpdateDiagnostics a2c_update(ActorCritic& net, nn::Adam& opt, const RolloutBuffer& buf, const TrainConfig& cfg) {
    if (!buf.advantages_ready) throw LifecycleError("a2c_update: advantages have not been computed");
    const VectorXd snapshot = net.parameters();
    std::vector<Index> all(static_cast<std::size_t>(buf.size));
    std::iota(all.begin(), all.end(), Index{0});
    const Minibatch mb = gather_minibatch(net, buf, all, cfg.normalize_advantage);
    const LossSettings s{Surrogate::log_prob, cfg.clip_range, cfg.value_coef, cfg.entropy_coef};
    UpdateDiagnostics d;
    if (!detail::gradient_step(net, opt, mb, s, cfg.max_grad_norm, d)) {
        net.parameters() = snapshot;
        d.aborted = true;
    }
    detail::average(d);
    return d;
}

} // namespace kellylab
