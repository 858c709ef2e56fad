#pragma once

// Diagonal-Gaussian actor-critic networks, optionally conditioned on a discrete
// regime context.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kellylab/error.hpp"
#include "kellylab/nn.hpp"
#include "kellylab/random.hpp"
#include "kellylab/types.hpp"

namespace kellylab {

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// Architecture of an actor-critic network.
///
/// Without context:  obs -> feature MLP (tanh) -> [shared MLP] -> actor / critic heads.
/// With context:     one-hot regime -> context MLP (relu); its output multiplies the
///                   feature output elementwise before the shared stack.
struct NetworkSpec {
    Index obs_dim = 0;
    Index act_dim = 0;
    std::vector<Index> feature_layers{64, 64};
    int context_dim = 0;  ///< number of regime labels; 0 disables the context branch
    std::vector<Index> context_layers;
    std::vector<Index> shared_layers;
    double log_std_init = 0.0;

    bool has_context() const noexcept { return context_dim > 0; }

    void validate() const {
        if (obs_dim < 1 || act_dim < 1) throw ConfigError("network: obs_dim and act_dim must be >= 1");
        if (context_dim < 0) throw ConfigError("network: context_dim must be >= 0");
        if (has_context()) {
            const Index feat_out = feature_layers.empty() ? obs_dim : feature_layers.back();
            const Index ctx_out = context_layers.empty() ? context_dim : context_layers.back();
            if (feat_out != ctx_out)
                throw ConfigError("network: context branch output (" + std::to_string(ctx_out) +
                                  ") must match feature output (" + std::to_string(feat_out) + ")");
        }
    }
};

/// Two tanh layers of 64 and linear heads.
inline NetworkSpec policy_net_spec(Index obs_dim, Index act_dim, double log_std_init) {
    NetworkSpec s;
    s.obs_dim = obs_dim;
    s.act_dim = act_dim;
    s.feature_layers = {64, 64};
    s.log_std_init = log_std_init;
    return s;
}

/// Feature net 256/128/64 tanh, regime net 3x64 relu, product, shared 2x64 tanh.
inline NetworkSpec context_policy_net_spec(Index obs_dim, Index act_dim, int n_regimes, double log_std_init) {
    NetworkSpec s;
    s.obs_dim = obs_dim;
    s.act_dim = act_dim;
    s.feature_layers = {256, 128, 64};
    s.context_dim = n_regimes;
    s.context_layers = {64, 64, 64};
    s.shared_layers = {64, 64};
    s.log_std_init = log_std_init;
    return s;
}

class ActorCritic {
public:
    struct Output {
        MatrixXd mean;             ///< act_dim x batch
        Eigen::RowVectorXd value;  ///< 1 x batch
    };

    struct Cache {
        nn::Mlp::Cache feature, context, shared, actor, critic;
        MatrixXd feature_out, context_out;
    };

    ActorCritic() = default;

    /// Orthogonal init: gain sqrt(2) in hidden layers, 0.01 on the actor head, 1 on
    /// the critic head; zero biases; log_std set to spec.log_std_init.
    ActorCritic(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        spec_.validate();
        Index offset = 0;
        feature_ = nn::Mlp(spec_.obs_dim, spec_.feature_layers, nn::Activation::tanh, nn::Activation::tanh, offset);
        Index trunk = feature_.out_dim();
        if (spec_.has_context())
            context_ = nn::Mlp(spec_.context_dim, spec_.context_layers, nn::Activation::relu, nn::Activation::relu, offset);
        shared_ = nn::Mlp(trunk, spec_.shared_layers, nn::Activation::tanh, nn::Activation::tanh, offset);
        trunk = shared_.out_dim();
        actor_ = nn::Mlp(trunk, {spec_.act_dim}, nn::Activation::identity, nn::Activation::identity, offset);
        critic_ = nn::Mlp(trunk, {1}, nn::Activation::identity, nn::Activation::identity, offset);
        log_std_offset_ = offset;
        offset += spec_.act_dim;
        params_ = VectorXd::Zero(offset);

        Rng rng(seed);
        const double root2 = std::sqrt(2.0);
        feature_.init_orthogonal(params_, rng, root2, root2);
        context_.init_orthogonal(params_, rng, root2, root2);
        shared_.init_orthogonal(params_, rng, root2, root2);
        actor_.init_orthogonal(params_, rng, 0.01, 0.01);
        critic_.init_orthogonal(params_, rng, 1.0, 1.0);
        params_.segment(log_std_offset_, spec_.act_dim).setConstant(spec_.log_std_init);
    }

    const NetworkSpec& spec() const noexcept { return spec_; }
    Index parameter_count() const noexcept { return params_.size(); }
    const VectorXd& parameters() const noexcept { return params_; }
    VectorXd& parameters() noexcept { return params_; }
    Index log_std_offset() const noexcept { return log_std_offset_; }

    /// Effective log standard deviation, clamped to [-20, 2].
    VectorXd log_std() const {
        return params_.segment(log_std_offset_, spec_.act_dim).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
    }

    /// One-hot columns for a batch of regime labels.
    MatrixXd one_hot(const std::vector<int>& labels) const {
        MatrixXd c = MatrixXd::Zero(spec_.context_dim, static_cast<Index>(labels.size()));
        for (std::size_t b = 0; b < labels.size(); ++b) {
            if (labels[b] < 0 || labels[b] >= spec_.context_dim) throw ConfigError("network: context label out of range");
            c(labels[b], static_cast<Index>(b)) = 1.0;
        }
        return c;
    }

    /// `context` is context_dim x batch (ignored without a context branch).
    Output forward(const MatrixXd& obs, const MatrixXd& context, Cache* cache = nullptr) const {
        if (obs.rows() != spec_.obs_dim)
            throw ConfigError("network: observation has " + std::to_string(obs.rows()) + " features, expected " +
                              std::to_string(spec_.obs_dim));
        Cache local;
        Cache& c = cache ? *cache : local;
        c.feature_out = feature_.forward(params_, obs, &c.feature);
        MatrixXd trunk = c.feature_out;
        if (spec_.has_context()) {
            if (context.rows() != spec_.context_dim || context.cols() != obs.cols())
                throw ConfigError("network: context batch has the wrong shape");
            c.context_out = context_.forward(params_, context, &c.context);
            trunk = trunk.cwiseProduct(c.context_out);
        }
        const MatrixXd h = shared_.forward(params_, trunk, &c.shared);
        Output out;
        out.mean = actor_.forward(params_, h, &c.actor);
        out.value = critic_.forward(params_, h, &c.critic);
        return out;
    }

    /// Backpropagates d(loss)/d(mean) and d(loss)/d(value) into `grad`. The
    /// log_std gradient is the caller's business (it never touches the layers).
    void backward(const Cache& c, const MatrixXd& d_mean, const Eigen::RowVectorXd& d_value, VectorXd& grad) const {
        MatrixXd dh = actor_.backward(params_, c.actor, d_mean, grad);
        dh += critic_.backward(params_, c.critic, d_value, grad);
        MatrixXd d_trunk = shared_.backward(params_, c.shared, std::move(dh), grad);
        if (spec_.has_context()) {
            const MatrixXd d_ctx = d_trunk.cwiseProduct(c.feature_out);
            d_trunk = d_trunk.cwiseProduct(c.context_out);
            context_.backward(params_, c.context, d_ctx, grad);
        }
        feature_.backward(params_, c.feature, std::move(d_trunk), grad);
    }

private:
    NetworkSpec spec_;
    nn::Mlp feature_, context_, shared_, actor_, critic_;
    Index log_std_offset_ = 0;
    VectorXd params_;
};

/// log N(a; mean, diag(exp(log_std))^2), summed over action dimensions.
inline double gaussian_log_prob(const VectorXd& action, const VectorXd& mean, const VectorXd& log_std) {
    const Eigen::ArrayXd z = (action - mean).array() / log_std.array().exp();
    return (-0.5 * z.square() - log_std.array() - 0.5 * std::log(2.0 * std::numbers::pi)).sum();
}

inline double gaussian_entropy(const VectorXd& log_std) {
    return (log_std.array() + 0.5 * (1.0 + std::log(2.0 * std::numbers::pi))).sum();
}

struct ActionSample {
    VectorXd action;
    double log_prob = 0.0;
    double value = 0.0;
};

/// Stochastic: mean + exp(log_std) * z with z ~ N(0, I). Deterministic: the mean
/// (log_prob is still the density at the returned action).
inline ActionSample sample_action(const ActorCritic& net, const VectorXd& obs, std::optional<int> context, Rng& rng,
                                  bool deterministic) {
    MatrixXd ctx;
    if (net.spec().has_context()) ctx = net.one_hot({context.value_or(0)});
    const auto out = net.forward(obs, ctx);
    const VectorXd mean = out.mean.col(0);
    const VectorXd log_std = net.log_std();
    ActionSample s;
    s.value = out.value[0];
    if (deterministic) {
        s.action = mean;
    } else {
        s.action = mean + log_std.array().exp().matrix().cwiseProduct(rng.normal_vector(mean.size()));
    }
    s.log_prob = gaussian_log_prob(s.action, mean, log_std);
    return s;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   kellylab-actor-critic 1
//   obs_dim D / act_dim A / feature_layers n s1 .. / context_dim K /
//   context_layers n .. / shared_layers n .. / parameters P
//   followed by P values, one per line

inline void save_checkpoint(std::ostream& os, const ActorCritic& net) {
    const auto prec = os.precision(17);
    const auto& s = net.spec();
    auto list = [&](const char* name, const std::vector<Index>& v) {
        os << name << ' ' << v.size();
        for (Index x : v) os << ' ' << x;
        os << '\n';
    };
    os << "kellylab-actor-critic 1\n";
    os << "obs_dim " << s.obs_dim << "\nact_dim " << s.act_dim << '\n';
    list("feature_layers", s.feature_layers);
    os << "context_dim " << s.context_dim << '\n';
    list("context_layers", s.context_layers);
    list("shared_layers", s.shared_layers);
    os << "log_std_init " << s.log_std_init << '\n';
    os << "parameters " << net.parameter_count() << '\n';
    for (Index i = 0; i < net.parameter_count(); ++i) os << net.parameters()[i] << '\n';
    os.precision(prec);
}

inline ActorCritic load_checkpoint(std::istream& is) {
    auto expect = [&](const std::string& word) {
        std::string w;
        if (!(is >> w) || w != word) throw ConfigError("checkpoint: expected '" + word + "', found '" + w + "'");
    };
    auto integer = [&]() {
        long long v = 0;
        if (!(is >> v)) throw ConfigError("checkpoint: expected an integer");
        return static_cast<Index>(v);
    };
    auto list = [&](const std::string& name) {
        expect(name);
        const Index n = integer();
        std::vector<Index> v;
        for (Index i = 0; i < n; ++i) v.push_back(integer());
        return v;
    };
    expect("kellylab-actor-critic");
    if (integer() != 1) throw ConfigError("checkpoint: unsupported version");
    NetworkSpec s;
    expect("obs_dim");
    s.obs_dim = integer();
    expect("act_dim");
    s.act_dim = integer();
    s.feature_layers = list("feature_layers");
    expect("context_dim");
    s.context_dim = static_cast<int>(integer());
    s.context_layers = list("context_layers");
    s.shared_layers = list("shared_layers");
    expect("log_std_init");
    if (!(is >> s.log_std_init)) throw ConfigError("checkpoint: bad log_std_init");
    ActorCritic net(s, 0);
    expect("parameters");
    if (integer() != net.parameter_count()) throw ConfigError("checkpoint: parameter count does not match architecture");
    for (Index i = 0; i < net.parameter_count(); ++i) {
        std::string tok;
        if (!(is >> tok)) throw ConfigError("checkpoint: truncated parameter list");
        net.parameters()[i] = std::stod(tok);
    }
    return net;
}

} // namespace kellylab
