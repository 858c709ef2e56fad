#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "kellylab/onpolicy.hpp"

using namespace kellylab;

namespace {

std::vector<double> to_std(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

RolloutBuffer filled_buffer(const ActorCritic& net, Index n, std::uint64_t seed) {
    RolloutBuffer buf(n, net.spec().obs_dim, net.spec().act_dim);
    Rng rng(seed);
    for (Index t = 0; t < n; ++t) {
        const VectorXd obs = rng.normal_vector(net.spec().obs_dim);
        const int ctx = static_cast<int>(rng() % 2);
        const auto a = sample_action(net, obs, ctx, rng, false);
        buf.add(obs, ctx, a.action, a.log_prob, 0.01 * rng.normal(), a.value, t % 17 == 16);
    }
    return buf;
}

} // namespace

TEST(Gae, HandExample) {
    const std::vector<double> r{1, 1}, v{0.5, 0.5}, d{0, 1};
    const auto [adv, ret] = gae_advantages(r, v, d, 0.0, 1.0, 0.5);
    EXPECT_DOUBLE_EQ(adv[0], 1.25);
    EXPECT_DOUBLE_EQ(adv[1], 0.5);
    EXPECT_DOUBLE_EQ(ret[0], 1.75);
    EXPECT_DOUBLE_EQ(ret[1], 1.0);
}

TEST(Gae, LambdaZeroIsOneStepTd) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto r = to_std(rng.normal_vector(40)), v = to_std(rng.normal_vector(40));
        std::vector<double> d(40);
        for (auto& x : d) x = rng.uniform() < 0.1 ? 1.0 : 0.0;
        const double boot = rng.normal(), gamma = 0.99;
        const VectorXd adv = gae_advantages(r, v, d, boot, gamma, 0.0).first;
        for (std::size_t t = 0; t < 40; ++t) {
            const double next = t + 1 < 40 ? v[t + 1] : boot;
            EXPECT_NEAR(adv[static_cast<Index>(t)], r[t] + gamma * next * (1 - d[t]) - v[t], 1e-12);
        }
    }
}

TEST(Gae, LambdaOneIsMonteCarloReturn) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto r = to_std(rng.normal_vector(40)), v = to_std(rng.normal_vector(40));
        const std::vector<double> d(40, 0.0);
        const double boot = rng.normal();
        const VectorXd adv = gae_advantages(r, v, d, boot, 1.0, 1.0).first;
        double tail = boot;
        for (std::size_t t = 40; t-- > 0;) {
            tail += r[t];
            EXPECT_NEAR(adv[static_cast<Index>(t)], tail - v[t], 1e-12);
        }
    }
}

TEST(Gae, DoneCutsBootstrap) {
    const std::vector<double> r{0, 0, 0}, v{1, 2, 3}, d{0, 1, 0};
    const VectorXd adv = gae_advantages(r, v, d, 100.0, 1.0, 1.0).first;
    EXPECT_DOUBLE_EQ(adv[1], -2.0);
    EXPECT_DOUBLE_EQ(adv[2], 97.0);
    EXPECT_DOUBLE_EQ(adv[0], 2.0 - 1.0 + (-2.0));
    EXPECT_THROW(gae_advantages(r, std::vector<double>{1.0}, d, 0, 1, 1), ConfigError);
}

TEST(Advantages, Normalisation) {
    Rng rng(3);
    const VectorXd a = 5.0 + 3.0 * rng.normal_vector(64).array();
    const VectorXd n = normalize_advantages(a);
    EXPECT_LT(std::abs(n.mean()), 1e-9);
    EXPECT_NEAR(std::sqrt((n.array() - n.mean()).square().sum() / 63.0), 1.0, 1e-6);
    const VectorXd flat = VectorXd::Constant(8, 2.0);
    EXPECT_TRUE(normalize_advantages(flat) == flat);
    EXPECT_TRUE(normalize_advantages(VectorXd::Constant(1, 4.0)) == VectorXd::Constant(1, 4.0));
}

TEST(Clip, ActiveRegions) {
    EXPECT_TRUE(clip_active(1.0, 1.3, 0.2));
    EXPECT_FALSE(clip_active(1.0, 0.5, 0.2));
    EXPECT_TRUE(clip_active(-1.0, 0.7, 0.2));
    EXPECT_FALSE(clip_active(-1.0, 1.5, 0.2));
    EXPECT_FALSE(clip_active(0.0, 5.0, 0.2));
    EXPECT_EQ(surrogate_slope(1.0, 1.3, 0.2), 0.0);
    EXPECT_EQ(surrogate_slope(2.0, 1.1, 0.2), 2.0);
}

TEST(Clip, PerSampleGradientVanishesExactlyWhenClipped) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        gradcheck::Problem p = gradcheck::random_problem(seed, false, 1);
        const LossSettings s{Surrogate::clipped, 0.2, 0.0, 0.0};
        VectorXd g;
        actor_critic_loss(p.net, p.batch, s, &g);
        const auto out = p.net.forward(p.batch.observations, p.batch.context);
        const double ratio = std::exp(gaussian_log_prob(p.batch.actions.col(0), out.mean.col(0), p.net.log_std()) -
                                      p.batch.old_log_probs[0]);
        if (clip_active(p.batch.advantages[0], ratio, 0.2))
            EXPECT_TRUE(g.isZero(0.0)) << "seed " << seed;
        else
            EXPECT_GT(g.norm(), 0.0) << "seed " << seed;
    }
}

TEST(Loss, ZeroAdvantageGivesNoPolicyGradient) {
    gradcheck::Problem p = gradcheck::random_problem(4, false);
    p.batch.advantages.setZero();
    for (Surrogate sur : {Surrogate::clipped, Surrogate::unclipped, Surrogate::log_prob}) {
        VectorXd g;
        const LossReport r = actor_critic_loss(p.net, p.batch, LossSettings{sur, 0.2, 0.0, 0.0}, &g);
        EXPECT_TRUE(g.isZero(0.0));
        EXPECT_EQ(r.policy, 0.0);
    }
}

TEST(Loss, A2cMatchesUnclippedAtRatioOne) {
    gradcheck::Problem p = gradcheck::random_problem(5, true);
    const auto out = p.net.forward(p.batch.observations, p.batch.context);
    for (Index j = 0; j < p.batch.size(); ++j)
        p.batch.old_log_probs[j] = gaussian_log_prob(p.batch.actions.col(j), out.mean.col(j), p.net.log_std());
    VectorXd ga, gp, gc;
    actor_critic_loss(p.net, p.batch, LossSettings{Surrogate::log_prob, 0.2, 1.0, 0.0}, &ga);
    actor_critic_loss(p.net, p.batch, LossSettings{Surrogate::unclipped, 0.2, 1.0, 0.0}, &gp);
    actor_critic_loss(p.net, p.batch, LossSettings{Surrogate::clipped, 1e300, 1.0, 0.0}, &gc);
    EXPECT_LT((ga - gp).lpNorm<Eigen::Infinity>(), 1e-10);
    EXPECT_LT((ga - gc).lpNorm<Eigen::Infinity>(), 1e-10);
}

TEST(Loss, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (bool ctx : {false, true}) {
            const gradcheck::Problem p = gradcheck::random_problem(100 + seed, ctx);
            for (Surrogate sur : {Surrogate::clipped, Surrogate::unclipped, Surrogate::log_prob})
                EXPECT_LE(gradcheck::relative_error(p.net, p.batch, LossSettings{sur, 0.2, 1.0, 0.01}), 1e-4)
                    << "seed " << seed << " context " << ctx << " surrogate " << static_cast<int>(sur);
        }
    }
}

TEST(Loss, DiagnosticsAtRatioOne) {
    gradcheck::Problem p = gradcheck::random_problem(6, false);
    const auto out = p.net.forward(p.batch.observations, p.batch.context);
    for (Index j = 0; j < p.batch.size(); ++j)
        p.batch.old_log_probs[j] = gaussian_log_prob(p.batch.actions.col(j), out.mean.col(j), p.net.log_std());
    const LossReport r = actor_critic_loss(p.net, p.batch, LossSettings{});
    EXPECT_NEAR(r.approx_kl, 0.0, 1e-15);
    EXPECT_EQ(r.clip_fraction, 0.0);
    EXPECT_NEAR(r.policy, -p.batch.advantages.mean(), 1e-12);
    EXPECT_NEAR(r.value, (out.value.transpose() - p.batch.returns).squaredNorm() / 8.0, 1e-12);
}

TEST(Update, TrainConfigDefaults) {
    const TrainConfig ppo = TrainConfig::ppo();
    EXPECT_EQ(ppo.rollout_steps, 1280);
    EXPECT_EQ(ppo.batch_size, 64);
    EXPECT_EQ(ppo.epochs, 10);
    EXPECT_EQ(ppo.effective_epochs(), 10);
    TrainConfig noclip = ppo;
    noclip.clipping_enabled = false;
    EXPECT_EQ(noclip.effective_epochs(), 1);
    const TrainConfig a2c = TrainConfig::a2c();
    EXPECT_EQ(a2c.rollout_steps, 256);
    EXPECT_EQ(a2c.learning_rate, 1e-4);
    TrainConfig bad = ppo;
    bad.gae_lambda = 1.5;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Update, PpoGradientStepCount) {
    ActorCritic net(gradcheck::toy_spec(true), 1);
    RolloutBuffer buf = filled_buffer(net, 200, 2);
    EXPECT_THROW(
        {
            nn::Adam opt(net.parameter_count(), {});
            Rng rng(0);
            ppo_update(net, opt, buf, TrainConfig::ppo(), rng);
        },
        LifecycleError);
    buf.compute_advantages(0.0, 0.99, 0.9);
    TrainConfig cfg = TrainConfig::ppo();
    cfg.epochs = 3;
    nn::Adam opt(net.parameter_count(), {});
    Rng rng(0);
    const VectorXd before = net.parameters();
    const UpdateDiagnostics d = ppo_update(net, opt, buf, cfg, rng);
    EXPECT_EQ(d.gradient_steps, 3 * 4);  // ceil(200 / 64) = 4 minibatches per epoch
    EXPECT_FALSE(d.aborted);
    EXPECT_FALSE(net.parameters() == before);
    EXPECT_GE(d.approx_kl, 0.0);
}

TEST(Update, A2cTakesOneStep) {
    ActorCritic net(gradcheck::toy_spec(false), 1);
    RolloutBuffer buf = filled_buffer(net, 64, 3);
    buf.compute_advantages(0.0, 0.99, 0.9);
    nn::Adam opt(net.parameter_count(), {});
    const UpdateDiagnostics d = a2c_update(net, opt, buf, TrainConfig::a2c());
    EXPECT_EQ(d.gradient_steps, 1);
    EXPECT_EQ(opt.steps(), 1);
}

TEST(Update, NonFiniteAbortsAndRestores) {
    ActorCritic net(gradcheck::toy_spec(false), 1);
    RolloutBuffer buf = filled_buffer(net, 64, 3);
    buf.rewards[5] = std::numeric_limits<double>::quiet_NaN();
    buf.compute_advantages(0.0, 0.99, 0.9);
    nn::Adam opt(net.parameter_count(), {});
    Rng rng(1);
    const VectorXd before = net.parameters();
    const UpdateDiagnostics d = ppo_update(net, opt, buf, TrainConfig::ppo(), rng);
    EXPECT_TRUE(d.aborted);
    EXPECT_FALSE(d.message.empty());
    EXPECT_TRUE(net.parameters() == before);
}

TEST(Buffer, Lifecycle) {
    RolloutBuffer buf(2, 3, 1);
    buf.add(VectorXd::Zero(3), 0, VectorXd::Zero(1), 0, 0, 0, false);
    buf.add(VectorXd::Zero(3), 0, VectorXd::Zero(1), 0, 0, 0, true);
    EXPECT_TRUE(buf.full());
    EXPECT_THROW(buf.add(VectorXd::Zero(3), 0, VectorXd::Zero(1), 0, 0, 0, false), LifecycleError);
    buf.clear();
    EXPECT_EQ(buf.size, 0);
}
