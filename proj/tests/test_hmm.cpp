#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "fixtures.hpp"
#include "kellylab/hmm.hpp"

using namespace kellylab;

namespace {

GaussianHmmModel two_state_model(double sep = 0.002, double sd = 0.0005, double stay = 0.98) {
    GaussianHmmModel m;
    m.means = {VectorXd::Constant(3, sep), VectorXd::Constant(3, -sep)};
    m.covariances = {MatrixXd::Identity(3, 3) * sd * sd, MatrixXd::Identity(3, 3) * sd * sd};
    m.transition.resize(2, 2);
    m.transition << stay, 1 - stay, 1 - stay, stay;
    m.initial = VectorXd::Constant(2, 0.5);
    return m;
}

struct Sample {
    MatrixXd obs;
    std::vector<int> states;
};

Sample sample(const GaussianHmmModel& m, Index n, Rng& rng) {
    Sample s{MatrixXd(n, m.n_features()), {}};
    int z = rng.categorical(m.initial);
    for (Index t = 0; t < n; ++t) {
        if (t > 0) z = rng.categorical(VectorXd(m.transition.row(z).transpose()));
        s.states.push_back(z);
        const Eigen::LLT<MatrixXd> llt(m.covariances[static_cast<std::size_t>(z)]);
        s.obs.row(t) = (m.means[static_cast<std::size_t>(z)] + llt.matrixL() * rng.normal_vector(m.n_features())).transpose();
    }
    return s;
}

GaussianHmmModel swapped(const GaussianHmmModel& m) {
    GaussianHmmModel s = m;
    std::swap(s.means[0], s.means[1]);
    std::swap(s.covariances[0], s.covariances[1]);
    s.transition << m.transition(1, 1), m.transition(1, 0), m.transition(0, 1), m.transition(0, 0);
    s.initial << m.initial[1], m.initial[0];
    return s;
}

} // namespace

TEST(Hmm, LogReturns) {
    MatrixXd p(3, 2);
    p << 1, 2, 2, 1, 4, 1;
    const MatrixXd r = log_returns(p);
    ASSERT_EQ(r.rows(), 2);
    EXPECT_NEAR(r(0, 0), std::log(2.0), 1e-15);
    EXPECT_NEAR(r(0, 1), std::log(0.5), 1e-15);
    EXPECT_NEAR(r(1, 1), 0.0, 1e-15);
    EXPECT_EQ(log_returns(p.topRows(1)).rows(), 0);
}

TEST(Hmm, SingleStateFitIsShrunkSampleMoments) {
    Rng rng(1);
    MatrixXd x(500, 2);
    for (Index t = 0; t < 500; ++t) x.row(t) = (VectorXd::Constant(2, 0.01) + 0.02 * rng.normal_vector(2)).transpose();
    HmmFitConfig cfg;
    cfg.n_states = 1;
    cfg.n_init = 2;
    const GaussianHmmModel m = fit(std::vector<MatrixXd>{x}, cfg, 3);
    const VectorXd mean = x.colwise().sum().transpose() / (500 + cfg.mean_prior);
    MatrixXd scatter = MatrixXd::Zero(2, 2);
    for (Index t = 0; t < 500; ++t) {
        const VectorXd d = x.row(t).transpose() - mean;
        scatter += d * d.transpose();
    }
    const MatrixXd cov = (scatter + cfg.mean_prior * mean * mean.transpose() + cfg.covar_prior * MatrixXd::Identity(2, 2)) / 500.0;
    EXPECT_TRUE(m.means[0].isApprox(mean, 1e-12));
    EXPECT_TRUE(m.covariances[0].isApprox(cov, 1e-10));
    EXPECT_EQ(m.transition(0, 0), 1.0);
    EXPECT_EQ(m.initial[0], 1.0);
    for (int v : decode(m, x)) EXPECT_EQ(v, 0);
}

TEST(Hmm, RecoversSyntheticStates) {
    Rng rng(5);
    const GaussianHmmModel truth = two_state_model();
    const Sample s = sample(truth, 5000, rng);
    HmmFitConfig cfg;
    const GaussianHmmModel m = fit(std::vector<MatrixXd>{s.obs}, cfg, 7);
    EXPECT_GE(accuracy(decode(m, s.obs), s.states), 0.99);
}

TEST(Hmm, ViterbiMatchesBruteForce) {
    Rng rng(11);
    const GaussianHmmModel m = two_state_model(0.0005, 0.001, 0.7);
    for (int trial = 0; trial < 20; ++trial) {
        const Sample s = sample(m, 8, rng);
        const ViterbiPath v = viterbi(m, s.obs);
        double best = -1e300;
        std::vector<int> best_path;
        for (int code = 0; code < 256; ++code) {
            std::vector<int> path(8);
            for (int t = 0; t < 8; ++t) path[static_cast<std::size_t>(t)] = (code >> t) & 1;
            const double lp = path_log_prob(m, s.obs, path);
            if (lp > best) {
                best = lp;
                best_path = path;
            }
        }
        EXPECT_EQ(v.states, best_path);
        EXPECT_NEAR(v.log_prob, best, 1e-9);
    }
}

TEST(Hmm, ViterbiBeatsRandomPaths) {
    Rng rng(12);
    const GaussianHmmModel m = two_state_model(0.001, 0.002, 0.9);
    const Sample s = sample(m, 300, rng);
    const ViterbiPath v = viterbi(m, s.obs);
    EXPECT_NEAR(path_log_prob(m, s.obs, v.states), v.log_prob, 1e-8);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> path = v.states;
        for (auto& z : path)
            if (rng.uniform() < 0.05) z = 1 - z;
        EXPECT_GE(v.log_prob, path_log_prob(m, s.obs, path) - 1e-9);
    }
}

TEST(Hmm, LongSequenceDoesNotUnderflow) {
    Rng rng(13);
    const Sample s = sample(two_state_model(), 200'000, rng);
    const ViterbiPath v = viterbi(two_state_model(), s.obs);
    EXPECT_TRUE(std::isfinite(v.log_prob));
    EXPECT_GE(accuracy(v.states, s.states), 0.99);
}

TEST(Hmm, AbsorbingPriorPinsStateZero) {
    GaussianHmmModel m = two_state_model();
    m.transition = MatrixXd::Identity(2, 2);
    m.initial << 1.0, 0.0;
    Rng rng(2);
    const Sample s = sample(two_state_model(), 100, rng);
    for (int v : decode(m, s.obs)) EXPECT_EQ(v, 0);
}

TEST(Hmm, PredictCurrent) {
    const GaussianHmmModel m = two_state_model();
    Rng rng(4);
    int hits = 0;
    for (int k = 0; k < 200; ++k) {
        MatrixXd w(59, 3);
        for (Index t = 0; t < 59; ++t) w.row(t) = (m.means[1] + 0.0005 * rng.normal_vector(3)).transpose();
        hits += predict_current(m, w) == 1;
        EXPECT_EQ(predict_current(m, w), predict_current(m, w));
    }
    EXPECT_GE(hits, 198);

    GaussianHmmModel skew = m;
    skew.initial << 0.9, 0.1;
    MatrixXd one(1, 3);
    one.row(0) = VectorXd::Constant(3, -0.0001).transpose();
    const MatrixXd emit = detail::emission_log_likelihood(skew, one);
    const int expected = std::log(0.9) + emit(0, 0) > std::log(0.1) + emit(0, 1) ? 0 : 1;
    EXPECT_EQ(predict_current(skew, one), expected);
    EXPECT_THROW(predict_current(m, MatrixXd(0, 3)), ConfigError);
}

TEST(Hmm, FitObjectiveIsMonotoneAndCovariancesFloored) {
    const RegimeModel market = fixtures::regime_market();
    std::vector<MatrixXd> seqs;
    for (std::uint64_t e = 0; e < 4; ++e) {
        Rng rng(derive_seed(19, e));
        seqs.push_back(log_returns(generate_path(market, 1280, 1.0 / 256, 0, rng).prices));
    }
    HmmFitConfig cfg;
    cfg.min_covar = 1e-4;  // above the daily variances, so the floor binds
    const HmmFit f = fit_hmm(seqs, cfg, 8);
    ASSERT_GE(f.history.size(), 2u);
    for (std::size_t i = 1; i < f.history.size(); ++i) EXPECT_GE(f.history[i], f.history[i - 1] - 1e-9);
    EXPECT_NEAR(f.history.back(), f.objective, 1e-9 * std::abs(f.objective));
    for (const auto& c : f.model.covariances) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
        EXPECT_GE(es.eigenvalues().minCoeff(), cfg.min_covar * (1 - 1e-12));
    }
    EXPECT_NO_THROW(f.model.validate());
}

TEST(Hmm, FitIsDeterministicAndValidatesInput) {
    Rng rng(6);
    const Sample s = sample(two_state_model(), 300, rng);
    HmmFitConfig cfg;
    const HmmFit a = fit_hmm({s.obs}, cfg, 1);
    const HmmFit b = fit_hmm({s.obs}, cfg, 1);
    EXPECT_EQ(a.objective, b.objective);
    EXPECT_THROW(fit_hmm({}, cfg, 1), FitError);
    EXPECT_THROW(fit_hmm({s.obs.topRows(19)}, cfg, 1), FitError);
    EXPECT_THROW(fit_hmm({s.obs, MatrixXd::Zero(40, 2)}, cfg, 1), FitError);
}

TEST(Hmm, AlignLabels) {
    const auto regimes = std::vector<MarketParams>{fixtures::bull_market(), fixtures::bear_market()};
    const double dt = 1.0 / 256;
    GaussianHmmModel m = two_state_model();
    m.means = {regimes[0].log_drift(dt), regimes[1].log_drift(dt)};
    EXPECT_EQ(align_labels(m, regimes, dt), (std::vector<int>{0, 1}));
    EXPECT_EQ(align_labels(swapped(m), regimes, dt), (std::vector<int>{1, 0}));
    EXPECT_EQ(relabel({0, 1, 1, 0}, {1, 0}), (std::vector<int>{1, 0, 0, 1}));
    GaussianHmmModel collapsed = m;
    collapsed.means[1] = collapsed.means[0];
    EXPECT_THROW(align_labels(collapsed, regimes, dt), FitError);
    EXPECT_THROW(align_labels(m, {regimes[0]}, dt), FitError);
}

TEST(Hmm, AlignmentOfFittedModelIsBijectiveUnderRelabelling) {
    const RegimeModel market = fixtures::regime_market();
    std::vector<MatrixXd> seqs;
    for (std::uint64_t e = 0; e < 10; ++e) {
        Rng rng(derive_seed(23, e));
        seqs.push_back(log_returns(generate_path(market, 1280, 1.0 / 256, 0, rng).prices));
    }
    const GaussianHmmModel m = fit(seqs, HmmFitConfig{}, 4);
    const auto a = align_labels(m, market.regimes, 1.0 / 256);
    const auto b = align_labels(swapped(m), market.regimes, 1.0 / 256);
    EXPECT_NE(a[0], a[1]);
    EXPECT_EQ(b, (std::vector<int>{a[1], a[0]}));
}

TEST(Hmm, Accuracy) {
    EXPECT_EQ(accuracy({0, 1, 1, 0}, {0, 1, 1, 0}), 1.0);
    EXPECT_EQ(accuracy({1, 0, 0, 1}, {0, 1, 1, 0}), 1.0);
    EXPECT_EQ(accuracy({0, 0, 0, 1}, {0, 1, 1, 0}), 0.75);
    EXPECT_THROW(accuracy({0}, {0, 1}), ConfigError);
}

TEST(Hmm, SaveLoadRoundTrip) {
    Rng rng(3);
    const Sample s = sample(two_state_model(), 400, rng);
    const GaussianHmmModel m = fit({s.obs}, HmmFitConfig{}, 2);
    std::stringstream ss;
    save_hmm(ss, m);
    const GaussianHmmModel back = load_hmm(ss);
    EXPECT_TRUE(back.transition == m.transition);
    EXPECT_TRUE(back.initial == m.initial);
    for (int k = 0; k < 2; ++k) {
        EXPECT_TRUE(back.means[static_cast<std::size_t>(k)] == m.means[static_cast<std::size_t>(k)]);
        EXPECT_TRUE(back.covariances[static_cast<std::size_t>(k)] == m.covariances[static_cast<std::size_t>(k)]);
    }
    std::stringstream bad("kellylab-gaussian-hmm 1\nstates 2\nfeatures x\n");
    EXPECT_THROW(load_hmm(bad), ConfigError);
}
