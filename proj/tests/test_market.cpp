#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "kellylab/analytic.hpp"
#include "kellylab/market.hpp"

using namespace kellylab;

TEST(Cholesky, IdentityAndTwoByTwo) {
    EXPECT_TRUE(cholesky_factor(MatrixXd::Identity(3, 3)).isApprox(MatrixXd::Identity(3, 3), 0.0));
    MatrixXd c(2, 2);
    c << 1.0, 0.5, 0.5, 1.0;
    MatrixXd expected(2, 2);
    expected << 1.0, 0.0, 0.5, std::sqrt(0.75);
    EXPECT_LT((cholesky_factor(c) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Cholesky, EtfCorrelationRoundTrip) {
    const MatrixXd c = fixtures::etf_market().corr;
    const MatrixXd l = cholesky_factor(c);
    EXPECT_LT((l * l.transpose() - c).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_TRUE(l.isLowerTriangular());
}

TEST(Cholesky, SemiDefiniteAccepted) {
    MatrixXd c(3, 3);
    c << 1, 1, 0, 1, 1, 0, 0, 0, 1;
    const MatrixXd l = cholesky_factor(c);
    EXPECT_LT((l * l.transpose() - c).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Cholesky, IndefiniteNamesLeadingMinor) {
    const MatrixXd c = fixtures::corr3(0.9, 0.9, -0.9);
    try {
        cholesky_factor(c);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("leading minor 3"), std::string::npos) << e.what();
    }
}

TEST(MarketParams, ValidationErrors) {
    MarketParams p = fixtures::etf_market();
    EXPECT_NO_THROW(p.validate());
    MarketParams bad = p;
    bad.sigma[1] = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = p;
    bad.corr(0, 1) = 0.5;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = p;
    bad.corr = fixtures::corr3(0.9, 0.9, -0.9);
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = p;
    bad.mu = VectorXd::Zero(2);
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(RegimeModel, ValidationErrors) {
    RegimeModel m = fixtures::regime_market();
    EXPECT_NO_THROW(m.validate());
    RegimeModel bad = m;
    bad.transition(0, 0) = 0.99;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = m;
    bad.initial_dist << 0.5, 0.6;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(StepPrices, DeterministicLimits) {
    MarketParams p = fixtures::single_asset(0.1, 1e-300, 0.0);
    const VectorXd one = VectorXd::Ones(1);
    EXPECT_NEAR(step_prices(one, p, 1.0, VectorXd::Constant(1, 0.7))[0], std::exp(0.1), 1e-15);

    const MarketParams etf = fixtures::etf_market();
    const double dt = 1.0 / 256;
    const VectorXd s = step_prices(VectorXd::Ones(3), etf, dt, VectorXd::Zero(3));
    for (Index i = 0; i < 3; ++i)
        EXPECT_NEAR(s[i], std::exp((etf.mu[i] - 0.5 * etf.sigma[i] * etf.sigma[i]) * dt), 1e-15);
}

TEST(StepPrices, MonteCarloLogNormalLaw) {
    const MarketParams p = fixtures::etf_market();
    const double dt = 1.0 / 256;
    const MatrixXd l = cholesky_factor(p.corr);
    Rng rng(2024);
    const int n = 100000;
    MatrixXd x(n, 3);
    for (int k = 0; k < n; ++k)
        x.row(k) = step_prices(VectorXd::Ones(3), p, l, dt, rng.normal_vector(3)).array().log().transpose();
    const VectorXd mean = x.colwise().mean().transpose();
    const MatrixXd centered = x.rowwise() - mean.transpose();
    const MatrixXd cov = centered.transpose() * centered / (n - 1);
    const VectorXd drift = p.log_drift(dt);
    const MatrixXd sigma = p.covariance() * dt;
    for (Index i = 0; i < 3; ++i) {
        EXPECT_NEAR(mean[i], drift[i], 3.0 * std::sqrt(sigma(i, i) / n));
        for (Index j = 0; j < 3; ++j) {
            // var of a sample covariance of jointly normal variables
            const double se = std::sqrt((sigma(i, i) * sigma(j, j) + sigma(i, j) * sigma(i, j)) / n);
            EXPECT_NEAR(cov(i, j), sigma(i, j), 3.0 * se) << i << "," << j;
        }
    }
}

TEST(RegimePath, DegenerateChains) {
    Rng rng(1);
    const auto single = sample_regime_path(RegimeModel::single(fixtures::etf_market()), 50, rng);
    EXPECT_EQ(single.size(), 51u);
    for (int z : single) EXPECT_EQ(z, 0);

    RegimeModel absorbing = fixtures::regime_market();
    absorbing.transition = MatrixXd::Identity(2, 2);
    absorbing.initial_dist << 1.0, 0.0;
    for (int z : sample_regime_path(absorbing, 500, rng)) EXPECT_EQ(z, 0);
}

TEST(RegimePath, SwitchFrequenciesMatchTable) {
    const RegimeModel m = fixtures::regime_market();
    Rng rng(77);
    const auto path = sample_regime_path(m, 1000000, rng);
    double from[2] = {0, 0}, switched[2] = {0, 0}, occupied[2] = {0, 0};
    for (std::size_t t = 0; t + 1 < path.size(); ++t) {
        from[path[t]] += 1;
        if (path[t + 1] != path[t]) switched[path[t]] += 1;
    }
    for (int z : path) occupied[z] += 1;
    const double p01 = m.transition(0, 1), p10 = m.transition(1, 0);
    EXPECT_NEAR(switched[0] / from[0], p01, 3.0 * std::sqrt(p01 * (1 - p01) / from[0]));
    EXPECT_NEAR(switched[1] / from[1], p10, 3.0 * std::sqrt(p10 * (1 - p10) / from[1]));
    // occupation frequency: autocorrelated, so allow the integrated-autocorrelation inflated error
    const double lambda = m.transition.trace() - 1.0;
    const double n = static_cast<double>(path.size());
    const double se = std::sqrt(0.75 * 0.25 / n * (1 + lambda) / (1 - lambda));
    EXPECT_NEAR(occupied[0] / n, 0.75, 3.0 * se);
}

TEST(RescaleTransition, IdentityAndChapmanKolmogorov) {
    const MatrixXd p = fixtures::regime_transition();
    const double a = 1.0 / 256;
    EXPECT_LT((rescale_transition(p, a, a) - p).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((rescale_transition(p, a, 2 * a) - p * p).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((rescale_transition(p, a, 3 * a) - p * p * p).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RescaleTransition, MonthlyRoundTrip) {
    const MatrixXd p = fixtures::regime_transition();
    const MatrixXd monthly = rescale_transition(p, 1.0 / 256, 1.0 / 12);
    EXPECT_TRUE(detail::is_row_stochastic(monthly, 1e-12));
    EXPECT_LT((rescale_transition(monthly, 1.0 / 12, 1.0 / 256) - p).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(RescaleTransition, ThreeStateUsesGeneralLogarithm) {
    MatrixXd p(3, 3);
    p << 0.90, 0.07, 0.03, 0.05, 0.90, 0.05, 0.02, 0.08, 0.90;
    EXPECT_LT((rescale_transition(p, 1.0, 2.0) - p * p).cwiseAbs().maxCoeff(), 1e-10);
    const MatrixXd half = rescale_transition(p, 1.0, 0.5);
    EXPECT_LT((half * half - p).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RescaleTransition, RejectsChainsWithoutRealLogarithm) {
    MatrixXd flip(2, 2);
    flip << 0.2, 0.8, 0.9, 0.1;  // second eigenvalue -0.7
    EXPECT_THROW(rescale_transition(flip, 1.0, 0.5), NumericalError);
    MatrixXd not_stochastic(2, 2);
    not_stochastic << 0.5, 0.6, 0.5, 0.5;
    EXPECT_THROW(rescale_transition(not_stochastic, 1.0, 2.0), NumericalError);
}

TEST(TransitionGenerator, ExponentiatesBack) {
    const MatrixXd p = fixtures::regime_transition();
    const double dt = 1.0 / 256;
    const MatrixXd q = transition_generator(p, dt);
    EXPECT_LT(q.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT(q(0, 1), 0.0);
    EXPECT_GT(q(1, 0), 0.0);
    EXPECT_LT((MatrixXd((q * dt).exp()) - p).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GeneratePath, EpisodeStartsAtOneAndIsPositive) {
    const RegimeModel m = fixtures::regime_market();
    for (Index warmup : {0, 59}) {
        Rng rng(3);
        const PricePath path = generate_path(m, 1280, 1.0 / 256, warmup, rng);
        EXPECT_EQ(path.prices.rows(), warmup + 1281);
        EXPECT_EQ(path.n_periods(), 1280);
        EXPECT_TRUE((path.at(0).array() == 1.0).all());
        EXPECT_TRUE((path.prices.array() > 0.0).all());
        EXPECT_EQ(path.regimes.size(), static_cast<std::size_t>(warmup + 1281));
    }
}

TEST(GeneratePath, ZeroVolatilityIsExponential) {
    const RegimeModel m = RegimeModel::single(fixtures::single_asset(0.1, 1e-300, 0.0));
    Rng rng(8);
    const PricePath path = generate_path(m, 256, 1.0 / 256, 5, rng);
    for (Index t = -5; t <= 256; ++t) EXPECT_NEAR(path.at(t)[0], std::exp(0.1 * t / 256.0), 1e-13);
}

TEST(GeneratePath, Determinism) {
    const RegimeModel m = fixtures::regime_market();
    Rng a(11), b(11), c(12);
    const PricePath pa = generate_path(m, 300, 1.0 / 256, 59, a);
    const PricePath pb = generate_path(m, 300, 1.0 / 256, 59, b);
    const PricePath pc = generate_path(m, 300, 1.0 / 256, 59, c);
    EXPECT_TRUE(pa.prices == pb.prices);
    EXPECT_EQ(pa.regimes, pb.regimes);
    // every stochastic entry differs (row `warmup` is pinned to 1)
    for (Index r = 0; r < pa.prices.rows(); ++r) {
        if (r == pa.warmup) continue;
        for (Index i = 0; i < 3; ++i) EXPECT_NE(pa.prices(r, i), pc.prices(r, i));
    }
}

TEST(GeneratePath, EmpiricalCorrelationConverges) {
    const RegimeModel m = RegimeModel::single(fixtures::etf_market());
    Rng rng(99);
    const PricePath path = generate_path(m, 100000, 1.0 / 256, 0, rng);
    const MatrixXd x = (path.prices.bottomRows(100000).array() / path.prices.topRows(100000).array()).log();
    const MatrixXd c = x.rowwise() - x.colwise().mean();
    const MatrixXd cov = c.transpose() * c / (x.rows() - 1);
    const VectorXd sd = cov.diagonal().cwiseSqrt();
    const MatrixXd rho = cov.cwiseQuotient(sd * sd.transpose());
    for (Index i = 0; i < 3; ++i)
        for (Index j = i + 1; j < 3; ++j) {
            const double r = m.regimes[0].corr(i, j);
            EXPECT_NEAR(rho(i, j), r, 3.0 * (1 - r * r) / std::sqrt(100000.0));
        }
}

TEST(PriceCsv, HeaderAndRowCount) {
    Rng rng(1);
    const PricePath path = generate_path(fixtures::regime_market(), 1280, 1.0 / 256, 59, rng);
    std::ostringstream os;
    write_price_csv(os, path);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "t,asset_0,asset_1,asset_2,regime");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 1281);
}
