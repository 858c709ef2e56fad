#pragma once

// Market parameter sets shared by the tests.

#include "kellylab/env.hpp"
#include "kellylab/market.hpp"

namespace fixtures {

using kellylab::MarketParams;
using kellylab::MatrixXd;
using kellylab::RegimeModel;
using kellylab::VectorXd;

inline MatrixXd corr3(double r01, double r02, double r12) {
    MatrixXd c(3, 3);
    c << 1.0, r01, r02, r01, 1.0, r12, r02, r12, 1.0;
    return c;
}

/// VUG / VTV / GLD, cash 4%.
inline MarketParams etf_market() {
    MarketParams p;
    p.mu = VectorXd(3);
    p.mu << 0.124, 0.105, 0.072;
    p.sigma = VectorXd(3);
    p.sigma << 0.255, 0.209, 0.145;
    p.corr = corr3(0.81, 0.12, 0.08);
    p.cash_rate = 0.04;
    return p;
}

/// US / Germany / UK bull regime, cash 5%.
inline MarketParams bull_market() {
    MarketParams p;
    p.mu = VectorXd(3);
    p.mu << 0.103, 0.138, 0.140;
    p.sigma = VectorXd(3);
    p.sigma << 0.120, 0.166, 0.166;
    p.corr = corr3(0.41, 0.26, 0.43);
    p.cash_rate = 0.05;
    return p;
}

/// US / Germany / UK bear regime, cash 1%.
inline MarketParams bear_market() {
    MarketParams p;
    p.mu = VectorXd(3);
    p.mu << -0.021, 0.097, 0.042;
    p.sigma = VectorXd(3);
    p.sigma << 0.216, 0.379, 0.288;
    p.corr = corr3(0.60, 0.45, 0.45);
    p.cash_rate = 0.01;
    return p;
}

inline MatrixXd regime_transition() {
    MatrixXd p(2, 2);
    p << 0.997, 0.003, 0.009, 0.991;
    return p;
}

inline RegimeModel regime_market() {
    RegimeModel m;
    m.regimes = {bull_market(), bear_market()};
    m.transition = regime_transition();
    m.initial_dist = VectorXd(2);
    m.initial_dist << 0.75, 0.25;
    return m;
}

inline MarketParams single_asset(double mu = 0.12, double sigma = 0.2, double r = 0.04) {
    MarketParams p;
    p.mu = VectorXd::Constant(1, mu);
    p.sigma = VectorXd::Constant(1, sigma);
    p.corr = MatrixXd::Ones(1, 1);
    p.cash_rate = r;
    return p;
}

/// Five years of 256 periods, window 60, W0 = 1000, eta 1e-9, gamma 1e-7.
inline kellylab::EnvConfig env_config(RegimeModel market) {
    kellylab::EnvConfig c;
    c.market = std::move(market);
    c.impact = {1e-9, 1e-7};
    return c;
}

} // namespace fixtures
