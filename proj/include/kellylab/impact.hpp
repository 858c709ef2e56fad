#pragma once

// Bertsimas-Lo style execution cost and permanent price impact.

#include <cmath>

#include <Eigen/Dense>

#include "kellylab/error.hpp"

namespace kellylab {

struct ImpactParams {
    double eta = 0.0;    ///< temporary impact, scales the trading rate Y/dt
    double gamma = 0.0;  ///< permanent impact per share traded

    void validate() const {
        if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("impact: eta must be finite and >= 0");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("impact: gamma must be finite and >= 0");
    }
};

/// Cumulative permanent-impact factor per asset, exp(gamma * net shares traded).
struct ImpactState {
    Eigen::VectorXd multipliers;

    static ImpactState neutral(Eigen::Index n_assets) { return {Eigen::VectorXd::Ones(n_assets)}; }
};

/// Excess cost of trading `shares` at a constant rate over one period of length dt,
/// relative to executing everything at s_start. The unaffected price is taken to
/// move linearly from s_start to s_end over the period:
///
///   C = Y [ 1/2 (1 + eta Y / dt)(s_end - s_start) + gamma Y (s_end / 3 + s_start / 6) ]
///
/// The temporary-impact term is kept in this linearised form even though it is
/// not the exact integral of the linear path.
inline double trade_cost(double s_start, double s_end, double shares, double dt, const ImpactParams& params) {
    const double y = shares;
    return y * (0.5 * (1.0 + params.eta / dt * y) * (s_end - s_start) +
                params.gamma * y * (s_end / 3.0 + s_start / 6.0));
}

inline ImpactState apply_permanent_impact(ImpactState state, const Eigen::VectorXd& shares,
                                          const ImpactParams& params) {
    state.multipliers.array() *= (params.gamma * shares.array()).exp();
    return state;
}

} // namespace kellylab
