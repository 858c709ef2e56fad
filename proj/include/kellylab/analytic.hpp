#pragma once

// Closed-form log-optimal (Kelly) portfolios and the heuristic baselines built on them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kellylab/env.hpp"
#include "kellylab/error.hpp"
#include "kellylab/evaluation.hpp"
#include "kellylab/market.hpp"
#include "kellylab/parallel.hpp"

namespace kellylab {

/// Stock weights; the cash weight is whatever makes the four (or n+1) sum to one.
struct WeightVector {
    VectorXd stocks;

    double cash() const { return 1.0 - stocks.sum(); }

    /// (w_0, w_1, ..., w_n) with w_0 the cash weight.
    VectorXd with_cash() const {
        VectorXd out(stocks.size() + 1);
        out[0] = cash();
        out.tail(stocks.size()) = stocks;
        return out;
    }
};

/// Solves Sigma w = mu - r 1, the stationarity condition of the expected log growth.
inline WeightVector optimal_weights(const MarketParams& params) {
    const MatrixXd cov = params.covariance();
    const VectorXd excess = params.mu.array() - params.cash_rate;
    Eigen::FullPivLU<MatrixXd> lu(cov);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) throw NumericalError("optimal_weights: covariance matrix is singular");
    WeightVector w{lu.solve(excess)};
    const double residual = (cov * w.stocks - excess).lpNorm<Eigen::Infinity>();
    if (!(residual < 1e-10)) {
        throw NumericalError("optimal_weights: ill-conditioned covariance, residual " + std::to_string(residual));
    }
    return w;
}

/// L(w) = w_0 r + sum_i [ w_i mu_i - 1/2 sum_j w_i w_j sigma_i sigma_j rho_ij ], per annum.
inline double expected_growth(const WeightVector& w, const MarketParams& params) {
    return w.cash() * params.cash_rate + w.stocks.dot(params.mu) - 0.5 * w.stocks.dot(params.covariance() * w.stocks);
}

/// Gradient of L with respect to the stock weights: mu - r - Sigma w.
inline VectorXd expected_growth_gradient(const WeightVector& w, const MarketParams& params) {
    return (params.mu.array() - params.cash_rate).matrix() - params.covariance() * w.stocks;
}

/// Fractional Kelly: scale the stock weights by f, the rest sits in cash.
inline WeightVector fractional_weights(const WeightVector& w_star, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fractional_weights: fraction must lie in (0, 1]");
    return WeightVector{w_star.stocks * fraction};
}

// ---------------------------------------------------------------------------
// Markov chain helpers

/// Reachability closure; true when every state reaches every other.
inline bool is_irreducible(const MatrixXd& p) {
    const Index k = p.rows();
    for (Index start = 0; start < k; ++start) {
        std::vector<bool> seen(static_cast<std::size_t>(k), false);
        std::vector<Index> stack{start};
        seen[static_cast<std::size_t>(start)] = true;
        while (!stack.empty()) {
            const Index i = stack.back();
            stack.pop_back();
            for (Index j = 0; j < k; ++j) {
                if (p(i, j) > 0.0 && !seen[static_cast<std::size_t>(j)]) {
                    seen[static_cast<std::size_t>(j)] = true;
                    stack.push_back(j);
                }
            }
        }
        if (std::find(seen.begin(), seen.end(), false) != seen.end()) return false;
    }
    return true;
}

/// An irreducible chain is aperiodic iff its support pattern is primitive,
/// i.e. some power up to (k-1)^2 + 1 is entrywise positive.
inline bool is_aperiodic(const MatrixXd& p) {
    const Index k = p.rows();
    using Pattern = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
    const Pattern a = (p.array() > 0.0).cast<double>();
    Pattern power = a;
    const Index bound = (k - 1) * (k - 1) + 1;
    for (Index e = 1; e <= bound; ++e) {
        if ((power.array() > 0.0).all()) return true;
        power = ((power * a).array() > 0.0).cast<double>();
    }
    return false;
}

/// Limiting distribution pi with pi P = pi, sum(pi) = 1.
inline VectorXd stationary_distribution(const MatrixXd& p) {
    if (!detail::is_row_stochastic(p, 1e-9)) throw NumericalError("stationary_distribution: matrix is not row-stochastic");
    if (!is_irreducible(p)) throw NumericalError("stationary_distribution: chain is reducible");
    if (!is_aperiodic(p)) throw NumericalError("stationary_distribution: chain is periodic");
    const Index k = p.rows();
    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1
    MatrixXd a = p.transpose() - MatrixXd::Identity(k, k);
    a.row(k - 1).setOnes();
    VectorXd b = VectorXd::Zero(k);
    b[k - 1] = 1.0;
    VectorXd pi = a.fullPivLu().solve(b);
    // one refinement step pushes the residual to round-off
    pi += a.fullPivLu().solve(b - a * pi);
    return pi;
}

/// Long-run growth of a policy that plays each regime's own weights: sum_k pi_k L_k.
inline double switching_growth(const VectorXd& regime_growths, const VectorXd& pi) {
    if (regime_growths.size() != pi.size()) throw ConfigError("switching_growth: dimension mismatch");
    return regime_growths.dot(pi);
}

// ---------------------------------------------------------------------------
// Ground-truth value surface over two stock weights

struct GridAxis {
    double min = -1.0;
    double max = 3.0;
    int points = 41;

    double at(int i) const { return points == 1 ? min : min + (max - min) * i / (points - 1); }
};

struct QSurface {
    GridAxis w1;
    GridAxis w2;
    MatrixXd values;  ///< values(i, j) = L(w1_i, w2_j)
};

inline QSurface q_surface(const MarketParams& params, const GridAxis& w1, const GridAxis& w2) {
    if (params.n_assets() != 2) throw ConfigError("q_surface: requires a two-asset market");
    if (w1.points < 1 || w2.points < 1) throw ConfigError("q_surface: grid must have at least one point per axis");
    QSurface s{w1, w2, MatrixXd(w1.points, w2.points)};
    for (int i = 0; i < w1.points; ++i) {
        for (int j = 0; j < w2.points; ++j) {
            WeightVector w{VectorXd(2)};
            w.stocks << w1.at(i), w2.at(j);
            s.values(i, j) = expected_growth(w, params);
        }
    }
    return s;
}

inline void write_q_surface_csv(std::ostream& os, const QSurface& s) {
    const auto prec = os.precision(17);
    os << "w1,w2,L\n";
    for (int i = 0; i < s.w1.points; ++i)
        for (int j = 0; j < s.w2.points; ++j) os << s.w1.at(i) << ',' << s.w2.at(j) << ',' << s.values(i, j) << '\n';
    os.precision(prec);
}

// ---------------------------------------------------------------------------
// Baseline policies

enum class BaselineKind { fixed_weight, staggered, regime_switching };

struct BaselinePolicy {
    BaselineKind kind = BaselineKind::fixed_weight;
    std::vector<WeightVector> targets;  ///< one per regime, already scaled by `fraction`
    Index adjustment_periods = 0;       ///< ramp length; 0 and 1 both mean "jump immediately"
    double fraction = 1.0;

    void validate() const {
        if (targets.empty()) throw ConfigError("baseline: at least one target is required");
        if (adjustment_periods < 0) throw ConfigError("baseline: adjustment_periods must be >= 0");
        if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("baseline: fraction must lie in (0, 1]");
    }
};

inline BaselinePolicy fixed_weight_policy(const WeightVector& w_star) {
    return BaselinePolicy{BaselineKind::fixed_weight, {w_star}, 0, 1.0};
}

/// Linear build-up: target (k+1)/n w* at period k < n, then w*.
inline BaselinePolicy staggered_policy(const WeightVector& w_star, Index n) {
    if (n < 1) throw ConfigError("staggered_policy: n must be >= 1");
    return BaselinePolicy{BaselineKind::staggered, {w_star}, n, 1.0};
}

/// Per-regime fractional Kelly weights with an n-period ramp after every switch.
inline BaselinePolicy regime_switching_policy(const RegimeModel& model, double fraction, Index n) {
    BaselinePolicy p{BaselineKind::regime_switching, {}, n, fraction};
    for (const auto& r : model.regimes) p.targets.push_back(fractional_weights(optimal_weights(r), fraction));
    p.validate();
    return p;
}

/// Stateful runner of a BaselinePolicy inside an episode.
///
/// The ramp starts from the target in force when the regime changed (all cash at
/// episode start). The regime is read through `regime_source`; by default that is
/// the simulator's true label, i.e. the policy has foresight of the period's regime.
class BaselineAgent {
public:
    using RegimeSource = std::function<int(const PortfolioEnv&)>;

    explicit BaselineAgent(BaselinePolicy policy, RegimeSource source = {})
        : policy_(std::move(policy)), source_(std::move(source)) {
        policy_.validate();
    }

    void begin_episode(const PortfolioEnv& env) {
        ramp_from_ = VectorXd::Zero(env.config().n_assets());
        last_target_ = ramp_from_;
        active_regime_ = -1;
        since_change_ = 0;
    }

    VectorXd act(const PortfolioEnv& env) {
        const int regime = policy_.kind == BaselineKind::regime_switching ? current_regime(env) : 0;
        if (regime != active_regime_) {
            ramp_from_ = last_target_;
            active_regime_ = regime;
            since_change_ = 0;
        }
        const VectorXd& goal = policy_.targets.at(static_cast<std::size_t>(regime)).stocks;
        const Index n = std::max<Index>(policy_.kind == BaselineKind::fixed_weight ? 1 : policy_.adjustment_periods, 1);
        const double progress = std::min(1.0, static_cast<double>(since_change_ + 1) / static_cast<double>(n));
        last_target_ = ramp_from_ + progress * (goal - ramp_from_);
        ++since_change_;
        return last_target_;
    }

    const BaselinePolicy& policy() const noexcept { return policy_; }

private:
    int current_regime(const PortfolioEnv& env) const { return source_ ? source_(env) : env.regime(); }

    BaselinePolicy policy_;
    RegimeSource source_;
    VectorXd ramp_from_;
    VectorXd last_target_;
    int active_regime_ = -1;
    Index since_change_ = 0;
};

struct GridCell {
    double fraction = 1.0;
    Index adjustment_periods = 1;
    EvalStats stats;
};

struct GridSearchResult {
    double best_fraction = 1.0;
    Index best_adjustment_periods = 1;
    double best_mean_growth = 0.0;
    std::vector<GridCell> cells;  ///< fraction-major, in grid order
};

/// Evaluate the regime-switching fractional/staggered baseline on every (f, n) cell.
/// All cells share episode seeds. The best cell maximises mean growth; ties go to
/// the larger fraction, then the shorter ramp. Cells with only bankrupt episodes
/// rank last.
inline GridSearchResult rs_baseline_grid_search(const EnvConfig& config, const std::vector<double>& fractions,
                                                const std::vector<Index>& ns, int episodes_per_cell,
                                                std::uint64_t seed,
                                                const BaselineAgent::RegimeSource& source = {}) {
    if (fractions.empty() || ns.empty()) throw ConfigError("grid search: grids must be non-empty");
    config.validate();
    GridSearchResult result;
    for (double f : fractions)
        for (Index n : ns) result.cells.push_back(GridCell{f, n, {}});

    parallel_for(result.cells.size(), [&](std::size_t i) {
        GridCell& cell = result.cells[i];
        BaselineAgent agent(regime_switching_policy(config.market, cell.fraction, cell.adjustment_periods), source);
        cell.stats = evaluate_policy(std::move(agent), config, episodes_per_cell, seed);
    });

    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < result.cells.size(); ++i) {
        const auto m = result.cells[i].stats.mean_growth();
        if (!m) continue;
        if (!best) {
            best = i;
            continue;
        }
        const GridCell& b = result.cells[*best];
        const GridCell& c = result.cells[i];
        const double bm = *b.stats.mean_growth();
        if (*m > bm || (*m == bm && (c.fraction > b.fraction ||
                                     (c.fraction == b.fraction && c.adjustment_periods < b.adjustment_periods))))
            best = i;
    }
    if (!best) best = 0;
    const GridCell& b = result.cells[*best];
    result.best_fraction = b.fraction;
    result.best_adjustment_periods = b.adjustment_periods;
    result.best_mean_growth = b.stats.mean_growth().value_or(std::nan(""));
    return result;
}

} // namespace kellylab
