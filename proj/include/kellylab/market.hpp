#pragma once

// Correlated geometric Brownian motion with Markov regime switching.

#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "kellylab/error.hpp"
#include "kellylab/random.hpp"
#include "kellylab/types.hpp"

namespace kellylab {

/// Per-regime GBM parameters. All rates are per annum.
struct MarketParams {
    VectorXd mu;
    VectorXd sigma;
    MatrixXd corr;
    double cash_rate = 0.0;

    Index n_assets() const noexcept { return mu.size(); }

    /// Sigma_ij = sigma_i sigma_j rho_ij
    MatrixXd covariance() const { return sigma.asDiagonal() * corr * sigma.asDiagonal(); }

    /// Expected per-period log return (mu - sigma^2/2) dt.
    VectorXd log_drift(double dt) const {
        return (mu.array() - 0.5 * sigma.array().square()).matrix() * dt;
    }

    void validate() const;
};

/// K market regimes plus the per-period transition matrix between them.
struct RegimeModel {
    std::vector<MarketParams> regimes;
    MatrixXd transition;
    VectorXd initial_dist;

    int n_regimes() const noexcept { return static_cast<int>(regimes.size()); }
    Index n_assets() const noexcept { return regimes.empty() ? 0 : regimes.front().n_assets(); }

    static RegimeModel single(MarketParams params) {
        RegimeModel m;
        m.regimes.push_back(std::move(params));
        m.transition = MatrixXd::Ones(1, 1);
        m.initial_dist = VectorXd::Ones(1);
        return m;
    }

    void validate() const;
};

/// Simulated prices. Rows run from t = -warmup to t = n_periods; the row at t = 0
/// is all ones.
struct PricePath {
    MatrixXd prices;
    std::vector<int> regimes;
    double dt = 0.0;
    Index warmup = 0;

    Index n_periods() const noexcept { return prices.rows() - warmup - 1; }
    Index n_assets() const noexcept { return prices.cols(); }

    /// Price row at episode time t, t may be negative down to -warmup.
    auto at(Index t) const { return prices.row(warmup + t); }
    int regime_at(Index t) const { return regimes[static_cast<std::size_t>(warmup + t)]; }

    auto episode_prices() const { return prices.bottomRows(n_periods() + 1); }
};

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
}

inline bool is_row_stochastic(const MatrixXd& p, double tol) {
    if (p.rows() != p.cols()) return false;
    for (Index i = 0; i < p.rows(); ++i) {
        if ((p.row(i).array() < 0.0).any()) return false;
        if (std::abs(p.row(i).sum() - 1.0) > tol) return false;
    }
    return true;
}

} // namespace detail

/// Lower-triangular L with L L^T = corr.
///
/// Accepts positive semi-definite input: a pivot within 1e-12 of zero yields a
/// zero column. Throws NumericalError naming the first leading minor that is
/// negative.
inline MatrixXd cholesky_factor(const MatrixXd& corr) {
    constexpr double tol = 1e-12;
    if (corr.rows() != corr.cols()) throw NumericalError("cholesky_factor: matrix is not square");
    const Index n = corr.rows();
    MatrixXd l = MatrixXd::Zero(n, n);
    for (Index j = 0; j < n; ++j) {
        double d = corr(j, j) - l.row(j).head(j).squaredNorm();
        if (d < -tol) {
            throw NumericalError("cholesky_factor: matrix is not positive semi-definite (leading minor " +
                                 std::to_string(j + 1) + " of " + std::to_string(n) + " is negative)");
        }
        if (d <= tol) {
            // semi-definite direction: column must vanish
            for (Index i = j + 1; i < n; ++i) {
                const double r = corr(i, j) - l.row(i).head(j).dot(l.row(j).head(j));
                if (std::abs(r) > 1e-9) {
                    throw NumericalError("cholesky_factor: matrix is not positive semi-definite (leading minor " +
                                         std::to_string(j + 1) + " of " + std::to_string(n) + " is singular)");
                }
            }
            continue;
        }
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (Index i = j + 1; i < n; ++i)
            l(i, j) = (corr(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / ljj;
    }
    return l;
}

inline void MarketParams::validate() const {
    using detail::require;
    const Index n = mu.size();
    require(n >= 1, "market: at least one asset is required");
    require(sigma.size() == n, "market: sigma has " + std::to_string(sigma.size()) + " entries, mu has " +
                                   std::to_string(n));
    require(corr.rows() == n && corr.cols() == n, "market: corr must be " + std::to_string(n) + "x" +
                                                      std::to_string(n));
    require(mu.allFinite() && sigma.allFinite() && corr.allFinite() && std::isfinite(cash_rate),
            "market: parameters must be finite");
    require((sigma.array() > 0.0).all(), "market: every sigma must be > 0");
    for (Index i = 0; i < n; ++i) {
        require(std::abs(corr(i, i) - 1.0) < 1e-12, "market: corr must have unit diagonal");
        for (Index j = 0; j < n; ++j) {
            require(std::abs(corr(i, j) - corr(j, i)) < 1e-12, "market: corr must be symmetric");
            require(corr(i, j) >= -1.0 && corr(i, j) <= 1.0, "market: corr entries must lie in [-1, 1]");
        }
    }
    try {
        (void)cholesky_factor(corr);
    } catch (const NumericalError& e) {
        throw ConfigError(std::string("market: corr is not positive semi-definite: ") + e.what());
    }
}

inline void RegimeModel::validate() const {
    using detail::require;
    const Index k = static_cast<Index>(regimes.size());
    require(k >= 1, "regimes: at least one regime is required");
    for (std::size_t i = 0; i < regimes.size(); ++i) {
        try {
            regimes[i].validate();
        } catch (const ConfigError& e) {
            throw ConfigError("regime " + std::to_string(i) + ": " + e.what());
        }
        require(regimes[i].n_assets() == regimes.front().n_assets(), "regimes: asset count differs between regimes");
    }
    require(transition.rows() == k && transition.cols() == k,
            "regimes: transition must be " + std::to_string(k) + "x" + std::to_string(k));
    require(detail::is_row_stochastic(transition, 1e-12),
            "regimes: transition rows must be non-negative and sum to 1");
    require(initial_dist.size() == k, "regimes: initial_dist must have one entry per regime");
    require((initial_dist.array() >= 0.0).all() && std::abs(initial_dist.sum() - 1.0) < 1e-12,
            "regimes: initial_dist must be a probability vector");
}

/// One exact GBM step with a precomputed Cholesky factor of the correlation.
inline VectorXd step_prices(const VectorXd& prices, const MarketParams& params, const MatrixXd& chol, double dt,
                            const VectorXd& draws) {
    const VectorXd db = std::sqrt(dt) * (chol * draws);
    const VectorXd exponent = params.log_drift(dt) + params.sigma.cwiseProduct(db);
    return prices.cwiseProduct(exponent.array().exp().matrix());
}

inline VectorXd step_prices(const VectorXd& prices, const MarketParams& params, double dt, const VectorXd& draws) {
    return step_prices(prices, params, cholesky_factor(params.corr), dt, draws);
}

/// Labels Z_0..Z_n: Z_0 from the initial distribution, then the chain.
inline std::vector<int> sample_regime_path(const RegimeModel& model, Index n_periods, Rng& rng) {
    if (n_periods < 1) throw ConfigError("sample_regime_path: n_periods must be >= 1");
    std::vector<int> path(static_cast<std::size_t>(n_periods + 1));
    if (model.n_regimes() == 1) return path;
    path[0] = rng.categorical(model.initial_dist);
    for (std::size_t t = 1; t < path.size(); ++t) path[t] = rng.categorical(model.transition.row(path[t - 1]));
    return path;
}

namespace detail {

/// exp(c log P) for a 2x2 stochastic matrix via its eigendecomposition.
/// Eigenvalues of a 2x2 stochastic matrix are 1 and trace - 1, both real.
inline MatrixXd fractional_power_2x2(const MatrixXd& p, double c) {
    const double lambda = p.trace() - 1.0;
    if (std::abs(1.0 - lambda) < 1e-14) return MatrixXd::Identity(2, 2);
    if (lambda <= 0.0) {
        throw NumericalError("rescale_transition: eigenvalue " + std::to_string(lambda) +
                             " <= 0, no real matrix logarithm exists");
    }
    // P = 1 pi^T + lambda (I - 1 pi^T), pi the stationary vector
    const double a = p(0, 1), b = p(1, 0);
    MatrixXd stationary(2, 2);
    stationary << b, a, b, a;
    stationary /= (a + b);
    return stationary + std::pow(lambda, c) * (MatrixXd::Identity(2, 2) - stationary);
}

inline void check_principal_log(const MatrixXd& p) {
    Eigen::EigenSolver<MatrixXd> es(p);
    for (Index i = 0; i < p.rows(); ++i) {
        const auto ev = es.eigenvalues()[i];
        if (std::abs(ev.imag()) < 1e-12 && ev.real() <= 0.0) {
            throw NumericalError("rescale_transition: eigenvalue on the non-positive real axis, "
                                 "no real principal logarithm");
        }
    }
}

} // namespace detail

/// Generator Q with exp(Q dt) = P, the principal matrix logarithm divided by dt.
inline MatrixXd transition_generator(const MatrixXd& p, double dt) {
    if (!detail::is_row_stochastic(p, 1e-9)) throw NumericalError("transition_generator: matrix is not row-stochastic");
    const Index k = p.rows();
    MatrixXd log_p;
    if (k == 1) {
        log_p = MatrixXd::Zero(1, 1);
    } else if (k == 2) {
        const double lambda = p.trace() - 1.0;
        if (lambda <= 0.0) throw NumericalError("transition_generator: no real matrix logarithm");
        const double a = p(0, 1), b = p(1, 0);
        if (a + b == 0.0) {
            log_p = MatrixXd::Zero(2, 2);
        } else {
            MatrixXd q(2, 2);
            q << -a, a, b, -b;
            log_p = q * (-std::log(lambda) / (a + b));
        }
    } else {
        detail::check_principal_log(p);
        log_p = p.log();
    }
    MatrixXd q = log_p / dt;
    for (Index i = 0; i < k; ++i)
        for (Index j = 0; j < k; ++j)
            if (i != j && q(i, j) < -1e-9 / dt)
                throw NumericalError("transition_generator: logarithm has a negative off-diagonal rate, "
                                     "not a valid generator");
    return q;
}

/// Re-express a per-period transition matrix measured over from_dt as one over to_dt:
/// P(to) = exp((to/from) log P(from)).
inline MatrixXd rescale_transition(const MatrixXd& p, double from_dt, double to_dt) {
    if (!(from_dt > 0.0) || !(to_dt > 0.0)) throw NumericalError("rescale_transition: time steps must be positive");
    if (!detail::is_row_stochastic(p, 1e-9)) throw NumericalError("rescale_transition: matrix is not row-stochastic");
    const Index k = p.rows();
    const double c = to_dt / from_dt;
    MatrixXd out;
    if (k == 1) {
        out = MatrixXd::Ones(1, 1);
    } else if (k == 2) {
        out = detail::fractional_power_2x2(p, c);
        (void)transition_generator(p, from_dt);
    } else {
        detail::check_principal_log(p);
        const MatrixXd q = transition_generator(p, from_dt);
        out = (q * to_dt).exp();
    }
    for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < k; ++j) {
            if (!std::isfinite(out(i, j))) throw NumericalError("rescale_transition: non-finite result");
            if (out(i, j) < -1e-9) throw NumericalError("rescale_transition: result has a negative probability");
            if (out(i, j) < 0.0) out(i, j) = 0.0;
        }
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

/// Simulate `warmup` pre-episode periods followed by an n_periods episode, then
/// rescale so that every asset is priced at exactly 1 at episode start.
///
/// The regime chain starts `warmup` steps before the episode. The RNG is consumed
/// in a fixed order (regime path first, then one normal vector per step), so the
/// path is a pure function of (model, n_periods, dt, warmup, rng state).
inline PricePath generate_path(const RegimeModel& model, Index n_periods, double dt, Index warmup, Rng& rng) {
    if (n_periods < 1) throw ConfigError("generate_path: n_periods must be >= 1");
    if (warmup < 0) throw ConfigError("generate_path: warmup must be >= 0");
    const Index n_assets = model.n_assets();
    const Index total = warmup + n_periods;

    PricePath path;
    path.dt = dt;
    path.warmup = warmup;
    path.regimes = sample_regime_path(model, total, rng);
    path.prices.resize(total + 1, n_assets);

    std::vector<MatrixXd> chol;
    chol.reserve(model.regimes.size());
    for (const auto& r : model.regimes) chol.push_back(cholesky_factor(r.corr));

    VectorXd s = VectorXd::Ones(n_assets);
    path.prices.row(0) = s.transpose();
    for (Index t = 0; t < total; ++t) {
        const auto k = static_cast<std::size_t>(path.regimes[static_cast<std::size_t>(t)]);
        const VectorXd z = rng.normal_vector(n_assets);
        s = step_prices(s, model.regimes[k], chol[k], dt, z);
        path.prices.row(t + 1) = s.transpose();
    }
    const Eigen::RowVectorXd start = path.prices.row(warmup);
    for (Index t = 0; t <= total; ++t) path.prices.row(t).array() /= start.array();
    path.prices.row(warmup).setOnes();
    return path;
}

/// CSV with header `t,asset_0,...,asset_{n-1},regime`, one row per episode period.
inline void write_price_csv(std::ostream& os, const PricePath& path) {
    const auto prec = os.precision(17);
    os << 't';
    for (Index i = 0; i < path.n_assets(); ++i) os << ",asset_" << i;
    os << ",regime\n";
    for (Index t = 0; t <= path.n_periods(); ++t) {
        os << t;
        for (Index i = 0; i < path.n_assets(); ++i) os << ',' << path.at(t)[i];
        os << ',' << path.regime_at(t) << '\n';
    }
    os.precision(prec);
}

} // namespace kellylab
