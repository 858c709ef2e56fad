#pragma once

// Finite-horizon portfolio MDP over a simulated market with execution costs.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kellylab/error.hpp"
#include "kellylab/impact.hpp"
#include "kellylab/market.hpp"
#include "kellylab/random.hpp"

namespace kellylab {

/// Reward handed out on the step that wipes out the portfolio.
inline constexpr double kBankruptcyReward = -10.0;

struct EnvConfig {
    double horizon_years = 5.0;
    int periods_per_year = 256;
    Index n_periods = 1280;
    Index window = 60;
    double initial_wealth = 1000.0;
    RegimeModel market;
    ImpactParams impact;
    double discount = 0.99;

    double dt() const noexcept { return 1.0 / periods_per_year; }
    Index n_assets() const noexcept { return market.n_assets(); }
    /// n*l historical prices, n weights, 1 wealth feature (3l + 4 for three assets).
    Index observation_dim() const noexcept { return n_assets() * window + n_assets() + 1; }

    void validate() const {
        using detail::require;
        require(periods_per_year >= 1, "env: periods_per_year must be >= 1");
        require(horizon_years > 0.0, "env: horizon_years must be > 0");
        require(std::abs(horizon_years * periods_per_year - static_cast<double>(n_periods)) < 1e-9,
                "env: n_periods must equal horizon_years * periods_per_year");
        require(n_periods >= 1, "env: n_periods must be >= 1");
        require(window >= 1, "env: window must be >= 1");
        require(initial_wealth > 0.0 && std::isfinite(initial_wealth), "env: initial_wealth must be > 0");
        require(discount > 0.0 && discount <= 1.0, "env: discount must lie in (0, 1]");
        market.validate();
        impact.validate();
    }
};

struct Observation {
    VectorXd features;

    Index size() const noexcept { return features.size(); }
};

struct StepInfo {
    bool bankrupt = false;
    int regime = 0;          ///< true regime that governed the period just simulated
    double cost_paid = 0.0;  ///< total execution cost booked this step
    double wealth = 0.0;
};

struct StepResult {
    Observation observation;
    double reward = 0.0;
    bool done = false;
    StepInfo info;
};

/// One row of the optional per-step episode trace.
struct TraceRow {
    Index t = 0;
    double wealth = 0.0;
    double cash = 0.0;
    VectorXd weights;  ///< cash weight first, then one per asset
    double reward = 0.0;
    int regime = 0;
    double cost_paid = 0.0;
};

/// Portfolio environment. Not thread-safe; use one instance per thread.
///
/// The unaffected price path (including regimes) is drawn in full at reset from
/// the episode seed, so the market noise never depends on the actions taken.
class PortfolioEnv {
public:
    explicit PortfolioEnv(EnvConfig config) : config_(std::move(config)) { config_.validate(); }

    const EnvConfig& config() const noexcept { return config_; }

    Observation reset(std::uint64_t seed) {
        Rng rng(seed);
        path_ = generate_path(config_.market, config_.n_periods, config_.dt(), config_.window - 1, rng);
        const Index n = config_.n_assets();
        t_ = 0;
        done_ = false;
        holdings_ = VectorXd::Zero(n);
        cash_ = config_.initial_wealth;
        wealth_ = config_.initial_wealth;
        impact_ = ImpactState::neutral(n);
        prices_ = VectorXd::Ones(n);
        history_ = path_.prices.topRows(config_.window);
        trace_.clear();
        if (record_trace_) push_trace(0.0, 0.0);
        return observe();
    }

    StepResult step(const VectorXd& action) {
        if (!started()) throw LifecycleError("step called before reset");
        if (done_) throw LifecycleError("step called on a finished episode; call reset first");
        if (action.size() != config_.n_assets())
            throw ConfigError("step: action has " + std::to_string(action.size()) + " entries, expected " +
                              std::to_string(config_.n_assets()));
        const double dt = config_.dt();
        const int regime = path_.regime_at(t_);
        const MarketParams& params = config_.market.regimes[static_cast<std::size_t>(regime)];

        // (1) target holdings from weights at current wealth
        const VectorXd target = (action * wealth_).cwiseQuotient(prices_);
        const VectorXd trade = target - holdings_;

        // (2) principal at the period-start price plus execution cost, using the
        //     period-end price before this trade's permanent impact
        const VectorXd unaffected_next = path_.at(t_ + 1).transpose();
        const VectorXd end_price = unaffected_next.cwiseProduct(impact_.multipliers);
        double cost = 0.0;
        for (Index i = 0; i < trade.size(); ++i) cost += trade_cost(prices_[i], end_price[i], trade[i], dt, config_.impact);
        cash_ -= trade.dot(prices_) + cost;

        // (3) interest at the current regime's rate
        cash_ *= std::exp(params.cash_rate * dt);

        // (4)-(5) market moves, then the permanent impact of this trade
        impact_ = apply_permanent_impact(std::move(impact_), trade, config_.impact);
        prices_ = unaffected_next.cwiseProduct(impact_.multipliers);
        holdings_ = target;

        // (6) valuation
        const double previous = wealth_;
        wealth_ = cash_ + holdings_.dot(prices_);
        ++t_;

        const bool bankrupt = !(wealth_ > 0.0) || !std::isfinite(wealth_);
        StepResult result;
        result.reward = bankrupt ? kBankruptcyReward : std::log(wealth_ / previous);
        done_ = bankrupt || t_ == config_.n_periods;
        result.done = done_;
        result.info = StepInfo{bankrupt, regime, cost, wealth_};

        const Index l = config_.window;
        if (l > 1) history_.topRows(l - 1) = history_.bottomRows(l - 1).eval();
        history_.row(l - 1) = prices_.transpose();

        if (record_trace_) push_trace(result.reward, cost);
        result.observation = observe();
        return result;
    }

    Observation observe() const {
        const Index n = config_.n_assets();
        const Index l = config_.window;
        Observation obs;
        obs.features.resize(config_.observation_dim());
        for (Index r = 0; r < l; ++r) obs.features.segment(r * n, n) = history_.row(r).transpose();
        obs.features.segment(l * n, n) = stock_weights();
        obs.features[l * n + n] = wealth_ / config_.initial_wealth;
        return obs;
    }

    /// Current stock weights n_i S_i / W (cash weight is 1 - sum).
    VectorXd stock_weights() const {
        if (wealth_ == 0.0) return VectorXd::Zero(holdings_.size());
        return holdings_.cwiseProduct(prices_) / wealth_;
    }

    /// (l-1) x n matrix of per-period log returns of the observed price window.
    MatrixXd log_return_window() const {
        const Index l = config_.window;
        if (l < 2) return MatrixXd(0, config_.n_assets());
        return (history_.bottomRows(l - 1).array() / history_.topRows(l - 1).array()).log().matrix();
    }

    Index clock() const noexcept { return t_; }
    bool done() const noexcept { return done_; }
    bool started() const noexcept { return path_.prices.size() > 0; }
    double wealth() const noexcept { return wealth_; }
    double cash() const noexcept { return cash_; }
    const VectorXd& holdings() const noexcept { return holdings_; }
    const VectorXd& prices() const noexcept { return prices_; }
    const MatrixXd& history() const noexcept { return history_; }
    const ImpactState& impact_state() const noexcept { return impact_; }
    const PricePath& path() const noexcept { return path_; }
    /// True regime in force for the next period. Never part of the observation.
    int regime() const { return path_.regime_at(t_); }

    void record_trace(bool on) { record_trace_ = on; }
    const std::vector<TraceRow>& trace() const noexcept { return trace_; }

private:
    void push_trace(double reward, double cost) {
        TraceRow row;
        row.t = t_;
        row.wealth = wealth_;
        row.cash = cash_;
        const VectorXd w = stock_weights();
        row.weights.resize(w.size() + 1);
        row.weights[0] = 1.0 - w.sum();
        row.weights.tail(w.size()) = w;
        row.reward = reward;
        row.regime = path_.regime_at(t_);
        row.cost_paid = cost;
        trace_.push_back(std::move(row));
    }

    EnvConfig config_;
    PricePath path_;
    Index t_ = 0;
    bool done_ = false;
    VectorXd holdings_;
    double cash_ = 0.0;
    double wealth_ = 0.0;
    ImpactState impact_;
    VectorXd prices_;
    MatrixXd history_;
    bool record_trace_ = false;
    std::vector<TraceRow> trace_;
};

/// Undiscounted reward sum over the horizon: the per-annum exponential growth rate.
/// Empty for bankrupt episodes, whose growth is undefined.
inline std::optional<double> episode_growth_rate(std::span<const double> rewards, double horizon_years,
                                                 bool bankrupt = false) {
    if (bankrupt) return std::nullopt;
    return std::accumulate(rewards.begin(), rewards.end(), 0.0) / horizon_years;
}

/// CSV `t,wealth,cash,w_0,...,w_n,reward,regime,cost_paid`; w_0 is the cash weight.
inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows, Index n_assets) {
    const auto prec = os.precision(17);
    os << "t,wealth,cash";
    for (Index i = 0; i <= n_assets; ++i) os << ",w_" << i;
    os << ",reward,regime,cost_paid\n";
    for (const auto& r : rows) {
        os << r.t << ',' << r.wealth << ',' << r.cash;
        for (Index i = 0; i < r.weights.size(); ++i) os << ',' << r.weights[i];
        os << ',' << r.reward << ',' << r.regime << ',' << r.cost_paid << '\n';
    }
    os.precision(prec);
}

} // namespace kellylab
