#pragma once

// Experiment configuration files.
//
// A config is a JSON object with "format_version": 1 and the blocks
//   market    regimes[{name, mu, sigma, corr, cash_rate}], transition, transition_dt, initial_dist
//   impact    eta, gamma
//   env       horizon_years, periods_per_year, window, initial_wealth, discount
//   algo      name (ppo|a2c), policy (mlp|context), every TrainConfig field
//   hmm       HmmFitConfig fields plus fit_episodes
//   baseline  kind (fixed|staggered|regime_switching), fraction, adjustment_periods
//   grid      fractions, adjustment_periods, episodes_per_cell
//   qsurface  regime, w1 {min, max, points}, w2 {min, max, points}
//   run       seed, episodes, output_dir
// Omitted blocks and fields take their defaults; unknown keys are rejected.
// "transition" is per period unless "transition_dt" (in years) says otherwise,
// in which case it is rescaled to one period. Errors name the JSON pointer of
// the offending value.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kellylab/analytic.hpp"
#include "kellylab/env.hpp"
#include "kellylab/error.hpp"
#include "kellylab/hmm.hpp"
#include "kellylab/market.hpp"
#include "kellylab/onpolicy.hpp"
#include "kellylab/train.hpp"

namespace kellylab {

inline constexpr int kConfigFormatVersion = 1;

enum class PolicyKind { mlp, context };

struct BaselineConfig {
    BaselineKind kind = BaselineKind::fixed_weight;
    double fraction = 1.0;
    Index adjustment_periods = 1;
};

struct GridConfig {
    std::vector<double> fractions{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    std::vector<Index> adjustment_periods{1, 2, 4, 8, 16, 32, 64};
    int episodes_per_cell = 10;
};

struct QSurfaceConfig {
    int regime = 0;
    GridAxis w1;
    GridAxis w2;
};

struct RunConfig {
    std::uint64_t seed = 0;
    int episodes = 10;
    std::string output_dir = "runs";
};

struct ExperimentConfig {
    std::vector<std::string> regime_names;
    EnvConfig env;
    TrainConfig algo;
    PolicyKind policy = PolicyKind::mlp;
    ContextSettings context;
    BaselineConfig baseline;
    GridConfig grid;
    QSurfaceConfig qsurface;
    RunConfig run;

    void validate() const;
};

namespace detail {

using nlohmann::json;

/// Typed access to one JSON object that remembers its pointer and which keys
/// were read, so leftovers can be reported.
class ConfigReader {
public:
    ConfigReader(const json& j, std::string pointer) : j_(j), pointer_(std::move(pointer)) {
        if (!j_.is_object()) fail(pointer_, "expected an object");
    }

    [[noreturn]] static void fail(const std::string& pointer, const std::string& what) {
        throw ConfigError("config " + (pointer.empty() ? std::string("/") : pointer) + ": " + what);
    }

    const std::string& pointer() const noexcept { return pointer_; }
    std::string at(const std::string& key) const { return pointer_ + "/" + key; }
    bool has(const std::string& key) const { return j_.contains(key); }

    const json* get(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    ConfigReader child(const std::string& key) {
        const json* v = get(key);
        static const json empty = json::object();
        return ConfigReader(v ? *v : empty, at(key));
    }

    double number(const std::string& key, double fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_number()) fail(at(key), "expected a number");
        return v->get<double>();
    }

    long long integer(const std::string& key, long long fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_number_integer()) fail(at(key), "expected an integer");
        return v->get<long long>();
    }

    std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_number_unsigned()) fail(at(key), "expected a non-negative integer");
        return v->get<std::uint64_t>();
    }

    bool boolean(const std::string& key, bool fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_boolean()) fail(at(key), "expected true or false");
        return v->get<bool>();
    }

    std::string string(const std::string& key, const std::string& fallback) {
        const json* v = get(key);
        if (!v) return fallback;
        if (!v->is_string()) fail(at(key), "expected a string");
        return v->get<std::string>();
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) fail(at(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string pointer_;
    std::set<std::string> seen_;
};

inline VectorXd read_vector(const json& v, const std::string& pointer) {
    if (!v.is_array()) ConfigReader::fail(pointer, "expected an array of numbers");
    VectorXd out(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) ConfigReader::fail(pointer + "/" + std::to_string(i), "expected a number");
        out[static_cast<Index>(i)] = v[i].get<double>();
    }
    return out;
}

inline MatrixXd read_matrix(const json& v, const std::string& pointer) {
    if (!v.is_array() || v.empty()) ConfigReader::fail(pointer, "expected a non-empty array of rows");
    const std::size_t cols = v[0].is_array() ? v[0].size() : 0;
    MatrixXd out(static_cast<Index>(v.size()), static_cast<Index>(cols));
    for (std::size_t i = 0; i < v.size(); ++i) {
        const std::string row_ptr = pointer + "/" + std::to_string(i);
        const VectorXd row = read_vector(v[i], row_ptr);
        if (static_cast<std::size_t>(row.size()) != cols)
            ConfigReader::fail(row_ptr, "expected " + std::to_string(cols) + " entries like row 0");
        out.row(static_cast<Index>(i)) = row.transpose();
    }
    return out;
}

inline json write_vector(const VectorXd& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline json write_matrix(const MatrixXd& m) {
    json a = json::array();
    for (Index i = 0; i < m.rows(); ++i) a.push_back(write_vector(m.row(i).transpose()));
    return a;
}

inline const char* to_string(BaselineKind k) {
    switch (k) {
    case BaselineKind::staggered: return "staggered";
    case BaselineKind::regime_switching: return "regime_switching";
    case BaselineKind::fixed_weight: break;
    }
    return "fixed";
}

/// Runs `fn`, re-throwing module validation errors under `pointer`.
template <class Fn>
void validate_at(const std::string& pointer, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        ConfigReader::fail(pointer, e.what());
    } catch (const NumericalError& e) {
        ConfigReader::fail(pointer, e.what());
    }
}

inline void parse_market(ConfigReader r, ExperimentConfig& c, double period_dt) {
    const json* regimes = r.get("regimes");
    if (!regimes || !regimes->is_array() || regimes->empty())
        ConfigReader::fail(r.at("regimes"), "expected a non-empty array of regimes");
    RegimeModel& m = c.env.market;
    m.regimes.clear();
    c.regime_names.clear();
    for (std::size_t i = 0; i < regimes->size(); ++i) {
        const std::string ptr = r.at("regimes") + "/" + std::to_string(i);
        ConfigReader g((*regimes)[i], ptr);
        MarketParams p;
        c.regime_names.push_back(g.string("name", "regime_" + std::to_string(i)));
        const json* mu = g.get("mu");
        const json* sigma = g.get("sigma");
        const json* corr = g.get("corr");
        if (!mu) ConfigReader::fail(g.at("mu"), "required");
        if (!sigma) ConfigReader::fail(g.at("sigma"), "required");
        p.mu = read_vector(*mu, g.at("mu"));
        p.sigma = read_vector(*sigma, g.at("sigma"));
        p.corr = corr ? read_matrix(*corr, g.at("corr")) : MatrixXd::Identity(p.mu.size(), p.mu.size());
        p.cash_rate = g.number("cash_rate", 0.0);
        g.finish();
        validate_at(ptr, [&] { p.validate(); });
        m.regimes.push_back(std::move(p));
    }
    const auto k = static_cast<Index>(m.regimes.size());
    const json* transition = r.get("transition");
    m.transition = transition ? read_matrix(*transition, r.at("transition")) : MatrixXd::Identity(k, k);
    const json* tdt = r.get("transition_dt");
    if (tdt) {
        if (!tdt->is_number() || !(tdt->get<double>() > 0.0))
            ConfigReader::fail(r.at("transition_dt"), "expected a positive number of years");
        const double from = tdt->get<double>();
        validate_at(r.at("transition"), [&] {
            if (!is_row_stochastic(m.transition, 1e-12)) throw ConfigError("rows must be non-negative and sum to 1");
            m.transition = rescale_transition(m.transition, from, period_dt);
        });
    }
    const json* init = r.get("initial_dist");
    if (init) {
        m.initial_dist = read_vector(*init, r.at("initial_dist"));
    } else if (k == 1) {
        m.initial_dist = VectorXd::Ones(1);
    } else {
        validate_at(r.at("transition"), [&] { m.initial_dist = stationary_distribution(m.transition); });
    }
    r.finish();
    validate_at(r.pointer(), [&] { m.validate(); });
}

inline void parse_algo(ConfigReader r, ExperimentConfig& c) {
    const std::string name = r.string("name", "ppo");
    if (name == "ppo") {
        c.algo = TrainConfig::ppo();
    } else if (name == "a2c") {
        c.algo = TrainConfig::a2c();
    } else {
        ConfigReader::fail(r.at("name"), "expected \"ppo\" or \"a2c\", got \"" + name + "\"");
    }
    const std::string policy = r.string("policy", "mlp");
    if (policy == "mlp") {
        c.policy = PolicyKind::mlp;
    } else if (policy == "context") {
        c.policy = PolicyKind::context;
    } else {
        ConfigReader::fail(r.at("policy"), "expected \"mlp\" or \"context\", got \"" + policy + "\"");
    }
    TrainConfig& a = c.algo;
    a.discount = r.number("discount", a.discount);
    a.gae_lambda = r.number("gae_lambda", a.gae_lambda);
    a.learning_rate = r.number("learning_rate", a.learning_rate);
    a.batch_size = r.integer("batch_size", a.batch_size);
    a.rollout_steps = r.integer("rollout_steps", a.rollout_steps);
    a.epochs = static_cast<int>(r.integer("epochs", a.epochs));
    a.clip_range = r.number("clip_range", a.clip_range);
    a.value_coef = r.number("value_coef", a.value_coef);
    a.entropy_coef = r.number("entropy_coef", a.entropy_coef);
    a.max_grad_norm = r.number("max_grad_norm", a.max_grad_norm);
    a.clipping_enabled = r.boolean("clipping_enabled", a.clipping_enabled);
    a.normalize_advantage = r.boolean("normalize_advantage", a.normalize_advantage);
    a.log_std_init = r.number("log_std_init", a.log_std_init);
    a.total_steps = r.integer("total_steps", a.total_steps);
    r.finish();
    validate_at(r.pointer(), [&] { a.validate(); });
}

inline void parse_hmm(ConfigReader r, ExperimentConfig& c) {
    HmmFitConfig& h = c.context.hmm;
    h.n_states = static_cast<int>(r.integer("n_states", h.n_states));
    h.n_init = static_cast<int>(r.integer("n_init", h.n_init));
    h.max_iter = static_cast<int>(r.integer("max_iter", h.max_iter));
    h.tol = r.number("tol", h.tol);
    h.mean_prior = r.number("mean_prior", h.mean_prior);
    h.covar_prior = r.number("covar_prior", h.covar_prior);
    h.min_covar = r.number("min_covar", h.min_covar);
    c.context.fit_episodes = static_cast<int>(r.integer("fit_episodes", c.context.fit_episodes));
    r.finish();
    validate_at(r.pointer(), [&] {
        h.validate();
        if (c.context.fit_episodes < 1) throw ConfigError("fit_episodes must be >= 1");
    });
}

inline GridAxis parse_axis(ConfigReader r, GridAxis fallback) {
    fallback.min = r.number("min", fallback.min);
    fallback.max = r.number("max", fallback.max);
    fallback.points = static_cast<int>(r.integer("points", fallback.points));
    r.finish();
    if (fallback.points < 1) ConfigReader::fail(r.at("points"), "must be >= 1");
    if (!(fallback.max >= fallback.min)) ConfigReader::fail(r.at("max"), "must be >= min");
    return fallback;
}

} // namespace detail

inline void ExperimentConfig::validate() const {
    using detail::ConfigReader;
    detail::validate_at("/env", [&] { env.validate(); });
    detail::validate_at("/algo", [&] { algo.validate(); });
    if (policy == PolicyKind::context) {
        if (env.market.n_regimes() < 2) ConfigReader::fail("/algo/policy", "a context policy needs a regime model");
        detail::validate_at("/hmm", [&] { context.hmm.validate(); });
        if (context.hmm.n_states != env.market.n_regimes())
            ConfigReader::fail("/hmm/n_states", "must equal the number of market regimes");
    }
    if (baseline.kind != BaselineKind::fixed_weight && baseline.adjustment_periods < 1)
        ConfigReader::fail("/baseline/adjustment_periods", "must be >= 1");
    if (!(baseline.fraction > 0.0 && baseline.fraction <= 1.0))
        ConfigReader::fail("/baseline/fraction", "must lie in (0, 1]");
    if (grid.fractions.empty() || grid.adjustment_periods.empty())
        ConfigReader::fail("/grid", "fractions and adjustment_periods must be non-empty");
    for (double f : grid.fractions)
        if (!(f > 0.0 && f <= 1.0)) ConfigReader::fail("/grid/fractions", "entries must lie in (0, 1]");
    for (Index n : grid.adjustment_periods)
        if (n < 1) ConfigReader::fail("/grid/adjustment_periods", "entries must be >= 1");
    if (grid.episodes_per_cell < 1) ConfigReader::fail("/grid/episodes_per_cell", "must be >= 1");
    if (qsurface.regime < 0 || qsurface.regime >= env.market.n_regimes())
        ConfigReader::fail("/qsurface/regime", "no such regime");
    if (run.episodes < 1) ConfigReader::fail("/run/episodes", "must be >= 1");
}

inline ExperimentConfig parse_config(const nlohmann::json& root) {
    using detail::ConfigReader;
    ConfigReader r(root, "");
    const long long version = r.integer("format_version", -1);
    if (version != kConfigFormatVersion)
        ConfigReader::fail("/format_version", "expected " + std::to_string(kConfigFormatVersion));

    ExperimentConfig c;
    {
        ConfigReader e = r.child("env");
        c.env.horizon_years = e.number("horizon_years", c.env.horizon_years);
        c.env.periods_per_year = static_cast<int>(e.integer("periods_per_year", c.env.periods_per_year));
        c.env.window = e.integer("window", c.env.window);
        c.env.initial_wealth = e.number("initial_wealth", c.env.initial_wealth);
        c.env.discount = e.number("discount", c.env.discount);
        e.finish();
        if (c.env.periods_per_year < 1) ConfigReader::fail("/env/periods_per_year", "must be >= 1");
        const double n = c.env.horizon_years * c.env.periods_per_year;
        if (!(n >= 1.0) || std::abs(n - std::round(n)) > 1e-9)
            ConfigReader::fail("/env/horizon_years", "horizon_years * periods_per_year must be a positive whole number");
        c.env.n_periods = static_cast<Index>(std::llround(n));
    }
    if (!r.has("market")) ConfigReader::fail("/market", "required");
    detail::parse_market(r.child("market"), c, c.env.dt());
    {
        ConfigReader i = r.child("impact");
        c.env.impact.eta = i.number("eta", c.env.impact.eta);
        c.env.impact.gamma = i.number("gamma", c.env.impact.gamma);
        i.finish();
    }
    detail::parse_algo(r.child("algo"), c);
    c.context.hmm.n_states = c.env.market.n_regimes() > 1 ? c.env.market.n_regimes() : c.context.hmm.n_states;
    detail::parse_hmm(r.child("hmm"), c);
    {
        ConfigReader b = r.child("baseline");
        const std::string kind = b.string("kind", "fixed");
        if (kind == "fixed") {
            c.baseline.kind = BaselineKind::fixed_weight;
        } else if (kind == "staggered") {
            c.baseline.kind = BaselineKind::staggered;
        } else if (kind == "regime_switching") {
            c.baseline.kind = BaselineKind::regime_switching;
        } else {
            ConfigReader::fail("/baseline/kind", "expected fixed, staggered or regime_switching");
        }
        c.baseline.fraction = b.number("fraction", c.baseline.fraction);
        c.baseline.adjustment_periods = b.integer("adjustment_periods", c.baseline.adjustment_periods);
        b.finish();
    }
    {
        ConfigReader g = r.child("grid");
        if (const auto* f = g.get("fractions")) {
            const VectorXd v = detail::read_vector(*f, "/grid/fractions");
            c.grid.fractions.assign(v.data(), v.data() + v.size());
        }
        if (const auto* n = g.get("adjustment_periods")) {
            if (!n->is_array()) ConfigReader::fail("/grid/adjustment_periods", "expected an array of integers");
            c.grid.adjustment_periods.clear();
            for (std::size_t i = 0; i < n->size(); ++i) {
                if (!(*n)[i].is_number_integer())
                    ConfigReader::fail("/grid/adjustment_periods/" + std::to_string(i), "expected an integer");
                c.grid.adjustment_periods.push_back((*n)[i].get<Index>());
            }
        }
        c.grid.episodes_per_cell = static_cast<int>(g.integer("episodes_per_cell", c.grid.episodes_per_cell));
        g.finish();
    }
    {
        ConfigReader q = r.child("qsurface");
        c.qsurface.regime = static_cast<int>(q.integer("regime", c.qsurface.regime));
        c.qsurface.w1 = detail::parse_axis(q.child("w1"), c.qsurface.w1);
        c.qsurface.w2 = detail::parse_axis(q.child("w2"), c.qsurface.w2);
        q.finish();
    }
    {
        ConfigReader u = r.child("run");
        c.run.seed = u.unsigned_integer("seed", c.run.seed);
        c.run.episodes = static_cast<int>(u.integer("episodes", c.run.episodes));
        c.run.output_dir = u.string("output_dir", c.run.output_dir);
        u.finish();
    }
    r.finish();
    c.validate();
    return c;
}

/// Fully explicit form: every field is written, the transition per period.
inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    json j;
    j["format_version"] = kConfigFormatVersion;
    json regimes = json::array();
    for (std::size_t i = 0; i < c.env.market.regimes.size(); ++i) {
        const MarketParams& p = c.env.market.regimes[i];
        regimes.push_back({{"name", c.regime_names.at(i)},
                           {"mu", detail::write_vector(p.mu)},
                           {"sigma", detail::write_vector(p.sigma)},
                           {"corr", detail::write_matrix(p.corr)},
                           {"cash_rate", p.cash_rate}});
    }
    j["market"] = {{"regimes", regimes},
                   {"transition", detail::write_matrix(c.env.market.transition)},
                   {"initial_dist", detail::write_vector(c.env.market.initial_dist)}};
    j["impact"] = {{"eta", c.env.impact.eta}, {"gamma", c.env.impact.gamma}};
    j["env"] = {{"horizon_years", c.env.horizon_years},
                {"periods_per_year", c.env.periods_per_year},
                {"window", c.env.window},
                {"initial_wealth", c.env.initial_wealth},
                {"discount", c.env.discount}};
    const TrainConfig& a = c.algo;
    j["algo"] = {{"name", a.algo == Algo::ppo ? "ppo" : "a2c"},
                 {"policy", c.policy == PolicyKind::mlp ? "mlp" : "context"},
                 {"discount", a.discount},
                 {"gae_lambda", a.gae_lambda},
                 {"learning_rate", a.learning_rate},
                 {"batch_size", a.batch_size},
                 {"rollout_steps", a.rollout_steps},
                 {"epochs", a.epochs},
                 {"clip_range", a.clip_range},
                 {"value_coef", a.value_coef},
                 {"entropy_coef", a.entropy_coef},
                 {"max_grad_norm", a.max_grad_norm},
                 {"clipping_enabled", a.clipping_enabled},
                 {"normalize_advantage", a.normalize_advantage},
                 {"log_std_init", a.log_std_init},
                 {"total_steps", a.total_steps}};
    const HmmFitConfig& h = c.context.hmm;
    j["hmm"] = {{"n_states", h.n_states},     {"n_init", h.n_init},
                {"max_iter", h.max_iter},     {"tol", h.tol},
                {"mean_prior", h.mean_prior}, {"covar_prior", h.covar_prior},
                {"min_covar", h.min_covar},   {"fit_episodes", c.context.fit_episodes}};
    j["baseline"] = {{"kind", detail::to_string(c.baseline.kind)},
                     {"fraction", c.baseline.fraction},
                     {"adjustment_periods", c.baseline.adjustment_periods}};
    j["grid"] = {{"fractions", c.grid.fractions},
                 {"adjustment_periods", c.grid.adjustment_periods},
                 {"episodes_per_cell", c.grid.episodes_per_cell}};
    auto axis = [](const GridAxis& g) { return json{{"min", g.min}, {"max", g.max}, {"points", g.points}}; };
    j["qsurface"] = {{"regime", c.qsurface.regime}, {"w1", axis(c.qsurface.w1)}, {"w2", axis(c.qsurface.w2)}};
    j["run"] = {{"seed", c.run.seed}, {"episodes", c.run.episodes}, {"output_dir", c.run.output_dir}};
    return j;
}

inline std::string dump_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config_text(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

/// 64-bit FNV-1a of the canonical serialisation, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_json(c).dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    return out;
}

/// Network layout implied by the config.
inline NetworkSpec network_spec(const ExperimentConfig& c) {
    if (c.policy == PolicyKind::context)
        return context_policy_net_spec(c.env.observation_dim(), c.env.n_assets(), c.context.hmm.n_states,
                                       c.algo.log_std_init);
    return policy_net_spec(c.env.observation_dim(), c.env.n_assets(), c.algo.log_std_init);
}

} // namespace kellylab
