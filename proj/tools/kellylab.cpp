// kellylab: experiment driver.
//
//   kellylab simulate   --config C [--seed S] [--out DIR] [--episodes N]
//   kellylab solve      --config C [--out DIR]
//   kellylab train      --config C [--seed S] [--out DIR] [--episodes N]
//   kellylab evaluate   --config C --checkpoint FILE [--seed S] [--out DIR] [--episodes N]
//   kellylab baseline   --config C [--seed S] [--out DIR] [--episodes N] [--trace]
//   kellylab qsurface   --config C [--out DIR]
//   kellylab hmm-fit    --config C [--seed S] [--out DIR] [--episodes N]
//   kellylab gridsearch --config C [--seed S] [--out DIR]
//   kellylab sweep      --sweep FILE [--seed S] [--out DIR]
//
// Without --out, results go to $KELLYLAB_OUT/<run.output_dir>/<command>
// ($KELLYLAB_OUT defaults to the working directory).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kellylab/analytic.hpp"
#include "kellylab/config.hpp"
#include "kellylab/env.hpp"
#include "kellylab/evaluation.hpp"
#include "kellylab/hmm.hpp"
#include "kellylab/market.hpp"
#include "kellylab/policy.hpp"
#include "kellylab/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kellylab;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Options {
    std::string config;
    std::string sweep;
    std::string checkpoint;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> episodes;
    bool trace = false;
};

struct Run {
    std::string command;
    ExperimentConfig config;
    std::uint64_t seed = 0;
    fs::path out;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
};

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p);
    if (!os) throw Error("cannot write " + p.string());
    return os;
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

fs::path output_dir(const Options& o, const std::string& config_dir, const std::string& command) {
    if (!o.out.empty()) return o.out;
    const char* root = std::getenv("KELLYLAB_OUT");
    return fs::path(root && *root ? root : ".") / config_dir / command;
}

Run start(const std::string& command, const Options& o) {
    if (o.config.empty()) throw ConfigError("--config is required");
    Run r;
    r.command = command;
    r.config = load_config(o.config);
    r.seed = o.seed.value_or(r.config.run.seed);
    if (o.episodes) {
        if (*o.episodes < 1) throw ConfigError("--episodes must be >= 1");
        r.config.run.episodes = *o.episodes;
    }
    r.out = output_dir(o, r.config.run.output_dir, command);
    fs::create_directories(r.out);
    open_out(r.out / "config.json") << dump_config(r.config);
    return r;
}

void finish(const Run& r, json extra = json::object()) {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - r.started).count();
    json m = {{"command", r.command},
              {"kellylab_version", kVersion},
              {"config_format_version", kConfigFormatVersion},
              {"config_hash", config_hash(r.config)},
              {"seed", r.seed},
              {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
              {"started_utc", utc_now()},
              {"wall_time_seconds", wall}};
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
    open_out(r.out / "manifest.json") << m.dump(2) << '\n';
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json summary(const EvalStats& s) {
    return {{"episodes", s.episodes},
            {"mean_growth", optional_number(s.mean_growth())},
            {"mad", optional_number(s.mad())},
            {"bankruptcies", s.bankruptcies}};
}

void write_episodes_csv(const fs::path& p, const EvalStats& s) {
    auto os = open_out(p);
    os.precision(17);
    os << "episode,growth,bankrupt\n";
    for (std::size_t i = 0; i < s.growths.size(); ++i) {
        os << i << ',';
        if (s.growths[i]) os << *s.growths[i];
        os << ',' << (s.growths[i] ? 0 : 1) << '\n';
    }
}

std::string format_stats(const EvalStats& s) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(4);
    if (const auto m = s.mean_growth()) {
        ss << "mean growth " << *m << ", MAD " << *s.mad();
    } else {
        ss << "mean growth undefined (every episode bankrupt)";
    }
    ss << ", bankruptcies " << s.bankruptcies << "/" << s.episodes;
    return ss.str();
}

BaselinePolicy make_baseline(const ExperimentConfig& c) {
    const auto& b = c.baseline;
    const RegimeModel& m = c.env.market;
    switch (b.kind) {
    case BaselineKind::fixed_weight:
        return fixed_weight_policy(fractional_weights(optimal_weights(m.regimes.at(0)), b.fraction));
    case BaselineKind::staggered:
        return staggered_policy(fractional_weights(optimal_weights(m.regimes.at(0)), b.fraction), b.adjustment_periods);
    case BaselineKind::regime_switching: break;
    }
    return regime_switching_policy(m, b.fraction, b.adjustment_periods);
}

EvalStats evaluate_baseline(const ExperimentConfig& c, int episodes, std::uint64_t seed) {
    return evaluate_policy(BaselineAgent(make_baseline(c)), c.env, episodes, seed);
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Options& o) {
    Run r = start("simulate", o);
    const int n = o.episodes.value_or(1);
    for (int i = 0; i < n; ++i) {
        Rng rng(episode_seed(r.seed, static_cast<std::uint64_t>(i)));
        const PricePath path =
            generate_path(r.config.env.market, r.config.env.n_periods, r.config.env.dt(), r.config.env.window - 1, rng);
        const std::string name = n == 1 ? "prices.csv" : "prices_" + std::to_string(i) + ".csv";
        auto os = open_out(r.out / name);
        write_price_csv(os, path);
    }
    std::cout << "wrote " << n << " price path(s) to " << r.out.string() << '\n';
    finish(r, {{"episodes", n}});
    return 0;
}

int cmd_solve(const Options& o) {
    Run r = start("solve", o);
    const RegimeModel& m = r.config.env.market;
    json report = {{"regimes", json::array()}};
    VectorXd growths(m.n_regimes());
    std::cout << std::fixed << std::setprecision(4);
    for (int k = 0; k < m.n_regimes(); ++k) {
        const auto& p = m.regimes[static_cast<std::size_t>(k)];
        const WeightVector w = optimal_weights(p);
        growths[k] = expected_growth(w, p);
        const VectorXd full = w.with_cash();
        std::cout << r.config.regime_names[static_cast<std::size_t>(k)] << ": weights (cash first)";
        for (Index i = 0; i < full.size(); ++i) std::cout << ' ' << full[i];
        std::cout << ", growth " << growths[k] << '\n';
        const double residual = (p.covariance() * w.stocks - (p.mu.array() - p.cash_rate).matrix()).lpNorm<Eigen::Infinity>();
        report["regimes"].push_back({{"name", r.config.regime_names[static_cast<std::size_t>(k)]},
                                     {"weights", detail::write_vector(full)},
                                     {"growth", growths[k]},
                                     {"residual", residual}});
    }
    if (m.n_regimes() > 1) {
        const VectorXd pi = stationary_distribution(m.transition);
        const double g = switching_growth(growths, pi);
        std::cout << "stationary distribution";
        for (Index i = 0; i < pi.size(); ++i) std::cout << ' ' << pi[i];
        std::cout << "\nswitching growth " << g << '\n';
        report["stationary_distribution"] = detail::write_vector(pi);
        report["switching_growth"] = g;
    }
    open_out(r.out / "solve.json") << report.dump(2) << '\n';
    finish(r);
    return 0;
}

int cmd_train(const Options& o) {
    Run r = start("train", o);
    const ExperimentConfig& c = r.config;
    ActorCritic net(network_spec(c), derive_seed(r.seed, 100));
    const ContextSettings* ctx = c.policy == PolicyKind::context ? &c.context : nullptr;
    const auto progress = [](const TrainingRecord& rec) {
        if ((rec.episode + 1) % 100 != 0) return;
        std::cerr << "episode " << rec.episode + 1 << ", steps " << rec.steps;
        if (rec.growth) std::cerr << ", growth " << *rec.growth;
        std::cerr << '\n';
    };
    const TrainResult result = train(c.env, std::move(net), c.algo, r.seed, ctx, progress);
    {
        auto os = open_out(r.out / "training_log.csv");
        write_training_log_csv(os, result.log, c.env.n_assets());
    }
    {
        auto os = open_out(r.out / "checkpoint.txt");
        save_checkpoint(os, result.net);
    }
    if (result.hmm) {
        auto os = open_out(r.out / "hmm.txt");
        save_hmm(os, *result.hmm);
    }
    const EvalStats stats = evaluate(result.net, c.env, c.run.episodes, derive_seed(r.seed, 200),
                                     result.hmm ? &*result.hmm : nullptr);
    write_episodes_csv(r.out / "evaluation.csv", stats);
    std::cout << "trained " << result.steps << " steps over " << result.log.episodes.size() << " episodes; "
              << format_stats(stats) << '\n';
    finish(r, {{"steps", result.steps}, {"updates", result.log.updates.size()}, {"evaluation", summary(stats)}});
    return 0;
}

int cmd_evaluate(const Options& o) {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    Run r = start("evaluate", o);
    std::ifstream in(o.checkpoint);
    if (!in) throw Error("cannot open " + o.checkpoint);
    const ActorCritic net = load_checkpoint(in);
    std::optional<GaussianHmmModel> hmm;
    if (net.spec().has_context()) {
        const fs::path p = fs::path(o.checkpoint).parent_path() / "hmm.txt";
        std::ifstream hin(p);
        if (!hin) throw Error("context network needs " + p.string());
        hmm = load_hmm(hin);
    }
    const EvalStats stats = evaluate(net, r.config.env, r.config.run.episodes, r.seed, hmm ? &*hmm : nullptr);
    write_episodes_csv(r.out / "evaluation.csv", stats);
    open_out(r.out / "summary.json") << summary(stats).dump(2) << '\n';
    std::cout << format_stats(stats) << '\n';
    finish(r, {{"checkpoint", o.checkpoint}});
    return 0;
}

int cmd_baseline(const Options& o) {
    Run r = start("baseline", o);
    const EvalStats stats = evaluate_baseline(r.config, r.config.run.episodes, r.seed);
    write_episodes_csv(r.out / "evaluation.csv", stats);
    open_out(r.out / "summary.json") << summary(stats).dump(2) << '\n';
    if (o.trace) {
        PortfolioEnv env(r.config.env);
        env.record_trace(true);
        BaselineAgent agent(make_baseline(r.config));
        run_episode(env, agent, episode_seed(r.seed, 0));
        auto os = open_out(r.out / "trace.csv");
        write_trace_csv(os, env.trace(), r.config.env.n_assets());
    }
    std::cout << format_stats(stats) << '\n';
    finish(r);
    return 0;
}

int cmd_qsurface(const Options& o) {
    Run r = start("qsurface", o);
    const auto& q = r.config.qsurface;
    const MarketParams& p = r.config.env.market.regimes.at(static_cast<std::size_t>(q.regime));
    const QSurface s = q_surface(p, q.w1, q.w2);
    auto os = open_out(r.out / "qsurface.csv");
    write_q_surface_csv(os, s);
    Index i = 0, j = 0;
    const double best = s.values.maxCoeff(&i, &j);
    std::cout << std::fixed << std::setprecision(4) << "grid argmax w1 " << q.w1.at(static_cast<int>(i)) << ", w2 "
              << q.w2.at(static_cast<int>(j)) << ", L " << best << '\n';
    finish(r, {{"argmax", {q.w1.at(static_cast<int>(i)), q.w2.at(static_cast<int>(j))}}, {"max", best}});
    return 0;
}

/// Log returns of the unaffected episode prices and the regime behind each return.
std::pair<MatrixXd, std::vector<int>> simulate_returns(const EnvConfig& env, std::uint64_t seed) {
    Rng rng(seed);
    const PricePath path = generate_path(env.market, env.n_periods, env.dt(), env.window - 1, rng);
    std::vector<int> labels;
    for (Index t = 0; t < env.n_periods; ++t) labels.push_back(path.regime_at(t));
    return {log_returns(path.episode_prices()), labels};
}

int cmd_hmm_fit(const Options& o) {
    Run r = start("hmm-fit", o);
    const ExperimentConfig& c = r.config;
    std::vector<MatrixXd> train_seqs;
    for (int i = 0; i < c.context.fit_episodes; ++i)
        train_seqs.push_back(simulate_returns(c.env, episode_seed(r.seed, static_cast<std::uint64_t>(i))).first);
    const HmmFit fit = fit_hmm(train_seqs, c.context.hmm, derive_seed(r.seed, 300));
    const std::vector<int> perm = align_labels(fit.model, c.env.market.regimes, c.env.dt());

    std::vector<int> decoded, online, truth;
    const Index window = c.env.window - 1;
    for (int i = 0; i < c.run.episodes; ++i) {
        const auto seed = episode_seed(r.seed, static_cast<std::uint64_t>(c.context.fit_episodes + i));
        const auto [seq, labels] = simulate_returns(c.env, seed);
        const auto d = relabel(decode(fit.model, seq), perm);
        decoded.insert(decoded.end(), d.begin(), d.end());
        for (Index t = 0; t < seq.rows(); ++t) {
            const Index lo = std::max<Index>(0, t + 1 - window);
            online.push_back(perm[static_cast<std::size_t>(predict_current(fit.model, seq.middleRows(lo, t + 1 - lo)))]);
        }
        truth.insert(truth.end(), labels.begin(), labels.end());
    }
    const double acc_decode = accuracy(decoded, truth);
    const double acc_online = accuracy(online, truth);
    {
        auto os = open_out(r.out / "hmm.txt");
        save_hmm(os, fit.model);
    }
    json report = {{"objective", fit.objective},
                   {"iterations", fit.history.size()},
                   {"restart", fit.restart},
                   {"degenerate_restarts", fit.degenerate_restarts},
                   {"state_to_regime", perm},
                   {"accuracy_decode", acc_decode},
                   {"accuracy_online", acc_online},
                   {"eval_episodes", c.run.episodes}};
    open_out(r.out / "hmm_fit.json") << report.dump(2) << '\n';
    std::cout << std::fixed << std::setprecision(4) << "accuracy: full-sequence decode " << acc_decode
              << ", online window " << acc_online << '\n';
    finish(r);
    return 0;
}

int cmd_gridsearch(const Options& o) {
    Run r = start("gridsearch", o);
    const auto& g = r.config.grid;
    const GridSearchResult res =
        rs_baseline_grid_search(r.config.env, g.fractions, g.adjustment_periods, g.episodes_per_cell, r.seed);
    auto os = open_out(r.out / "grid.csv");
    os.precision(17);
    os << "fraction,adjustment_periods,mean_growth,mad,bankruptcies\n";
    for (const auto& cell : res.cells) {
        os << cell.fraction << ',' << cell.adjustment_periods << ',';
        if (const auto m = cell.stats.mean_growth()) os << *m << ',' << *cell.stats.mad();
        else os << ',';
        os << ',' << cell.stats.bankruptcies << '\n';
    }
    std::cout << std::fixed << std::setprecision(4) << "best fraction " << res.best_fraction << ", adjustment periods "
              << res.best_adjustment_periods << ", mean growth " << res.best_mean_growth << '\n';
    finish(r, {{"best_fraction", res.best_fraction},
               {"best_adjustment_periods", res.best_adjustment_periods},
               {"best_mean_growth", res.best_mean_growth}});
    return 0;
}

// ---------------------------------------------------------------------------
// Sweeps
//
//   {
//     "format_version": 1,
//     "base": "../appendix_c.json",       relative to the sweep file
//     "parameter": "/algo/gae_lambda",    JSON pointer into the base config
//     "values": [0.0, 0.25, ...],
//     "runs": 10,                         independent training runs per value
//     "eval_episodes": 10,                evaluation episodes per run
//     "baseline": true                    also evaluate the analytic baseline
//   }
//
// Output sweep.csv: value, agent mean growth over runs, MAD of the run means,
// mean bankruptcies per run, and the same for the baseline.

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

int cmd_sweep(const Options& o) {
    if (o.sweep.empty()) throw ConfigError("--sweep is required");
    std::ifstream in(o.sweep);
    if (!in) throw ConfigError("cannot open " + o.sweep);
    json s;
    try {
        s = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(o.sweep + ": " + e.what());
    }
    auto require = [&](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(o.sweep + ": " + what);
    };
    require(s.is_object() && s.value("format_version", 0) == 1, "/format_version: expected 1");
    for (auto it = s.begin(); it != s.end(); ++it)
        require(it.key() == "format_version" || it.key() == "base" || it.key() == "parameter" || it.key() == "values" ||
                    it.key() == "runs" || it.key() == "eval_episodes" || it.key() == "baseline",
                "/" + it.key() + ": unknown key");
    require(s.contains("base") && s["base"].is_string(), "/base: expected a path");
    require(s.contains("parameter") && s["parameter"].is_string(), "/parameter: expected a JSON pointer");
    require(s.contains("values") && s["values"].is_array() && !s["values"].empty(), "/values: expected an array");
    const int runs = s.value("runs", 10);
    const int eval_episodes = s.value("eval_episodes", 10);
    const bool with_baseline = s.value("baseline", true);
    require(runs >= 1 && eval_episodes >= 1, "runs and eval_episodes must be >= 1");

    const fs::path base_path = fs::path(o.sweep).parent_path() / s["base"].get<std::string>();
    std::ifstream bin(base_path);
    require(static_cast<bool>(bin), "/base: cannot open " + base_path.string());
    const json base = json::parse(bin);
    const json::json_pointer pointer(s["parameter"].get<std::string>());
    const ExperimentConfig base_cfg = parse_config(base);
    const std::uint64_t seed = o.seed.value_or(base_cfg.run.seed);

    Options base_opts = o;
    base_opts.config = base_path.string();
    Run r = start("sweep", base_opts);
    r.seed = seed;

    auto os = open_out(r.out / "sweep.csv");
    os.precision(17);
    os << "value,agent_mean,agent_mad,agent_bankruptcies,baseline_mean,baseline_mad\n";
    for (const json& value : s["values"]) {
        json patched = base;
        patched[pointer] = value;
        ExperimentConfig c;
        try {
            c = parse_config(patched);
        } catch (const ConfigError& e) {
            throw ConfigError(o.sweep + ": value " + value.dump() + ": " + e.what());
        }
        std::vector<double> agent_means, base_means;
        double bankrupt = 0.0;
        for (int run = 0; run < runs; ++run) {
            const std::uint64_t run_seed = derive_seed(seed, static_cast<std::uint64_t>(run));
            ActorCritic net(network_spec(c), derive_seed(run_seed, 100));
            const ContextSettings* ctx = c.policy == PolicyKind::context ? &c.context : nullptr;
            const TrainResult t = train(c.env, std::move(net), c.algo, run_seed, ctx);
            const std::uint64_t eval_seed = derive_seed(run_seed, 200);
            const EvalStats a = evaluate(t.net, c.env, eval_episodes, eval_seed, t.hmm ? &*t.hmm : nullptr);
            if (const auto m = a.mean_growth()) agent_means.push_back(*m);
            bankrupt += a.bankruptcies;
            if (with_baseline) {
                const EvalStats b = evaluate_baseline(c, eval_episodes, eval_seed);
                if (const auto m = b.mean_growth()) base_means.push_back(*m);
            }
            std::cerr << "value " << value.dump() << ", run " << run + 1 << "/" << runs << ": " << format_stats(a)
                      << '\n';
        }
        os << value.dump() << ',' << mean_of(agent_means) << ',' << mean_absolute_deviation(agent_means) << ','
           << bankrupt / runs << ',';
        if (with_baseline) os << mean_of(base_means) << ',' << mean_absolute_deviation(base_means);
        else os << ',';
        os << '\n';
        os.flush();
    }
    finish(r, {{"sweep", o.sweep}, {"parameter", s["parameter"]}, {"runs", runs}, {"eval_episodes", eval_episodes}});
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kelly portfolio experiments: simulation, analytic baselines, HMM regimes and on-policy RL"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    Options o;

    auto add = [&](const std::string& name, const std::string& help, bool seed, bool episodes) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--out", o.out, "Output directory");
        if (seed) sub->add_option("--seed", o.seed, "Master seed (overrides run.seed)");
        if (episodes) sub->add_option("--episodes", o.episodes, "Episode count (overrides run.episodes)");
        return sub;
    };
    CLI::App* simulate = add("simulate", "Write simulated price paths", true, true);
    CLI::App* solve = add("solve", "Analytic optimal weights and growth rates", false, false);
    CLI::App* train_cmd = add("train", "Train an actor-critic agent", true, true);
    CLI::App* evaluate_cmd = add("evaluate", "Evaluate a trained checkpoint", true, true);
    evaluate_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint written by train")->check(CLI::ExistingFile);
    CLI::App* baseline = add("baseline", "Evaluate the configured baseline policy", true, true);
    baseline->add_flag("--trace", o.trace, "Also write the per-step trace of episode 0");
    CLI::App* qsurface = add("qsurface", "Expected growth over a two-asset weight grid", false, false);
    CLI::App* hmm_fit = add("hmm-fit", "Fit the regime HMM and score its accuracy", true, true);
    CLI::App* gridsearch = add("gridsearch", "Grid search over the regime-switching baseline", true, false);
    CLI::App* sweep = app.add_subcommand("sweep", "Run a parameter sweep of train + evaluate");
    sweep->add_option("--sweep", o.sweep, "Sweep file (JSON)")->required()->check(CLI::ExistingFile);
    sweep->add_option("--seed", o.seed, "Master seed");
    sweep->add_option("--out", o.out, "Output directory");

    CLI11_PARSE(app, argc, argv);
    try {
        if (simulate->parsed()) return cmd_simulate(o);
        if (solve->parsed()) return cmd_solve(o);
        if (train_cmd->parsed()) return cmd_train(o);
        if (evaluate_cmd->parsed()) return cmd_evaluate(o);
        if (baseline->parsed()) return cmd_baseline(o);
        if (qsurface->parsed()) return cmd_qsurface(o);
        if (hmm_fit->parsed()) return cmd_hmm_fit(o);
        if (gridsearch->parsed()) return cmd_gridsearch(o);
        if (sweep->parsed()) return cmd_sweep(o);
    } catch (const std::exception& e) {
        std::cerr << "kellylab: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
