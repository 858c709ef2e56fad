#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "kellylab/config.hpp"

using namespace kellylab;

namespace {

const std::string kMinimal = R"({
  "format_version": 1,
  "market": { "regimes": [ { "mu": [0.1], "sigma": [0.2], "cash_rate": 0.03 } ] }
})";

std::string error_of(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

std::string with(const std::string& extra) {
    return R"({ "format_version": 1,
      "market": { "regimes": [ { "mu": [0.1, 0.05], "sigma": [0.2, 0.1], "corr": [[1, 0.3], [0.3, 1]] } ] })" +
           extra + "}";
}

std::string config_path(const std::string& name) {
    return (std::filesystem::path(KELLYLAB_SOURCE_DIR) / "configs" / name).string();
}

} // namespace

TEST(Config, MinimalUsesDefaults) {
    const ExperimentConfig c = parse_config_text(kMinimal);
    EXPECT_EQ(c.env.n_periods, 1280);
    EXPECT_EQ(c.env.window, 60);
    EXPECT_EQ(c.env.initial_wealth, 1000.0);
    EXPECT_EQ(c.env.impact.eta, 0.0);
    EXPECT_EQ(c.algo.algo, Algo::ppo);
    EXPECT_EQ(c.algo.gae_lambda, 0.9);
    EXPECT_TRUE(c.env.market.regimes[0].corr.isIdentity());
    EXPECT_EQ(c.grid.fractions.size(), 10u);
    EXPECT_EQ(c.grid.adjustment_periods, (std::vector<Index>{1, 2, 4, 8, 16, 32, 64}));
    EXPECT_EQ(c.regime_names[0], "regime_0");
}

TEST(Config, DumpParseIsIdempotent) {
    for (const char* name : {"appendix_c.json", "appendix_d.json", "single_asset.json", "two_asset.json"}) {
        const ExperimentConfig c = load_config(config_path(name));
        const std::string once = dump_config(c);
        const std::string twice = dump_config(parse_config_text(once));
        EXPECT_EQ(once, twice) << name;
        EXPECT_EQ(config_hash(c), config_hash(parse_config_text(once))) << name;
        EXPECT_EQ(config_hash(c).size(), 16u);
    }
}

TEST(Config, ShippedConfigs) {
    const ExperimentConfig c = load_config(config_path("appendix_c.json"));
    EXPECT_EQ(c.env.n_assets(), 3);
    EXPECT_EQ(c.env.observation_dim(), 184);
    EXPECT_EQ(c.env.impact.eta, 1e-9);
    EXPECT_EQ(c.env.impact.gamma, 1e-7);

    const ExperimentConfig d = load_config(config_path("appendix_d.json"));
    EXPECT_EQ(d.env.market.n_regimes(), 2);
    EXPECT_EQ(d.policy, PolicyKind::context);
    EXPECT_EQ(d.context.hmm.n_states, 2);
    EXPECT_EQ(d.baseline.kind, BaselineKind::regime_switching);
    EXPECT_EQ(network_spec(d).context_dim, 2);

    const ExperimentConfig s = load_config(config_path("single_asset.json"));
    EXPECT_EQ(s.env.n_periods, 256);
    EXPECT_EQ(s.algo.total_steps, 200000);
}

TEST(Config, HashTracksContent) {
    const ExperimentConfig a = parse_config_text(kMinimal);
    ExperimentConfig b = a;
    b.env.initial_wealth = 2000;
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, TransitionRescaling) {
    const ExperimentConfig c = parse_config_text(R"({ "format_version": 1,
      "market": { "regimes": [ { "mu": [0.1], "sigma": [0.2] }, { "mu": [-0.1], "sigma": [0.3] } ],
                  "transition": [[0.9, 0.1], [0.2, 0.8]], "transition_dt": 0.0078125 } })");
    const MatrixXd& p = c.env.market.transition;
    MatrixXd expected(2, 2);
    expected << 0.9, 0.1, 0.2, 0.8;
    EXPECT_TRUE((p * p).isApprox(expected, 1e-10));
    EXPECT_NEAR(c.env.market.initial_dist[0], 2.0 / 3.0, 1e-12);
}

TEST(Config, ErrorsNameTheOffendingField) {
    EXPECT_EQ(error_of(R"({ "format_version": 2 })"), "config /format_version: expected 1");
    EXPECT_EQ(error_of(with(R"(, "bogus": 1)")), "config /bogus: unknown key");
    EXPECT_EQ(error_of(with(R"(, "env": { "window": "long" })")), "config /env/window: expected an integer");
    EXPECT_EQ(error_of(with(R"(, "algo": { "name": "dqn" })")), "config /algo/name: expected \"ppo\" or \"a2c\", got \"dqn\"");
    EXPECT_EQ(error_of(with(R"(, "grid": { "adjustment_periods": [1, 2.5] })")),
              "config /grid/adjustment_periods/1: expected an integer");
    EXPECT_NE(error_of(R"({ "format_version": 1, "market": { "regimes": [ { "mu": [0.1, 0.1], "sigma": [0.2, 0.2],
                "corr": [[1, 2], [2, 1]] } ] } })")
                  .find("config /market/regimes/0"),
              std::string::npos);
    EXPECT_NE(error_of(R"({ "format_version": 1, "market": { "regimes": [ { "mu": [0.1], "sigma": [0.2] } ] },
                "algo": { "policy": "context" } })")
                  .find("config /algo/policy"),
              std::string::npos);
    EXPECT_NE(error_of(R"({ "format_version": 1, "market": )").find("config:"), std::string::npos);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}
