#include <catch2/catch_amalgamated.hpp>

#include "qrnn/config.hpp"

using namespace qrnn;

TEST_CASE("config parses sections, comments and overrides", "[config]") {
    const std::string text = R"(
# toy run
[model]
cell = "lstm"
hidden = 24     # inline comment
[quant]
weight_bits = 3
balanced = false
[data]
train = "corpora/toy_lm_train.txt"
)";
    ConfigMap cm = ConfigMap::parse_string(text);
    CHECK(cm.get_string("model.cell", "") == "lstm");
    CHECK(cm.get_size("model.hidden", 0) == 24);
    CHECK(cm.get_int("quant.weight_bits", 0) == 3);
    CHECK(cm.get_bool("quant.balanced", true) == false);
    CHECK(cm.get_string("data.train", "") == "corpora/toy_lm_train.txt");

    cm.apply_override("quant.weight_bits=2");
    cm.apply_override("model.hidden = 32");
    RunConfig rc = RunConfig::from_map(cm);
    CHECK(rc.model.quant.weight_bits == 2);
    CHECK(rc.model.hidden == 32);
    CHECK(rc.model.cell == CellKind::lstm);
}

TEST_CASE("unknown keys are rejected by exact name", "[config]") {
    ConfigMap cm = ConfigMap::parse_string("[train]\nlearning_rate = 0.1\n");
    try {
        RunConfig::from_map(cm);
        FAIL("expected config_error");
    } catch (const config_error& e) {
        CHECK(std::string(e.what()).find("train.learning_rate") != std::string::npos);
    }
}

TEST_CASE("typed getters report the offending key", "[config]") {
    ConfigMap cm = ConfigMap::parse_string("[train]\nlr = fast\n");
    CHECK_THROWS_AS(cm.get_double("train.lr", 0.0), config_error);
    CHECK_THROWS_AS(ConfigMap::parse_string("[model\ncell = gru\n"), config_error);
    CHECK_THROWS_AS(ConfigMap::parse_string("just a line\n"), config_error);
}

TEST_CASE("resolved config round-trips through its own serialization", "[config]") {
    ConfigMap cm = ConfigMap::parse_string(R"(
[model]
cell = "gru"
hidden = 20
[quant]
weight_bits = 2
gamma = 3.0
threshold_stat = "median_abs"
[train]
optimizer = "sgd"
lr = 0.5
max_steps = 123
[data]
format = "lm"
train = "a.txt"
)");
    RunConfig rc = RunConfig::from_map(cm);
    RunConfig rc2 = RunConfig::from_map(ConfigMap::parse_string(rc.to_toml()));
    CHECK(rc.to_toml() == rc2.to_toml());
    CHECK(rc2.model.quant.threshold_stat == ThresholdStat::median_abs);
    CHECK(rc2.train.optimizer == OptimizerKind::sgd);
    CHECK(rc2.train.max_steps == 123);
}

TEST_CASE("defaults follow the adopted quantizer settings", "[config]") {
    RunConfig rc = RunConfig::from_map(ConfigMap::parse_string(""));
    CHECK(rc.model.quant.weight_bits == 2);
    CHECK(rc.model.quant.balanced);
    CHECK(rc.model.quant.gamma == 2.5);
    CHECK(rc.model.quant.threshold_stat == ThresholdStat::mean_abs);
    CHECK(rc.model.quant.activation_range == ActivationRange::unit01);
    CHECK(rc.train.adam.lr == 1e-3);
}
