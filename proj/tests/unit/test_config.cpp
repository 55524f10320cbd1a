#include <string>

#include "doctest.h"
#include "stitchlab/config.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/pipeline.hpp"

using namespace stitchlab;

namespace {

std::string with(const std::string& fragment) {
  return R"({"anchors": [{"id": "a", "width": 4, "depth": 2}, {"id": "b", "width": 8, "depth": 3}])" +
         (fragment.empty() ? std::string() : ", " + fragment) + "}";
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("default configuration") {
    const ExperimentConfig c = default_config();
    CHECK_NOTHROW(validate_config(c));
    CHECK(c.dataset.num_classes * c.dataset.per_class == 2000);
    REQUIRE(c.anchors.size() == 3);
    CHECK(c.anchors.front().stages == std::vector<StageSpec>{{16, 4}});
    CHECK(c.anchors.back().stages == std::vector<StageSpec>{{64, 8}});
    CHECK(c.selection.tau == 0.05);
    CHECK(c.stitch_training.epochs == 20);
    CHECK(c.init_samples == 512);
    const Splits s = make_splits(c.dataset, 1);
    CHECK(s.train.size() == 1500);
    CHECK(s.val.size() == 250);
    CHECK(s.test.size() == 250);
    CHECK(c.selection.cascade_thresholds.front() == 0.6);
    CHECK(c.selection.cascade_thresholds.back() == 0.95);
  }

  TEST_CASE("dump and parse round trip") {
    const ExperimentConfig c = default_config();
    const std::string text = dump_config(c);
    const ExperimentConfig back = parse_config(text);
    CHECK(dump_config(back) == text);
    CHECK(config_digest(back) == config_digest(c));
    ExperimentConfig other = c;
    other.selection.tau = 0.1;
    CHECK(config_digest(other) != config_digest(c));
    ExperimentConfig threads = c;
    threads.threads = 4;
    CHECK(config_digest(threads) == config_digest(c));
  }

  TEST_CASE("minimal config fills defaults") {
    const ExperimentConfig c = parse_config(with(""));
    CHECK(c.anchors.size() == 2);
    CHECK(c.anchors[1].stages == std::vector<StageSpec>{{8, 3}});
    CHECK(c.dataset.kind == "blobs");
  }

  TEST_CASE("field-level errors") {
    CHECK_THROWS_WITH_AS(parse_config(with(R"("selection": {"tau": 3})")), doctest::Contains("selection.tau"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(with(R"("selection": {"tau": "big"})")), doctest::Contains("selection.tau"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(with(R"("selection": {"method": "magic"})")),
                         doctest::Contains("selection.method"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(with(R"("bogus": 1)")), doctest::Contains("bogus"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(with(R"("dataset": {"fractions": [0.5, 0.5]})")),
                         doctest::Contains("dataset.fractions"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(with(R"("training": {"probe": {"lr": -1}})")), doctest::Contains("lr"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(with(R"("seeds": [])")), doctest::Contains("seeds"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config(with(R"("selection": {"cascade_thresholds": [0.0]})")),
                         doctest::Contains("cascade_thresholds"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"anchors": [{"id": "a", "width": 4, "depth": 2}]})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"anchors": [{"id": "a", "width": 4, "depth": 2}, {"id": "a", "width": 8, "depth": 2}]})"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
  }

  TEST_CASE("overrides") {
    RunOverrides o;
    o.tau = 0.2;
    o.buckets = 3;
    o.seed = 9;
    o.method = PlanMethod::kSnnet;
    const ExperimentConfig c = apply_overrides(default_config(), o);
    CHECK(c.selection.tau == 0.2);
    CHECK(c.selection.num_buckets == 3);
    CHECK(c.seeds == std::vector<std::uint64_t>{9});
    CHECK(c.selection.method == PlanMethod::kSnnet);
    RunOverrides bad;
    bad.tau = 1.5;
    CHECK_THROWS_AS(apply_overrides(default_config(), bad), ConfigError);
    RunOverrides zero_threads;
    zero_threads.threads = 0;
    CHECK_THROWS_AS(apply_overrides(default_config(), zero_threads), ConfigError);
  }

  TEST_CASE("run directory ignores selection knobs") {
    ExperimentConfig a = default_config();
    ExperimentConfig b = a;
    b.selection.tau = 0.1;
    CHECK(run_digest(a, 1) == run_digest(b, 1));
    CHECK(run_digest(a, 1) != run_digest(a, 2));
    b.anchor_training.epochs += 1;
    CHECK(run_digest(a, 1) != run_digest(b, 1));
  }

  TEST_CASE("exit codes") {
    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(MissingArtifact("x")) == 3);
    CHECK(exit_code_for(StaleArtifact("x")) == 3);
    CHECK(exit_code_for(NumericError("x")) == 4);
    CHECK(exit_code_for(FormatError("x")) == 1);
  }
}
