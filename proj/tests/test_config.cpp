#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "rpmcl/config.hpp"

using namespace rpmcl;

namespace {

ExperimentConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

EnvLookup env(std::map<std::string, std::string> vars) {
  return [vars = std::move(vars)](const char* name) -> const char* {
    const auto it = vars.find(name);
    return it == vars.end() ? nullptr : it->second.c_str();
  };
}

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
  const auto c = parse("");
  EXPECT_EQ(c, ExperimentConfig{});
  EXPECT_EQ(c.r, 32);
  EXPECT_EQ(c.permutations, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(c.sweep_r, (std::vector<int>{8, 16, 32, 64}));
  EXPECT_EQ(c.seeds, (Seeds{1, 2, 3, 4}));
}

TEST(Config, RoundTripsThroughText) {
  ExperimentConfig c;
  c.permutations = {3, 1};
  c.learners = {LearnerKind::Ewc, LearnerKind::PartialReplay, LearnerKind::CumulativeReplay};
  c.policies = {PolicyKind::MaxLoss, PolicyKind::MinMargin};
  c.balances = {Balance::Balanced, Balance::Unbalanced};
  c.r = 16;
  c.replicates = 3;
  c.n_train = 123;
  c.data_dir = "some/where";
  c.configs = {ConfigKind::UpDown};
  c.training.adam.lr = 1.0 / 3.0;
  c.training.validation_fraction = 0.15;
  c.seeds = {10, 20, 30, 18446744073709551615ULL};
  c.sweep_policies = {PolicyKind::Random};
  c.sweep_r = {64, 8};
  c.alpha = 0.05;
  c.variant = WelchVariant::PairedDifferences;
  c.out_dir = "out dir";
  const std::string text = to_ini(c);
  const auto back = parse(text);
  EXPECT_EQ(back, c);
  EXPECT_EQ(to_ini(back), text);
}

TEST(Config, ListsAndAll) {
  const auto c = parse(
      "[experiment]\npermutations = all\npolicies = all\nlearners = fine_tune_stream,ewc\n"
      "[sweep]\nr_values = 8, 64\n");
  EXPECT_EQ(c.permutations, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(c.policies.size(), std::size_t(kPolicyCount));
  EXPECT_EQ(c.learners, (std::vector<LearnerKind>{LearnerKind::FineTuneStream, LearnerKind::Ewc}));
  EXPECT_EQ(c.sweep_r, (std::vector<int>{8, 64}));
}

TEST(Config, RejectsUnknownSectionsAndKeys) {
  EXPECT_THROW(parse("[nonsense]\na = 1\n"), ConfigError);
  EXPECT_THROW(parse("[training]\nmomentum = 0.9\n"), ConfigError);
  EXPECT_THROW(parse("top = 1\n"), ConfigError);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(parse("[experiment]\nr = many\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\nr = 0\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\npermutations = 4\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\nlearners = icarl\n"), ConfigError);
  EXPECT_THROW(parse("[experiment]\nschema_version = 2\n"), ConfigError);
  EXPECT_THROW(parse("[data]\nconfigs = Triangle\n"), ConfigError);
  EXPECT_THROW(parse("[sweep]\nr_values = 8, 12\n"), ConfigError);
  EXPECT_THROW(parse("[report]\nvariant = bayesian\n"), ConfigError);
  EXPECT_THROW(parse("[training]\nlr = 1e-3x\n"), ConfigError);
  EXPECT_THROW(parse("[seeds]\ninit = -1\n"), ConfigError);
}

TEST(Config, LearnerSpecsExpandReplay) {
  auto c = parse(
      "[experiment]\nlearners = fine_tune_stream, partial_replay, offline\n"
      "policies = random, min_replays\nbalances = unbalanced, balanced\nr = 16\n");
  const auto specs = c.learner_specs();
  ASSERT_EQ(specs.size(), 5u);
  EXPECT_EQ(specs[0].kind, LearnerKind::FineTuneStream);
  EXPECT_EQ(specs[1].label(), "partial_replay-random-unbalanced-r16");
  EXPECT_EQ(specs[4].label(), "partial_replay-min_replays-balanced-r16");
}

TEST(Config, ReplicateSeedsShiftInitAndStream) {
  ExperimentConfig c;
  const auto s = c.replicate_seeds(2);
  EXPECT_EQ(s.dataset, c.seeds.dataset);
  EXPECT_EQ(s.subset, c.seeds.subset);
  EXPECT_EQ(s.init, c.seeds.init + 2);
  EXPECT_EQ(s.stream, c.seeds.stream + 2);
  EXPECT_EQ(c.replicate_seeds(0), c.seeds);
}

TEST(Config, EnvironmentOverridesOnlySeedsAndOutput) {
  ExperimentConfig c;
  apply_env_overrides(c, env({{"RPMCL_SEED", "9"}, {"RPMCL_STREAM_SEED", "5"}, {"RPMCL_OUT", "elsewhere"},
                              {"RPMCL_R", "64"}}));
  EXPECT_EQ(c.seeds, (Seeds{9, 9, 5, 9}));
  EXPECT_EQ(c.out_dir, "elsewhere");
  EXPECT_EQ(c.r, 32);
  EXPECT_THROW(apply_env_overrides(c, env({{"RPMCL_INIT_SEED", "x"}})), ConfigError);
  EXPECT_THROW(apply_env_overrides(c, env({{"RPMCL_OUT", ""}})), ConfigError);
}

TEST(Config, FastProfileAndSeedOverride) {
  ExperimentConfig c;
  apply_fast_profile(c);
  EXPECT_EQ(c.training, TrainingConfig::fast());
  override_seeds(c, 77);
  EXPECT_EQ(c.seeds, (Seeds{77, 77, 77, 77}));
}

TEST(Config, LoadMissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/config.ini"), ConfigError);
}
