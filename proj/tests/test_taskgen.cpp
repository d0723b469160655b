#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <set>
#include <sstream>

#include "rpmcl/taskgen.hpp"

using namespace rpmcl;

namespace {

AttributeRule rule(RuleKind kind, int param = 0) { return {kind, param, {}}; }

RpmProblem make(ConfigKind kind, std::uint64_t seed) {
  Rng rng(seed);
  return generate_problem(TaskConfig{kind}, rng);
}

}  // namespace

TEST(ApplyRule, Examples) {
  EXPECT_EQ(apply_rule(rule(RuleKind::Constant), 3, 3, 5), 3);
  EXPECT_EQ(apply_rule(rule(RuleKind::Progression, 1), 2, 3, 6), 4);
  EXPECT_EQ(apply_rule(rule(RuleKind::Arithmetic, 1), 1, 2, 10), 3);
}

TEST(ApplyRule, WrapsModulo) {
  EXPECT_EQ(apply_rule(rule(RuleKind::Progression, 1), 4, 5, 6), 0);
  EXPECT_EQ(apply_rule(rule(RuleKind::Progression, -1), 1, 0, 6), 5);
  EXPECT_EQ(apply_rule(rule(RuleKind::Arithmetic, -1), 2, 5, 10), 7);
}

TEST(ApplyRule, DistributeThreeFillsTheMissingValue) {
  AttributeRule r{RuleKind::DistributeThree, 0, {4, 1, 7}};
  EXPECT_EQ(apply_rule(r, 4, 1, 10), 7);
  EXPECT_EQ(apply_rule(r, 7, 4, 10), 1);
  EXPECT_EQ(apply_rule(r, 1, 7, 10), 4);
}

TEST(GenerateProblem, CenterHasOneSlotAndUniqueSolution) {
  const RpmProblem p = make(ConfigKind::Center, 7);
  for (const Panel& panel : p.context) EXPECT_EQ(panel.slots.size(), 1u);
  for (const Panel& panel : p.choices) EXPECT_EQ(panel.slots.size(), 1u);
  EXPECT_EQ(solve_by_rules(p), p.answer);
}

TEST(GenerateProblem, ThreeByThreeGridRoundTripsThroughSolver) {
  const RpmProblem p = make(ConfigKind::ThreeByThreeGrid, 7);
  for (const Panel& panel : p.context) EXPECT_EQ(panel.slots.size(), 9u);
  EXPECT_EQ(solve_by_rules(p), p.answer);
}

TEST(GenerateProblem, Deterministic) {
  for (ConfigKind kind : kAllConfigs) EXPECT_EQ(make(kind, 11), make(kind, 11));
  EXPECT_NE(make(ConfigKind::Center, 11), make(ConfigKind::Center, 12));
}

TEST(GenerateProblem, ChoicesAreDistinct) {
  Rng rng(3);
  for (ConfigKind kind : kAllConfigs)
    for (int i = 0; i < 50; ++i) {
      const RpmProblem p = generate_problem(TaskConfig{kind}, rng);
      std::set<Panel> unique(p.choices.begin(), p.choices.end());
      EXPECT_EQ(unique.size(), std::size_t(kChoicePanels));
    }
}

// Every row of the context, completed by the answer, must obey the rules.
TEST(GenerateProblem, RowsFollowRules) {
  Rng rng(5);
  for (ConfigKind kind : kAllConfigs)
    for (int i = 0; i < 40; ++i) {
      const RpmProblem p = generate_problem(TaskConfig{kind}, rng);
      std::array<Panel, 9> grid;
      std::copy(p.context.begin(), p.context.end(), grid.begin());
      grid[8] = p.choices[p.answer];
      for (int row = 0; row < 3; ++row)
        for (std::size_t s = 0; s < grid[0].slots.size(); ++s)
          for (int a = 0; a < kAttributeCount; ++a) {
            const int expected = apply_rule(p.rules.per_attribute[a], grid[3 * row].slots[s].values[a],
                                            grid[3 * row + 1].slots[s].values[a], kDomainSize[a]);
            EXPECT_EQ(grid[3 * row + 2].slots[s].values[a], expected);
          }
    }
}

TEST(SolveByRules, UniformRuleSamplingAlsoSolves) {
  Rng rng(9);
  for (ConfigKind kind : kAllConfigs)
    for (int i = 0; i < 100; ++i) {
      const RpmProblem p = generate_problem(TaskConfig{kind}, rng, RuleSampling::Uniform);
      EXPECT_EQ(solve_by_rules(p), p.answer);
    }
}

TEST(SolveByRules, DuplicatedAnswerIsAmbiguous) {
  RpmProblem p = make(ConfigKind::Center, 7);
  p.choices[(p.answer + 1) % kChoicePanels] = p.choices[p.answer];
  EXPECT_THROW(solve_by_rules(p), AmbiguityError);
}

TEST(SolveByRules, NoMatchingChoiceIsAmbiguous) {
  RpmProblem p = make(ConfigKind::Center, 7);
  p.choices[p.answer] = p.choices[(p.answer + 1) % kChoicePanels];
  EXPECT_THROW(solve_by_rules(p), AmbiguityError);
}

TEST(SolveByRules, ConstantRowsPickTheRepeatedPanel) {
  RpmProblem p;
  p.config = TaskConfig{ConfigKind::Center};
  for (auto& r : p.rules.per_attribute) r = rule(RuleKind::Constant);
  const std::array<std::array<std::uint8_t, 3>, 3> rows = {{{1, 2, 3}, {0, 5, 9}, {4, 4, 4}}};
  for (int i = 0; i < kContextPanels; ++i) p.context[i].slots = {Slot{rows[i / 3]}};
  for (int k = 0; k < kChoicePanels; ++k) p.choices[k].slots = {Slot{{std::uint8_t(k % 5), 0, std::uint8_t(k)}}};
  p.choices[5].slots = {Slot{rows[2]}};
  EXPECT_EQ(solve_by_rules(p), 5);
}

TEST(EncodePanel, CenterHasFourOnes) {
  Panel panel{{Slot{{0, 0, 0}}}};
  const auto x = encode_panel(panel, TaskConfig{ConfigKind::Center});
  EXPECT_EQ(x.size(), 196);
  EXPECT_EQ(x.sum(), 4.0);
  EXPECT_EQ(x[kMaxSlots * kSlotFeatures + int(ConfigKind::Center)], 1.0);
}

TEST(EncodePanel, ThreeByThreeGridHasTwentyEightOnes) {
  const RpmProblem p = make(ConfigKind::ThreeByThreeGrid, 7);
  EXPECT_EQ(encode_panel(p.context[0], p.config).sum(), 28.0);
}

TEST(EncodePanel, DistinctPanelsGiveDistinctVectors) {
  const RpmProblem p = make(ConfigKind::TwoByTwoGrid, 21);
  for (int i = 0; i < kChoicePanels; ++i)
    for (int j = i + 1; j < kChoicePanels; ++j)
      EXPECT_NE(encode_panel(p.choices[i], p.config), encode_panel(p.choices[j], p.config));
}

TEST(EncodePanel, EveryEntryIsBinary) {
  const RpmProblem p = make(ConfigKind::OutInGrid, 2);
  const auto x = encode_panel(p.context[3], p.config);
  for (int i = 0; i < x.size(); ++i) EXPECT_TRUE(x[i] == 0.0 || x[i] == 1.0);
  EXPECT_EQ(x.sum(), 5 * 3 + 1);
}

TEST(GenerateDataset, SizesAndDeterminism) {
  const auto [train, test] = generate_dataset(TaskConfig{ConfigKind::Center}, 600, 200, 1);
  EXPECT_EQ(train.problems.size(), 600u);
  EXPECT_EQ(test.problems.size(), 200u);
  EXPECT_EQ(train.split, Split::Train);
  EXPECT_EQ(test.split, Split::Test);
  const auto again = generate_dataset(TaskConfig{ConfigKind::Center}, 600, 200, 1);
  EXPECT_EQ(train, again.first);
  EXPECT_EQ(test, again.second);
}

TEST(GenerateDataset, TrainAndTestAreDisjoint) {
  const auto [train, test] = generate_dataset(TaskConfig{ConfigKind::LeftRight}, 300, 100, 4);
  auto key = [](const RpmProblem& p) {
    std::ostringstream s;
    for (const auto* panels : {&p.context, &p.choices})
      for (const Panel& panel : *panels)
        for (const Slot& slot : panel.slots) s << int(slot.values[0]) << int(slot.values[1]) << int(slot.values[2]) << '|';
    s << p.answer;
    return s.str();
  };
  std::set<std::string> seen;
  for (const auto& p : train.problems) seen.insert(key(p));
  for (const auto& p : test.problems) EXPECT_FALSE(seen.count(key(p)));
}

TEST(GenerateDataset, RejectsNonPositiveSizes) {
  EXPECT_THROW(generate_dataset(TaskConfig{}, 0, 10, 1), std::invalid_argument);
}

TEST(DatasetIo, RoundTripsExactly) {
  const auto [train, test] = generate_dataset(TaskConfig{ConfigKind::OutInCenter}, 20, 5, 3);
  std::stringstream s;
  write_dataset(s, train);
  const std::string first = s.str();
  const Dataset back = read_dataset(s);
  EXPECT_EQ(back, train);
  std::ostringstream again;
  write_dataset(again, back);
  EXPECT_EQ(again.str(), first);
}

TEST(DatasetIo, RejectsGarbage) {
  std::istringstream s("{\"not\": \"a dataset\"}\n");
  EXPECT_THROW(read_dataset(s), FormatError);
}

TEST(ConfigKindNames, RoundTrip) {
  for (ConfigKind kind : kAllConfigs) EXPECT_EQ(parse_config_kind(to_string(kind)), kind);
  EXPECT_FALSE(parse_config_kind("Triangle"));
}

TEST(AnswerPosition, ChiSquaredUniform) {
  std::array<int, kChoicePanels> counts{};
  Rng rng(2024);
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[generate_problem(TaskConfig{kAllConfigs[i % kConfigCount]}, rng).answer];
  const double expected = double(n) / kChoicePanels;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(kChoicePanels - 1), chi2));
  EXPECT_GT(p, 0.01);
}
