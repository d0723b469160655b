#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "rpmcl/continual.hpp"

using namespace rpmcl;

namespace {

constexpr int kTrain = 40;
constexpr int kTest = 24;

const TaskSuite& suite() {
  static const TaskSuite s = make_suite(kTrain, kTest, 11);
  return s;
}

TrainingConfig tiny() {
  TrainingConfig c;
  c.epochs = 3;
  c.offline_min_epochs = 2;
  c.offline_max_epochs = 4;
  c.offline_patience = 1;
  return c;
}

struct Fixture {
  StreamSchedule schedule;
  BaseState base;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.schedule = make_schedule(suite(), 2, 5);
    x.base = base_initialize(x.schedule, tiny(), 7);
    return x;
  }();
  return f;
}

LearnerSpec replay(PolicyKind kind, int r, Balance balance = Balance::Unbalanced) {
  return {LearnerKind::PartialReplay, {kind, balance}, r};
}

}  // namespace

TEST(Suite, BuiltFromDatasetsMatchesGenerated) {
  std::vector<Dataset> datasets;
  for (ConfigKind kind : kAllConfigs) {
    auto [train, test] = generate_dataset(TaskConfig{kind}, kTrain, kTest, 11);
    datasets.push_back(std::move(test));
    datasets.push_back(std::move(train));
  }
  std::reverse(datasets.begin(), datasets.end());
  const TaskSuite s = make_suite(datasets);
  for (ConfigKind kind : kAllConfigs) {
    ASSERT_EQ(s[kind].train.size(), std::size_t(kTrain));
    ASSERT_EQ(s[kind].test.size(), std::size_t(kTest));
    for (int i = 0; i < kTrain; ++i) EXPECT_EQ(s[kind].train[i].answer, suite()[kind].train[i].answer);
  }
}

TEST(Schedule, PresetsAndShuffledOrder) {
  const auto s = make_schedule(suite(), 3, 1);
  EXPECT_EQ(s.permutation, kPermutations[2]);
  EXPECT_EQ(s.permutation[0], ConfigKind::TwoByTwoGrid);
  for (int t = 0; t < s.size(); ++t) {
    EXPECT_EQ(s.tasks[t], &suite()[s.permutation[t]]);
    std::vector<int> sorted = s.order[t];
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> iota(kTrain);
    std::iota(iota.begin(), iota.end(), 0);
    EXPECT_EQ(sorted, iota);
  }
  EXPECT_EQ(make_schedule(suite(), 3, 1).order, s.order);
  EXPECT_NE(make_schedule(suite(), 3, 2).order, s.order);
  EXPECT_THROW(make_schedule(suite(), 4, 1), std::invalid_argument);
  EXPECT_THROW(make_schedule(suite(), 0, 1), std::invalid_argument);
}

TEST(Schedule, PermutationsCoverEveryConfigOnce) {
  for (const auto& perm : kPermutations) {
    auto sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, kAllConfigs);
  }
}

TEST(Training, FastProfile) {
  const auto f = TrainingConfig::fast();
  EXPECT_EQ(f.epochs, 20);
  EXPECT_EQ(f.batch_size, 32);
  const TrainingConfig d;
  EXPECT_EQ(d.epochs, 50);
  EXPECT_EQ(d.adam.lr, 3e-4);
  EXPECT_EQ(d.ewc_lambda, 10.0);
  EXPECT_EQ(d.offline_max_epochs, 250);
}

TEST(Learners, LabelsAndNames) {
  EXPECT_EQ(replay(PolicyKind::MinReplays, 32).label(), "partial_replay-min_replays-unbalanced-r32");
  EXPECT_EQ((LearnerSpec{LearnerKind::Ewc, {}, 32}).label(), "ewc");
  EXPECT_EQ(parse_learner_kind("cumulative_replay"), LearnerKind::CumulativeReplay);
  EXPECT_FALSE(parse_learner_kind("icarl"));
  EXPECT_TRUE(is_streaming(LearnerKind::PartialReplay));
  EXPECT_FALSE(is_streaming(LearnerKind::Distillation));
}

TEST(BaseInitialize, DeterministicWithOneRow) {
  const auto& f = fixture();
  EXPECT_EQ(f.base.row.accuracy.size(), std::size_t(kConfigCount));
  EXPECT_EQ(f.base.epochs, 3);
  const auto again = base_initialize(f.schedule, tiny(), 7);
  EXPECT_TRUE(again.params == f.base.params);
  EXPECT_EQ(again.row.accuracy, f.base.row.accuracy);
  EXPECT_GT(f.base.adam.step, 0);
}

TEST(EvaluateAll, AccuracyIsMeanOfFlags) {
  const auto& f = fixture();
  const auto row = evaluate_all(f.base.params, f.schedule);
  for (int t = 0; t < kConfigCount; ++t) {
    const double hits = std::accumulate(row.flags[t].begin(), row.flags[t].end(), 0.0);
    EXPECT_DOUBLE_EQ(row.accuracy[t], hits / kTest);
  }
}

TEST(RunLearner, FineTuneStreamShape) {
  const auto& f = fixture();
  const auto r = run_learner({LearnerKind::FineTuneStream, {}, 32}, f.schedule, f.base, tiny(), 3);
  EXPECT_FALSE(r.failed);
  EXPECT_EQ(r.R.rows(), kConfigCount);
  EXPECT_EQ(r.R.cols(), kConfigCount);
  for (int j = 0; j < kConfigCount; ++j) EXPECT_EQ(r.R(0, j), f.base.row.accuracy[j]);
  EXPECT_EQ(r.log.stream_length, 6 * kTrain);
  EXPECT_EQ(r.log.updates, 6 * kTrain);
  EXPECT_FALSE(r.log.final_buffer);
  EXPECT_EQ(r.log.aux_bytes, 0u);
}

TEST(RunLearner, PartialReplayBufferAccounting) {
  const auto& f = fixture();
  const int r = 8;
  const auto res = run_learner(replay(PolicyKind::MinReplays, r), f.schedule, f.base, tiny(), 3);
  ASSERT_TRUE(res.log.final_buffer);
  const auto& entries = res.log.final_buffer->entries;
  EXPECT_EQ(entries.size(), std::size_t(kConfigCount * kTrain));
  // Every step replays r entries and adds one with count 1.
  std::int64_t total = 0;
  for (const auto& e : entries) total += e.replay_count;
  EXPECT_EQ(total, std::int64_t(kTrain) * 3 + std::int64_t(6 * kTrain) * (r + 1));
  for (int t = 0; t < kConfigCount; ++t)
    EXPECT_EQ(std::count_if(entries.begin(), entries.end(), [&](const auto& e) { return e.task_id == t; }), kTrain);
  EXPECT_GT(res.log.aux_bytes, 0u);
}

TEST(RunLearner, DeterministicAcrossCalls) {
  const auto& f = fixture();
  for (const LearnerSpec& spec :
       {replay(PolicyKind::MaxLoss, 4), replay(PolicyKind::Random, 4, Balance::Balanced),
        LearnerSpec{LearnerKind::Ewc, {}, 32}, LearnerSpec{LearnerKind::Distillation, {}, 32}}) {
    const auto a = run_learner(spec, f.schedule, f.base, tiny(), 3);
    const auto b = run_learner(spec, f.schedule, f.base, tiny(), 3);
    EXPECT_TRUE(a.params == b.params) << spec.label();
    EXPECT_TRUE((a.R.array() == b.R.array()).all()) << spec.label();
  }
}

TEST(RunLearner, BatchLearnersRecordEpochs) {
  const auto& f = fixture();
  for (LearnerKind kind : {LearnerKind::FineTuneBatch, LearnerKind::CumulativeReplay}) {
    const auto r = run_learner({kind, {}, 32}, f.schedule, f.base, tiny(), 3);
    EXPECT_EQ(r.R.rows(), kConfigCount);
    EXPECT_EQ(std::count_if(r.log.records.begin(), r.log.records.end(), [](const auto& x) { return x.event == "epoch"; }),
              6 * 3);
  }
}

TEST(RunLearner, CumulativeSeesGrowingPool) {
  const auto& f = fixture();
  const auto ft = run_learner({LearnerKind::FineTuneBatch, {}, 32}, f.schedule, f.base, tiny(), 3);
  const auto cu = run_learner({LearnerKind::CumulativeReplay, {}, 32}, f.schedule, f.base, tiny(), 3);
  const auto batches = [](int n) { return (n + 31) / 32; };
  EXPECT_EQ(ft.log.updates, 6 * 3 * batches(kTrain));
  std::int64_t expected = 0;
  for (int t = 1; t < kConfigCount; ++t) expected += 3 * batches((t + 1) * kTrain);
  EXPECT_EQ(cu.log.updates, expected);
}

TEST(RunLearner, RejectsOfflineAndBadReplaySize) {
  const auto& f = fixture();
  EXPECT_THROW(run_learner({LearnerKind::Offline, {}, 32}, f.schedule, f.base, tiny(), 3), std::invalid_argument);
  EXPECT_THROW(run_learner(replay(PolicyKind::Random, 0), f.schedule, f.base, tiny(), 3), std::invalid_argument);
}

TEST(RunLearner, DivergenceKeepsEarlierRows) {
  const auto& f = fixture();
  auto config = tiny();
  config.divergence_threshold = 1e-6;
  const auto r = run_learner({LearnerKind::FineTuneStream, {}, 32}, f.schedule, f.base, config, 3);
  EXPECT_TRUE(r.failed);
  EXPECT_FALSE(r.error.empty());
  EXPECT_EQ(r.R.rows(), 1);
}

TEST(BaseInitialize, DivergenceThrows) {
  auto config = tiny();
  config.divergence_threshold = 1e-6;
  EXPECT_THROW(base_initialize(fixture().schedule, config, 7), DivergenceError);
}

TEST(OfflineTrain, ShapeStopsAndDeterminism) {
  const auto& f = fixture();
  const auto a = offline_train(f.schedule, tiny(), 7, 11);
  EXPECT_FALSE(a.failed);
  EXPECT_EQ(a.R.rows(), kConfigCount);
  EXPECT_EQ(std::count_if(a.log.records.begin(), a.log.records.end(), [](const auto& x) { return x.event == "stop"; }),
            kConfigCount);
  const auto b = offline_train(f.schedule, tiny(), 7, 11);
  EXPECT_TRUE((a.R.array() == b.R.array()).all());
}

TEST(CanonicalFlags, ReorderedByConfigKind) {
  const auto& f = fixture();
  RunLog log;
  log.rows.push_back(f.base.row);
  const auto flags = canonical_final_flags(log, f.schedule);
  ASSERT_EQ(flags.size(), std::size_t(kConfigCount * kTest));
  for (int k = 0; k < kConfigCount; ++k) {
    const auto pos = std::find(f.schedule.permutation.begin(), f.schedule.permutation.end(), kAllConfigs[k]) -
                     f.schedule.permutation.begin();
    for (int i = 0; i < kTest; ++i) EXPECT_EQ(flags[k * kTest + i], f.base.row.flags[pos][i]);
  }
  EXPECT_THROW(canonical_final_flags(RunLog{}, f.schedule), std::invalid_argument);
}
