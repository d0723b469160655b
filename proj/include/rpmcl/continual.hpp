#pragma once

// Continual-learning protocols. A run starts with offline training on the
// first task of a permutation, then visits the remaining tasks in order,
// either one sample at a time (streaming) or one task at a time with many
// epochs (incremental batch). After every task the model is scored on all
// test sets, one row of the accuracy matrix R per task.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpmcl/metrics.hpp"
#include "rpmcl/model.hpp"
#include "rpmcl/replay.hpp"
#include "rpmcl/taskgen.hpp"

namespace rpmcl {

using Real = float;  // training precision

struct TaskData {
  TaskConfig config;
  std::vector<EncodedProblem> train;
  std::vector<EncodedProblem> test;
};

/// Encoded train/test data for all seven configurations, indexed by kind.
struct TaskSuite {
  std::array<TaskData, kConfigCount> tasks;
  const TaskData& operator[](ConfigKind kind) const { return tasks[static_cast<int>(kind)]; }
};

TaskSuite make_suite(int n_train, int n_test, std::uint64_t dataset_seed);
/// Builds a suite from already generated datasets (one train and one test
/// set per configuration, any order).
TaskSuite make_suite(std::span<const Dataset> datasets);

using Permutation = std::array<ConfigKind, kConfigCount>;

inline constexpr std::array<Permutation, 3> kPermutations = {{
    {ConfigKind::Center, ConfigKind::OutInCenter, ConfigKind::LeftRight, ConfigKind::UpDown,
     ConfigKind::TwoByTwoGrid, ConfigKind::ThreeByThreeGrid, ConfigKind::OutInGrid},
    {ConfigKind::UpDown, ConfigKind::Center, ConfigKind::OutInCenter, ConfigKind::OutInGrid,
     ConfigKind::ThreeByThreeGrid, ConfigKind::TwoByTwoGrid, ConfigKind::LeftRight},
    {ConfigKind::TwoByTwoGrid, ConfigKind::LeftRight, ConfigKind::OutInGrid, ConfigKind::UpDown,
     ConfigKind::ThreeByThreeGrid, ConfigKind::Center, ConfigKind::OutInCenter},
}};

/// Task order and per-task sample order, fixed before any learner runs.
struct StreamSchedule {
  int permutation_id = 0;  // 1-based preset number
  Permutation permutation{};
  std::array<const TaskData*, kConfigCount> tasks{};
  std::array<std::vector<int>, kConfigCount> order;

  int size() const { return kConfigCount; }
  const EncodedProblem& sample(int task, int index) const { return tasks[task]->train[index]; }
};

StreamSchedule make_schedule(const TaskSuite& suite, int permutation_id, std::uint64_t stream_seed);

struct TrainingConfig {
  int epochs = 50;  // base initialization and batch learners
  int batch_size = 32;
  AdamConfig adam;
  double ewc_lambda = 10.0;
  double distill_lambda = 1.0;
  int offline_min_epochs = 50;
  int offline_max_epochs = 250;
  int offline_patience = 10;
  double validation_fraction = 0.1;
  double divergence_threshold = 1e3;

  /// Shorter schedule for CI.
  static TrainingConfig fast();
  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

enum class LearnerKind : std::uint8_t {
  FineTuneStream,
  PartialReplay,
  FineTuneBatch,
  Ewc,
  Distillation,
  CumulativeReplay,
  Offline,
};

std::string_view to_string(LearnerKind kind);
std::optional<LearnerKind> parse_learner_kind(std::string_view name);
bool is_streaming(LearnerKind kind);

struct LearnerSpec {
  LearnerKind kind = LearnerKind::FineTuneStream;
  ReplayPolicy policy;  // PartialReplay only
  int r = 32;           // PartialReplay only

  /// Directory-safe name, e.g. "partial_replay-min_replays-unbalanced-r32".
  std::string label() const;
  friend bool operator==(const LearnerSpec&, const LearnerSpec&) = default;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalRow {
  std::vector<double> accuracy;                   // stream order
  std::vector<std::vector<std::uint8_t>> flags;   // stream order
};

struct LogRecord {
  std::int64_t step = 0;
  int task = 0;
  double loss = 0.0;
  std::string event;
};

struct RunLog {
  std::vector<LogRecord> records;
  std::vector<EvalRow> rows;
  std::optional<ReplayBuffer> final_buffer;
  std::int64_t updates = 0;
  std::int64_t stream_length = 0;
  double wall_seconds = 0.0;
  std::size_t aux_bytes = 0;
};

/// A diverged run keeps the rows evaluated before the abort.
struct RunResult {
  LearnerSpec learner;
  RMatrix R;
  RunLog log;
  ModelParams<Real> params;
  bool failed = false;
  std::string error;
};

/// Trained weights shared by every learner of one permutation.
struct BaseState {
  ModelParams<Real> params;
  AdamState<Real> adam;
  EvalRow row;
  int epochs = 0;
};

BaseState base_initialize(const StreamSchedule& schedule, const TrainingConfig& config, std::uint64_t init_seed);

/// One continual learner from the shared base state. Offline is handled by
/// offline_train and rejected here.
RunResult run_learner(const LearnerSpec& learner, const StreamSchedule& schedule, const BaseState& base,
                      const TrainingConfig& config, std::uint64_t stream_seed);

/// From-scratch training on all data seen up to each task, with a held-out
/// validation split, early stopping and best-accuracy checkpoint selection.
RunResult offline_train(const StreamSchedule& schedule, const TrainingConfig& config, std::uint64_t init_seed,
                        std::uint64_t split_seed);

/// Evaluates on every test set in stream order.
EvalRow evaluate_all(const ModelParams<Real>& params, const StreamSchedule& schedule);

/// Final-row correctness flags re-ordered by configuration kind so that
/// pools line up across permutations.
std::vector<std::uint8_t> canonical_final_flags(const RunLog& log, const StreamSchedule& schedule);

}  // namespace rpmcl
