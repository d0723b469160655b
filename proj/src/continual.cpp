#include "rpmcl/continual.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace rpmcl {
namespace {

// Seed tags, one per consumer of randomness.
constexpr std::uint64_t kTagInit = 1;
constexpr std::uint64_t kTagOrder = 2;
constexpr std::uint64_t kTagShuffle = 3;
constexpr std::uint64_t kTagReplay = 4;
constexpr std::uint64_t kTagOffline = 5;
constexpr std::uint64_t kTagSplit = 6;

constexpr std::array<std::string_view, 7> kLearnerNames = {
    "fine_tune_stream", "partial_replay", "fine_tune_batch", "ewc", "distillation", "cumulative_replay", "offline"};

using Batch = std::vector<const EncodedProblem*>;

struct Objective {
  const EwcState<Real>* ewc = nullptr;
  const ModelParams<Real>* teacher = nullptr;
  Real distill_lambda = 0;
};

void check_loss(double loss, const TrainingConfig& config, std::int64_t step) {
  if (!std::isfinite(loss) || loss > config.divergence_threshold)
    throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")");
}

std::size_t param_bytes(const ModelParams<Real>& p) { return static_cast<std::size_t>(p.size()) * sizeof(Real); }

double train_step(ModelParams<Real>& params, AdamState<Real>& adam, const Batch& batch, const Objective& objective,
                  const TrainingConfig& config) {
  const std::span<const EncodedProblem* const> view(batch);
  const auto cache = forward(params, view);
  std::vector<int> labels(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = batch[i]->answer;
  auto [loss, d_scores] = cross_entropy<Real>(cache.scores, labels);
  double total = loss;

  if (objective.teacher && objective.distill_lambda != Real(0)) {
    const Matrix<Real> teacher_scores = forward(*objective.teacher, view).scores;
    const Real inv = Real(1) / static_cast<Real>(batch.size());
    for (Eigen::Index b = 0; b < cache.scores.cols(); ++b) {
      const auto [l, g] = distill_loss<Real>(cache.scores.col(b), teacher_scores.col(b), objective.distill_lambda);
      total += double(l * inv);
      d_scores.col(b) += g * inv;
    }
  }

  auto grads = backward(params, cache, d_scores);
  if (objective.ewc) {
    const auto penalty = ewc_penalty(params, *objective.ewc);
    total += penalty.loss;
    grads += penalty.grads;
  }
  check_loss(total, config, adam.step + 1);
  adam_step(params, grads, adam, config.adam);
  return total;
}

/// One shuffled pass in mini-batches; returns the mean batch loss.
double train_epoch(ModelParams<Real>& params, AdamState<Real>& adam, std::span<const EncodedProblem* const> pool,
                   Rng& rng, const Objective& objective, const TrainingConfig& config) {
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(std::span<std::size_t>(order), rng);
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  double sum = 0.0;
  int batches = 0;
  Batch batch;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    batch.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(pool[order[i]]);
    sum += train_step(params, adam, batch, objective, config);
    ++batches;
  }
  return batches ? sum / batches : 0.0;
}

Batch pointers(std::span<const EncodedProblem> data) {
  Batch out;
  out.reserve(data.size());
  for (const auto& p : data) out.push_back(&p);
  return out;
}

struct LossAccuracy {
  double loss = 0.0;
  double accuracy = 0.0;
};

LossAccuracy loss_and_accuracy(const ModelParams<Real>& params, const Batch& data) {
  constexpr std::size_t kChunk = 64;
  double loss = 0.0;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t end = std::min(data.size(), start + kChunk);
    const std::span<const EncodedProblem* const> chunk(data.data() + start, end - start);
    const auto cache = forward(params, chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto col = cache.scores.col(static_cast<Eigen::Index>(i));
      loss -= double(log_softmax(col)[chunk[i]->answer]);
      hits += predict(col) == chunk[i]->answer;
    }
  }
  return {loss / double(data.size()), double(hits) / double(data.size())};
}

RMatrix to_matrix(const std::vector<EvalRow>& rows) {
  RMatrix R(Eigen::Index(rows.size()), Eigen::Index(rows.empty() ? 0 : rows.front().accuracy.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].accuracy.size(); ++j) R(Eigen::Index(i), Eigen::Index(j)) = rows[i].accuracy[j];
  return R;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void stream_run(const LearnerSpec& learner, const StreamSchedule& schedule, const BaseState& base,
                const TrainingConfig& config, std::uint64_t stream_seed, ModelParams<Real>& params,
                AdamState<Real>& adam, RunLog& log) {
  Rng rng(derive_seed(stream_seed, {kTagReplay, std::uint64_t(schedule.permutation_id)}));
  const bool replay = learner.kind == LearnerKind::PartialReplay;
  std::optional<ReplayBuffer> buffer;
  if (replay)
    buffer = init_buffer_from_base<Real>(schedule.tasks[0]->train, base.params, learner.policy, base.epochs, learner.r);

  std::int64_t step = 0;
  Batch batch;
  std::vector<std::size_t> chosen;
  std::vector<Scores<Real>> post;
  for (int t = 1; t < schedule.size(); ++t) {
    for (int idx : schedule.order[t]) {
      ++step;
      const EncodedProblem* current = &schedule.sample(t, idx);
      batch.clear();
      if (replay) {
        chosen = sample_replay(*buffer, rng);
        for (std::size_t c : chosen) {
          const ReplayEntry& e = buffer->entries[c];
          batch.push_back(&schedule.sample(e.task_id, e.sample));
        }
      }
      batch.push_back(current);
      const double loss = train_step(params, adam, batch, {}, config);
      ++log.updates;
      log.records.push_back({step, t, loss, "update"});

      if (replay) {
        const Matrix<Real> scores = forward(params, std::span<const EncodedProblem* const>(batch)).scores;
        post.resize(chosen.size());
        for (std::size_t i = 0; i < chosen.size(); ++i) post[i] = scores.col(Eigen::Index(i));
        update_after_replay<Real>(*buffer, chosen, post, step);
        add_entry<Real>(*buffer, t, idx, current->answer, scores.col(scores.cols() - 1), step);
        buffer->global_step = step;
      }
    }
    log.stream_length += static_cast<std::int64_t>(schedule.order[t].size());
    log.rows.push_back(evaluate_all(params, schedule));
  }
  if (replay) {
    log.aux_bytes = buffer->entries.size() * (sizeof(ReplayEntry) + sizeof(EncodedProblem));
    log.final_buffer = std::move(buffer);
  }
}

void batch_run(const LearnerSpec& learner, const StreamSchedule& schedule, const TrainingConfig& config,
               std::uint64_t stream_seed, ModelParams<Real>& params, AdamState<Real>& adam, RunLog& log) {
  Rng rng(derive_seed(stream_seed, {kTagShuffle, std::uint64_t(schedule.permutation_id)}));

  std::optional<EwcState<Real>> ewc;
  if (learner.kind == LearnerKind::Ewc) {
    ewc = EwcState<Real>{params, fisher_diagonal<Real>(params, schedule.tasks[0]->train), Real(config.ewc_lambda)};
    log.aux_bytes = 2 * param_bytes(params);
  }
  if (learner.kind == LearnerKind::Distillation) log.aux_bytes = param_bytes(params);

  Batch pool;
  if (learner.kind == LearnerKind::CumulativeReplay) pool = pointers(schedule.tasks[0]->train);
  std::int64_t epoch_counter = 0;
  for (int t = 1; t < schedule.size(); ++t) {
    if (learner.kind == LearnerKind::CumulativeReplay) {
      for (const auto& p : schedule.tasks[t]->train) pool.push_back(&p);
      log.aux_bytes = pool.size() * sizeof(EncodedProblem);
    } else {
      pool = pointers(schedule.tasks[t]->train);
    }

    const ModelParams<Real> teacher = params;
    Objective objective;
    if (ewc) objective.ewc = &*ewc;
    if (learner.kind == LearnerKind::Distillation) {
      objective.teacher = &teacher;
      objective.distill_lambda = Real(config.distill_lambda);
    }

    for (int e = 0; e < config.epochs; ++e) {
      const double loss = train_epoch(params, adam, pool, rng, objective, config);
      log.records.push_back({++epoch_counter, t, loss, "epoch"});
      log.updates += static_cast<std::int64_t>((pool.size() + config.batch_size - 1) / config.batch_size);
    }

    if (ewc) {
      ewc->fisher += fisher_diagonal<Real>(params, schedule.tasks[t]->train);
      ewc->anchor = params;
    }
    log.rows.push_back(evaluate_all(params, schedule));
  }
}

}  // namespace

TaskSuite make_suite(int n_train, int n_test, std::uint64_t dataset_seed) {
  TaskSuite suite;
  for (ConfigKind kind : kAllConfigs) {
    const TaskConfig config{kind};
    auto [train, test] = generate_dataset(config, n_train, n_test, dataset_seed);
    TaskData& data = suite.tasks[config.index()];
    data.config = config;
    data.train = encode_problems(train.problems);
    data.test = encode_problems(test.problems);
  }
  return suite;
}

TaskSuite make_suite(std::span<const Dataset> datasets) {
  TaskSuite suite;
  std::array<int, kConfigCount> seen{};
  for (const Dataset& d : datasets) {
    TaskData& data = suite.tasks[d.config.index()];
    data.config = d.config;
    (d.split == Split::Train ? data.train : data.test) = encode_problems(d.problems);
    seen[d.config.index()] |= d.split == Split::Train ? 1 : 2;
  }
  for (int k = 0; k < kConfigCount; ++k)
    if (seen[k] != 3)
      throw std::invalid_argument("make_suite: missing train or test data for " +
                                  std::string(to_string(kAllConfigs[k])));
  return suite;
}

StreamSchedule make_schedule(const TaskSuite& suite, int permutation_id, std::uint64_t stream_seed) {
  if (permutation_id < 1 || permutation_id > int(kPermutations.size()))
    throw std::invalid_argument("make_schedule: permutation must be 1, 2 or 3");
  StreamSchedule s;
  s.permutation_id = permutation_id;
  s.permutation = kPermutations[permutation_id - 1];
  for (int k = 0; k < kConfigCount; ++k) {
    s.tasks[k] = &suite[s.permutation[k]];
    s.order[k].resize(s.tasks[k]->train.size());
    std::iota(s.order[k].begin(), s.order[k].end(), 0);
    Rng rng(derive_seed(stream_seed, {kTagOrder, std::uint64_t(permutation_id), std::uint64_t(k)}));
    shuffle(std::span<int>(s.order[k]), rng);
  }
  return s;
}

TrainingConfig TrainingConfig::fast() {
  TrainingConfig c;
  c.epochs = 20;
  c.offline_min_epochs = 20;
  c.offline_max_epochs = 100;
  return c;
}

std::string_view to_string(LearnerKind kind) { return kLearnerNames[static_cast<int>(kind)]; }

std::optional<LearnerKind> parse_learner_kind(std::string_view name) {
  for (std::size_t i = 0; i < kLearnerNames.size(); ++i)
    if (name == kLearnerNames[i]) return static_cast<LearnerKind>(i);
  return std::nullopt;
}

bool is_streaming(LearnerKind kind) { return kind == LearnerKind::FineTuneStream || kind == LearnerKind::PartialReplay; }

std::string LearnerSpec::label() const {
  std::string out(to_string(kind));
  if (kind == LearnerKind::PartialReplay)
    out += "-" + std::string(to_string(policy.kind)) + "-" + std::string(to_string(policy.balance)) + "-r" +
           std::to_string(r);
  return out;
}

EvalRow evaluate_all(const ModelParams<Real>& params, const StreamSchedule& schedule) {
  EvalRow row;
  for (int k = 0; k < schedule.size(); ++k) {
    auto ev = evaluate<Real>(params, schedule.tasks[k]->test);
    row.accuracy.push_back(ev.accuracy);
    row.flags.push_back(std::move(ev.correct));
  }
  return row;
}

std::vector<std::uint8_t> canonical_final_flags(const RunLog& log, const StreamSchedule& schedule) {
  if (log.rows.empty()) throw std::invalid_argument("canonical_final_flags: run has no evaluation rows");
  std::vector<std::uint8_t> out;
  for (ConfigKind kind : kAllConfigs) {
    const auto pos = std::find(schedule.permutation.begin(), schedule.permutation.end(), kind);
    const auto& flags = log.rows.back().flags[std::size_t(pos - schedule.permutation.begin())];
    out.insert(out.end(), flags.begin(), flags.end());
  }
  return out;
}

BaseState base_initialize(const StreamSchedule& schedule, const TrainingConfig& config, std::uint64_t init_seed) {
  Rng init_rng(derive_seed(init_seed, {kTagInit, std::uint64_t(schedule.permutation_id)}));
  Rng shuffle_rng(derive_seed(init_seed, {kTagShuffle, std::uint64_t(schedule.permutation_id)}));
  BaseState base{ModelParams<Real>::initialize(init_rng), AdamState<Real>::zeros(), {}, config.epochs};
  const Batch pool = pointers(schedule.tasks[0]->train);
  for (int e = 0; e < config.epochs; ++e) train_epoch(base.params, base.adam, pool, shuffle_rng, {}, config);
  base.row = evaluate_all(base.params, schedule);
  return base;
}

RunResult run_learner(const LearnerSpec& learner, const StreamSchedule& schedule, const BaseState& base,
                      const TrainingConfig& config, std::uint64_t stream_seed) {
  if (learner.kind == LearnerKind::Offline) throw std::invalid_argument("run_learner: use offline_train");
  if (learner.kind == LearnerKind::PartialReplay && learner.r < 1)
    throw std::invalid_argument("run_learner: replay size must be positive");
  const auto start = std::chrono::steady_clock::now();
  RunResult result{learner, {}, {}, base.params, false, {}};
  AdamState<Real> adam = base.adam;
  result.log.rows.push_back(base.row);
  try {
    if (is_streaming(learner.kind))
      stream_run(learner, schedule, base, config, stream_seed, result.params, adam, result.log);
    else
      batch_run(learner, schedule, config, stream_seed, result.params, adam, result.log);
  } catch (const DivergenceError& e) {
    result.failed = true;
    result.error = e.what();
  }
  result.R = to_matrix(result.log.rows);
  result.log.wall_seconds = seconds_since(start);
  return result;
}

RunResult offline_train(const StreamSchedule& schedule, const TrainingConfig& config, std::uint64_t init_seed,
                        std::uint64_t split_seed) {
  const auto start = std::chrono::steady_clock::now();
  RunResult result{{LearnerKind::Offline, {}, 0}, {}, {}, ModelParams<Real>::zeros(), false, {}};
  RunLog& log = result.log;

  Batch train_pool, val_pool;
  std::int64_t epoch_counter = 0;
  for (int t = 0; t < schedule.size() && !result.failed; ++t) {
    // Validation split per task, keyed by configuration so it is shared
    // across permutations.
    const auto& data = schedule.tasks[t]->train;
    std::vector<int> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng split_rng(derive_seed(split_seed, {kTagSplit, std::uint64_t(schedule.tasks[t]->config.index())}));
    shuffle(std::span<int>(idx), split_rng);
    const auto n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * double(data.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_val ? val_pool : train_pool).push_back(&data[idx[i]]);
    log.aux_bytes = (train_pool.size() + val_pool.size()) * sizeof(EncodedProblem);

    Rng init_rng(derive_seed(init_seed, {kTagOffline, std::uint64_t(schedule.permutation_id), std::uint64_t(t)}));
    Rng shuffle_rng(derive_seed(init_seed, {kTagShuffle, kTagOffline, std::uint64_t(schedule.permutation_id),
                                            std::uint64_t(t)}));
    ModelParams<Real> params = ModelParams<Real>::initialize(init_rng);
    AdamState<Real> adam = AdamState<Real>::zeros();
    ModelParams<Real> best = params;
    double best_accuracy = -1.0;
    double best_loss = std::numeric_limits<double>::infinity();
    int since_improvement = 0;
    int epoch = 0;
    while (epoch < config.offline_max_epochs) {
      ++epoch;
      double loss = 0.0;
      try {
        loss = train_epoch(params, adam, train_pool, shuffle_rng, {}, config);
      } catch (const DivergenceError& e) {
        result.failed = true;
        result.error = e.what();
        break;
      }
      log.updates += static_cast<std::int64_t>((train_pool.size() + config.batch_size - 1) / config.batch_size);
      log.records.push_back({++epoch_counter, t, loss, "epoch"});
      const auto val = val_pool.empty() ? LossAccuracy{loss, 0.0} : loss_and_accuracy(params, val_pool);
      if (val_pool.empty() || val.accuracy > best_accuracy) {
        best_accuracy = val.accuracy;
        best = params;
      }
      if (val.loss < best_loss) {
        best_loss = val.loss;
        since_improvement = 0;
      } else {
        ++since_improvement;
      }
      if (epoch >= config.offline_min_epochs && since_improvement >= config.offline_patience) break;
    }
    if (result.failed) break;
    log.records.push_back({epoch, t, best_accuracy, "stop"});
    log.rows.push_back(evaluate_all(best, schedule));
    result.params = std::move(best);
  }
  result.R = to_matrix(log.rows);
  log.wall_seconds = seconds_since(start);
  return result;
}

}  // namespace rpmcl
