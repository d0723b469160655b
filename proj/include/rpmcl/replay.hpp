#pragma once

// Replay buffer and selective-replay policies.
//
// Each entry stores a raw score s. At selection time the scores are shifted
// so the buffer minimum is 1, turned into values v (identity for Random and
// MaxLoss, 1/(s + eps) otherwise) and normalized into probabilities
// p_i = v_i / sum_j v_j.

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "rpmcl/model.hpp"
#include "rpmcl/random.hpp"

namespace rpmcl {

enum class PolicyKind : std::uint8_t {
  Random,
  MinLogitDistance,
  MinConfidence,
  MinMargin,
  MaxLoss,
  MaxTimeSinceReplay,
  MinReplays,
};
inline constexpr int kPolicyCount = 7;
inline constexpr std::array<PolicyKind, kPolicyCount> kAllPolicies = {
    PolicyKind::Random,  PolicyKind::MinLogitDistance,   PolicyKind::MinConfidence, PolicyKind::MinMargin,
    PolicyKind::MaxLoss, PolicyKind::MaxTimeSinceReplay, PolicyKind::MinReplays};

enum class Balance : std::uint8_t { Unbalanced, Balanced };

struct ReplayPolicy {
  PolicyKind kind = PolicyKind::Random;
  Balance balance = Balance::Unbalanced;
  friend bool operator==(const ReplayPolicy&, const ReplayPolicy&) = default;
};

std::string_view to_string(PolicyKind kind);
std::string_view to_string(Balance balance);
std::optional<PolicyKind> parse_policy_kind(std::string_view name);
std::optional<Balance> parse_balance(std::string_view name);

/// True when low raw scores should be replayed first.
constexpr bool inverts_scores(PolicyKind kind) { return kind != PolicyKind::Random && kind != PolicyKind::MaxLoss; }

struct ReplayEntry {
  std::int32_t task_id = 0;  // position of the task in the stream
  std::int32_t sample = 0;   // index into that task's training set
  std::int32_t label = 0;
  double raw_score = 0.0;
  std::int64_t replay_count = 0;
  std::int64_t last_replay_step = 0;
};

struct ReplayBuffer {
  std::vector<ReplayEntry> entries;
  std::int64_t global_step = 0;
  ReplayPolicy policy;
  double epsilon = 1e-7;
  int r = 32;
};

struct EmptyBufferError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class Derived>
double raw_score(PolicyKind policy, const Eigen::MatrixBase<Derived>& scores, int label, std::int64_t replay_count,
                 std::int64_t last_replay_step) {
  const Eigen::VectorXd phi = scores.template cast<double>();
  switch (policy) {
    case PolicyKind::Random:
      return 1.0;
    case PolicyKind::MinLogitDistance:
      return std::abs(phi[label]);
    case PolicyKind::MinConfidence:
      return std::exp(log_softmax(phi)[label]);
    case PolicyKind::MinMargin: {
      const Eigen::VectorXd p = softmax(phi);
      double runner_up = -1.0;
      for (Eigen::Index k = 0; k < p.size(); ++k)
        if (k != label) runner_up = std::max(runner_up, p[k]);
      return p[label] - runner_up;
    }
    case PolicyKind::MaxLoss:
      return -log_softmax(phi)[label];
    case PolicyKind::MaxTimeSinceReplay:
      return static_cast<double>(last_replay_step);
    case PolicyKind::MinReplays:
      return static_cast<double>(replay_count);
  }
  return 1.0;
}

/// s_i + (1 - min_j s_j).
std::vector<double> shift_scores(std::span<const double> raw);
std::vector<double> shift_scores(const ReplayBuffer& buffer);

std::vector<double> to_values(PolicyKind policy, std::span<const double> shifted, double epsilon);

std::vector<double> selection_probs(const ReplayBuffer& buffer);

/// Sequential weighted draws without replacement, renormalizing after each
/// draw. Returns every index when the buffer holds at most r entries.
std::vector<std::size_t> sample_unbalanced(const ReplayBuffer& buffer, int r, Rng& rng);

/// Per-task quotas for a balanced draw. Units go one at a time to the task
/// with the fewest assigned samples that still has spare entries, ties to
/// the earlier task; this is the floor quota plus remainder to the least
/// represented tasks, with shortfalls redistributed.
std::vector<int> balanced_quotas(std::span<const int> entries_per_task, int r);

std::vector<std::size_t> sample_balanced(const ReplayBuffer& buffer, int r, Rng& rng);

/// Dispatches on the buffer's balance mode with its own r.
std::vector<std::size_t> sample_replay(const ReplayBuffer& buffer, Rng& rng);

/// Rescores the replayed entries from post-update outputs and bumps their
/// bookkeeping. Entries not listed are left untouched.
template <class Scalar>
void update_after_replay(ReplayBuffer& buffer, std::span<const std::size_t> chosen,
                         std::span<const Scores<Scalar>> post_scores, std::int64_t step) {
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    ReplayEntry& e = buffer.entries.at(chosen[i]);
    e.replay_count += 1;
    e.last_replay_step = step;
    e.raw_score = raw_score(buffer.policy.kind, post_scores[i], e.label, e.replay_count, e.last_replay_step);
  }
}

/// Appends a freshly streamed sample; it counts as replayed once, now.
template <class Scalar>
void add_entry(ReplayBuffer& buffer, int task_id, int sample, int label, const Scores<Scalar>& post_scores,
               std::int64_t step) {
  ReplayEntry e;
  e.task_id = task_id;
  e.sample = sample;
  e.label = label;
  e.replay_count = 1;
  e.last_replay_step = step;
  e.raw_score = raw_score(buffer.policy.kind, post_scores, label, e.replay_count, e.last_replay_step);
  buffer.entries.push_back(e);
}

/// One entry per base sample, scored by a forward pass with the post-base
/// parameters; replay counts start at the number of base epochs.
template <class Scalar>
ReplayBuffer init_buffer_from_base(std::span<const EncodedProblem> base, const ModelParams<Scalar>& params,
                                   ReplayPolicy policy, int base_epochs, int r, int task_id = 0) {
  ReplayBuffer buffer;
  buffer.policy = policy;
  buffer.r = r;
  buffer.entries.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    ReplayEntry e;
    e.task_id = task_id;
    e.sample = static_cast<std::int32_t>(i);
    e.label = base[i].answer;
    e.replay_count = base_epochs;
    e.last_replay_step = 0;
    e.raw_score = raw_score(policy.kind, score_problem(params, base[i]), e.label, e.replay_count, 0);
    buffer.entries.push_back(e);
  }
  return buffer;
}

/// Comma-separated export: entry_id,task_id,s,v,p,replay_count,last_replay_step.
void write_buffer_csv(std::ostream& out, const ReplayBuffer& buffer);

/// Inverse of write_buffer_csv for the fields a histogram needs.
std::vector<ReplayEntry> read_buffer_csv(std::istream& in);

}  // namespace rpmcl
