#include "rpmcl/replay.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

namespace rpmcl {
namespace {

constexpr std::array<std::string_view, kPolicyCount> kPolicyNames = {
    "random", "min_logit_distance", "min_confidence", "min_margin", "max_loss", "max_time", "min_replays"};

// Draws k distinct positions from `weights` (zeros are never drawn).
std::vector<std::size_t> draw_without_replacement(std::vector<double> weights, int k, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(k));
  double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  for (int i = 0; i < k; ++i) {
    const double u = uniform_unit(rng) * total;
    double acc = 0.0;
    std::size_t pick = weights.size();
    std::size_t last_live = weights.size();
    for (std::size_t j = 0; j < weights.size(); ++j) {
      if (weights[j] <= 0.0) continue;
      last_live = j;
      acc += weights[j];
      if (acc > u) {
        pick = j;
        break;
      }
    }
    if (pick == weights.size()) pick = last_live;  // rounding at the tail
    if (pick == weights.size()) break;
    out.push_back(pick);
    total -= weights[pick];
    weights[pick] = 0.0;
  }
  return out;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

}  // namespace

std::string_view to_string(PolicyKind kind) { return kPolicyNames[static_cast<int>(kind)]; }
std::string_view to_string(Balance balance) { return balance == Balance::Unbalanced ? "unbalanced" : "balanced"; }

std::optional<PolicyKind> parse_policy_kind(std::string_view name) {
  for (int i = 0; i < kPolicyCount; ++i)
    if (name == kPolicyNames[i]) return static_cast<PolicyKind>(i);
  if (name == "max_time_since_replay") return PolicyKind::MaxTimeSinceReplay;
  return std::nullopt;
}

std::optional<Balance> parse_balance(std::string_view name) {
  if (name == "unbalanced") return Balance::Unbalanced;
  if (name == "balanced") return Balance::Balanced;
  return std::nullopt;
}

std::vector<double> shift_scores(std::span<const double> raw) {
  if (raw.empty()) throw EmptyBufferError("shift_scores: empty buffer");
  const double offset = 1.0 - *std::min_element(raw.begin(), raw.end());
  std::vector<double> out(raw.begin(), raw.end());
  for (double& s : out) s += offset;
  return out;
}

std::vector<double> shift_scores(const ReplayBuffer& buffer) {
  std::vector<double> raw(buffer.entries.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = buffer.entries[i].raw_score;
  return shift_scores(raw);
}

std::vector<double> to_values(PolicyKind policy, std::span<const double> shifted, double epsilon) {
  std::vector<double> v(shifted.begin(), shifted.end());
  if (inverts_scores(policy))
    for (double& x : v) x = 1.0 / (x + epsilon);
  return v;
}

std::vector<double> selection_probs(const ReplayBuffer& buffer) {
  auto p = to_values(buffer.policy.kind, shift_scores(buffer), buffer.epsilon);
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& x : p) x /= total;
  return p;
}

std::vector<std::size_t> sample_unbalanced(const ReplayBuffer& buffer, int r, Rng& rng) {
  if (buffer.entries.empty()) throw EmptyBufferError("sample_unbalanced: empty buffer");
  if (buffer.entries.size() <= static_cast<std::size_t>(r)) return all_indices(buffer.entries.size());
  return draw_without_replacement(selection_probs(buffer), r, rng);
}

std::vector<int> balanced_quotas(std::span<const int> entries_per_task, int r) {
  std::vector<int> quota(entries_per_task.size(), 0);
  for (int unit = 0; unit < r; ++unit) {
    std::size_t best = quota.size();
    for (std::size_t t = 0; t < quota.size(); ++t) {
      if (quota[t] >= entries_per_task[t]) continue;
      if (best == quota.size() || quota[t] < quota[best]) best = t;
    }
    if (best == quota.size()) break;
    ++quota[best];
  }
  return quota;
}

std::vector<std::size_t> sample_balanced(const ReplayBuffer& buffer, int r, Rng& rng) {
  if (buffer.entries.empty()) throw EmptyBufferError("sample_balanced: empty buffer");
  if (buffer.entries.size() <= static_cast<std::size_t>(r)) return all_indices(buffer.entries.size());

  const auto p = selection_probs(buffer);
  std::map<std::int32_t, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < buffer.entries.size(); ++i) by_task[buffer.entries[i].task_id].push_back(i);

  std::vector<int> sizes;
  for (const auto& [task, members] : by_task) sizes.push_back(static_cast<int>(members.size()));
  const auto quotas = balanced_quotas(sizes, r);

  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(r));
  std::size_t t = 0;
  for (const auto& [task, members] : by_task) {
    const int q = quotas[t++];
    if (q == 0) continue;
    std::vector<double> w(members.size());
    for (std::size_t i = 0; i < members.size(); ++i) w[i] = p[members[i]];
    for (std::size_t pick : draw_without_replacement(std::move(w), q, rng)) out.push_back(members[pick]);
  }
  return out;
}

std::vector<std::size_t> sample_replay(const ReplayBuffer& buffer, Rng& rng) {
  return buffer.policy.balance == Balance::Balanced ? sample_balanced(buffer, buffer.r, rng)
                                                    : sample_unbalanced(buffer, buffer.r, rng);
}

void write_buffer_csv(std::ostream& out, const ReplayBuffer& buffer) {
  out << "entry_id,task_id,s,v,p,replay_count,last_replay_step\n";
  if (buffer.entries.empty()) return;
  const auto shifted = shift_scores(buffer);
  const auto v = to_values(buffer.policy.kind, shifted, buffer.epsilon);
  const auto p = selection_probs(buffer);
  char line[256];
  for (std::size_t i = 0; i < buffer.entries.size(); ++i) {
    const auto& e = buffer.entries[i];
    std::snprintf(line, sizeof line, "%zu,%d,%.17g,%.17g,%.17g,%lld,%lld\n", i, e.task_id, e.raw_score, v[i], p[i],
                  static_cast<long long>(e.replay_count), static_cast<long long>(e.last_replay_step));
    out << line;
  }
}

std::vector<ReplayEntry> read_buffer_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("entry_id,task_id,s", 0) != 0)
    throw std::runtime_error("buffer csv: missing header");
  std::vector<ReplayEntry> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() != 7) throw std::runtime_error("buffer csv: expected 7 columns");
    ReplayEntry e;
    e.sample = std::stoi(fields[0]);
    e.task_id = std::stoi(fields[1]);
    e.raw_score = std::stod(fields[2]);
    e.replay_count = std::stoll(fields[5]);
    e.last_replay_step = std::stoll(fields[6]);
    entries.push_back(e);
  }
  return entries;
}

}  // namespace rpmcl
