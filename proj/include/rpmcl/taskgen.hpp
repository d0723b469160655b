#pragma once

// Procedural symbolic Raven's-Progressive-Matrices problems.
//
// A problem is a 3x3 grid of panels with the last one missing. Each panel
// holds a fixed number of slots (set by the task configuration) and every
// slot carries a (shape, size, color) triple. One row-wise rule per
// attribute governs all slots of all three rows.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "rpmcl/random.hpp"

namespace rpmcl {

enum class ConfigKind : std::uint8_t {
  Center,
  TwoByTwoGrid,
  ThreeByThreeGrid,
  LeftRight,
  UpDown,
  OutInCenter,
  OutInGrid,
};

inline constexpr int kConfigCount = 7;
inline constexpr std::array<ConfigKind, kConfigCount> kAllConfigs = {
    ConfigKind::Center,    ConfigKind::TwoByTwoGrid, ConfigKind::ThreeByThreeGrid,
    ConfigKind::LeftRight, ConfigKind::UpDown,       ConfigKind::OutInCenter,
    ConfigKind::OutInGrid};

struct TaskConfig {
  ConfigKind kind = ConfigKind::Center;

  constexpr int slot_count() const {
    constexpr std::array<int, kConfigCount> counts = {1, 4, 9, 2, 2, 2, 5};
    return counts[static_cast<int>(kind)];
  }
  constexpr int index() const { return static_cast<int>(kind); }

  friend constexpr bool operator==(TaskConfig, TaskConfig) = default;
};

std::string_view to_string(ConfigKind kind);
/// Accepts the canonical names ("Center", "TwoByTwoGrid", ...) and the
/// short aliases used on the command line ("center", "2x2grid", ...).
std::optional<ConfigKind> parse_config_kind(std::string_view name);

// Attribute domains.
enum class Attribute : std::uint8_t { Shape, Size, Color };
inline constexpr int kAttributeCount = 3;
inline constexpr std::array<int, kAttributeCount> kDomainSize = {5, 6, 10};

struct Slot {
  std::array<std::uint8_t, kAttributeCount> values{};
  friend bool operator==(const Slot&, const Slot&) = default;
  friend auto operator<=>(const Slot&, const Slot&) = default;
};

struct Panel {
  std::vector<Slot> slots;
  friend bool operator==(const Panel&, const Panel&) = default;
  friend auto operator<=>(const Panel&, const Panel&) = default;
};

enum class RuleKind : std::uint8_t { Constant, Progression, Arithmetic, DistributeThree };

std::string_view to_string(RuleKind kind);
std::optional<RuleKind> parse_rule_kind(std::string_view name);

/// Rule for one attribute. `param` is the step for Progression
/// (-2, -1, +1, +2) and the sign for Arithmetic (+1, -1). `triple` is the
/// value set cycled by DistributeThree.
struct AttributeRule {
  RuleKind kind = RuleKind::Constant;
  int param = 0;
  std::array<std::uint8_t, 3> triple{};
  friend bool operator==(const AttributeRule&, const AttributeRule&) = default;
};

struct RuleSpec {
  std::array<AttributeRule, kAttributeCount> per_attribute{};
  friend bool operator==(const RuleSpec&, const RuleSpec&) = default;
};

inline constexpr int kContextPanels = 8;
inline constexpr int kChoicePanels = 8;

struct RpmProblem {
  std::array<Panel, kContextPanels> context;
  std::array<Panel, kChoicePanels> choices;
  int answer = 0;
  TaskConfig config;
  RuleSpec rules;
  friend bool operator==(const RpmProblem&, const RpmProblem&) = default;
};

enum class Split : std::uint8_t { Train, Test };

struct Dataset {
  std::vector<RpmProblem> problems;
  TaskConfig config;
  Split split = Split::Train;
  std::uint64_t seed = 0;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AmbiguityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Value completing a row given its first two entries. Progression and
/// Arithmetic wrap modulo `domain_size`.
int apply_rule(const AttributeRule& rule, int first, int second, int domain_size);

/// How rules are chosen. Profile uses the configuration's fixed rule kind
/// and step/sign per attribute (DistributeThree triples still vary per
/// problem); Uniform draws every rule and parameter at random.
enum class RuleSampling : std::uint8_t { Profile, Uniform };

/// Slots that share attribute values within a panel (RAVEN-style layout
/// components): grids are one component, the paired layouts two.
struct Component {
  int first;
  int count;
};
std::vector<Component> components(TaskConfig config);

RpmProblem generate_problem(TaskConfig config, Rng& rng, RuleSampling sampling = RuleSampling::Profile);

/// Index of the unique choice consistent with the rules on the third row.
/// Throws AmbiguityError when zero or several choices qualify.
int solve_by_rules(const RpmProblem& problem);

inline constexpr int kSlotFeatures = 5 + 6 + 10;
inline constexpr int kMaxSlots = 9;
inline constexpr int kPanelFeatures = kMaxSlots * kSlotFeatures + kConfigCount;  // 196

/// Indices of the non-zero entries of encode_panel, ascending.
std::vector<int> panel_feature_indices(const Panel& panel, TaskConfig config);

template <class Scalar = double>
Eigen::Matrix<Scalar, kPanelFeatures, 1> encode_panel(const Panel& panel, TaskConfig config) {
  Eigen::Matrix<Scalar, kPanelFeatures, 1> x = Eigen::Matrix<Scalar, kPanelFeatures, 1>::Zero();
  for (int idx : panel_feature_indices(panel, config)) x[idx] = Scalar(1);
  return x;
}

/// Disjoint train/test splits, deterministic in `seed`.
std::pair<Dataset, Dataset> generate_dataset(TaskConfig config, int n_train, int n_test, std::uint64_t seed);

// Dataset files: one header record then one record per problem, each a
// single line of JSON.
inline constexpr int kDatasetSchemaVersion = 1;
void write_dataset(std::ostream& out, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
void save_dataset(const std::string& path, const Dataset& dataset);
Dataset load_dataset(const std::string& path);

}  // namespace rpmcl
