#pragma once

// Experiment configuration: a sectioned key = value file.
//
//   [experiment]  schema_version, permutations, learners, policies,
//                 balances, r, replicates
//   [data]        n_train, n_test, dir, configs
//   [training]    epochs, batch_size, lr, beta1, beta2, adam_epsilon,
//                 ewc_lambda, distill_lambda, offline_min_epochs,
//                 offline_max_epochs, offline_patience,
//                 validation_fraction, divergence_threshold
//   [seeds]       dataset, init, stream, subset
//   [sweep]       policies, r_values
//   [report]      alpha, n_subsets, variant
//   [output]      dir
//
// Lists are comma separated. Missing keys keep their defaults; unknown
// sections or keys are rejected.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpmcl/continual.hpp"
#include "rpmcl/metrics.hpp"
#include "rpmcl/replay.hpp"
#include "rpmcl/taskgen.hpp"

namespace rpmcl {

inline constexpr int kConfigSchemaVersion = 1;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Seeds {
  std::uint64_t dataset = 1;
  std::uint64_t init = 2;
  std::uint64_t stream = 3;
  std::uint64_t subset = 4;
  friend bool operator==(const Seeds&, const Seeds&) = default;
};

struct ExperimentConfig {
  std::vector<int> permutations = {1, 2, 3};
  std::vector<LearnerKind> learners = {LearnerKind::FineTuneStream, LearnerKind::PartialReplay};
  std::vector<PolicyKind> policies = {PolicyKind::MinReplays};
  std::vector<Balance> balances = {Balance::Unbalanced};
  int r = 32;
  int replicates = 1;

  int n_train = 600;
  int n_test = 200;
  std::string data_dir = "data";
  std::vector<ConfigKind> configs{kAllConfigs.begin(), kAllConfigs.end()};

  TrainingConfig training;
  Seeds seeds;

  std::vector<PolicyKind> sweep_policies{kAllPolicies.begin(), kAllPolicies.end()};
  std::vector<int> sweep_r = {8, 16, 32, 64};

  double alpha = 0.01;
  int n_subsets = 300;
  WelchVariant variant = WelchVariant::TwoSample;

  std::string out_dir = "results";

  /// Learner specs implied by learners x policies x balances.
  std::vector<LearnerSpec> learner_specs() const;
  /// Seeds of replicate k; replicate 0 uses the configured values.
  Seeds replicate_seeds(int k) const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::string& path);
void write_config(std::ostream& out, const ExperimentConfig& config);
std::string to_ini(const ExperimentConfig& config);

/// Throws ConfigError on out-of-range values.
void validate(const ExperimentConfig& config);

/// RPMCL_SEED (all seeds), RPMCL_DATASET_SEED, RPMCL_INIT_SEED,
/// RPMCL_STREAM_SEED, RPMCL_SUBSET_SEED and RPMCL_OUT. Nothing else may be
/// overridden from the environment.
using EnvLookup = std::function<const char*(const char*)>;
void apply_env_overrides(ExperimentConfig& config, const EnvLookup& getenv_fn);

/// Replaces every named seed.
void override_seeds(ExperimentConfig& config, std::uint64_t seed);

/// Switches the training schedule to the CI profile.
void apply_fast_profile(ExperimentConfig& config);

}  // namespace rpmcl
