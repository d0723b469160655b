#pragma once

// Experiment drivers behind the command-line tool. Each writes its
// artifacts under the configured output directory:
//
//   <out>/config.ini
//   <out>/rep<k>/perm<p>/<learner>/R.csv        accuracy matrix
//                                  runlog.jsonl  step/epoch records
//                                  flags.csv     final-row correctness
//                                  buffer.csv    replay buffer (replay runs)
//                                  timing.json   wall clock (not reproducible)
//                                  FAILED        present if the run aborted
//   <out>/metrics.json, metrics.csv
//
// Everything except timing.json is a deterministic function of the config.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpmcl/config.hpp"
#include "rpmcl/continual.hpp"
#include "rpmcl/metrics.hpp"

namespace rpmcl {

namespace fs = std::filesystem;

struct ArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Writes the configured datasets; returns the files written.
std::vector<fs::path> generate_datasets(const ExperimentConfig& config);

/// Loads the datasets from config.data_dir when present, otherwise
/// generates them in memory from the dataset seed.
TaskSuite load_or_generate_suite(const ExperimentConfig& config, std::ostream* log = nullptr);

struct ExperimentOutcome {
  std::vector<MetricsReport> reports;
  int failed_runs = 0;
};

ExperimentOutcome run_experiment(const ExperimentConfig& config, const TaskSuite& suite, int jobs = 1,
                                 std::ostream* log = nullptr);

struct SweepCell {
  PolicyKind policy = PolicyKind::Random;
  int r = 0;
  double omega = 0.0;
  double wall_seconds = 0.0;  // mean per run
};

struct SweepOutcome {
  std::vector<SweepCell> cells;
  int failed_runs = 0;
};

/// Unbalanced partial replay for every sweep policy and r, written under
/// <out>/sweep plus sweep.csv (long form) and sweep_table.csv (policy x r).
SweepOutcome run_sweep(const ExperimentConfig& config, const TaskSuite& suite, int jobs = 1,
                       std::ostream* log = nullptr);

/// One learner's persisted results across replicates and permutations.
struct LoadedLearner {
  std::string label;
  std::vector<std::string> run_ids;  // "rep0/perm1", ...
  std::vector<RMatrix> R;
  std::vector<RMatrix> R_offline;
  std::vector<std::vector<std::uint8_t>> flags;
  int failed = 0;
};

/// Reads every run below one or more result directories. Offline runs are
/// attached to the learners that share their replicate and permutation.
std::map<std::string, LoadedLearner> load_results(const std::vector<fs::path>& dirs);

struct ReportOutcome {
  std::vector<MetricsReport> table;
  std::vector<SignificanceReport> significance;
};

/// Aggregate table and significance families (vs random, vs min_replays)
/// written to <out>/report.csv, significance.csv and report.json.
ReportOutcome run_report(const ExperimentConfig& config, const std::vector<fs::path>& dirs);

/// Replay-count histograms per replay learner, averaged over runs, written
/// to <out>/hist/<learner>.csv. Throws ArtifactError when no snapshot exists.
std::vector<fs::path> run_hist(const ExperimentConfig& config, const fs::path& run_dir);

// Single-run artifact helpers, shared with the tests.
void write_run_artifacts(const fs::path& dir, const RunResult& result, const StreamSchedule& schedule);
void write_file(const fs::path& path, const std::string& content);
std::string read_file(const fs::path& path);

}  // namespace rpmcl
