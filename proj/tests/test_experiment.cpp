#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rpmcl/experiment.hpp"

using namespace rpmcl;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rpmcl_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny(const fs::path& root) {
  ExperimentConfig c;
  c.permutations = {1};
  c.learners = {LearnerKind::FineTuneStream, LearnerKind::PartialReplay, LearnerKind::FineTuneBatch};
  c.policies = {PolicyKind::Random, PolicyKind::MinReplays};
  c.r = 8;
  c.n_train = 30;
  c.n_test = 50;
  c.data_dir = (root / "data").string();
  c.training.epochs = 2;
  c.training.offline_min_epochs = 2;
  c.training.offline_max_epochs = 3;
  c.sweep_policies = {PolicyKind::Random, PolicyKind::MinReplays};
  c.sweep_r = {8, 16};
  c.out_dir = (root / "out").string();
  return c;
}

// Every file below dir except wall-clock timings, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "timing.json")
      files[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return files;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RPMCL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Experiment, DatasetsWrittenDeterministically) {
  const fs::path root = scratch("gen");
  auto c = tiny(root);
  const auto files = generate_datasets(c);
  EXPECT_EQ(files.size(), 14u);
  const auto first = snapshot(c.data_dir);
  generate_datasets(c);
  EXPECT_EQ(snapshot(c.data_dir), first);

  const TaskSuite loaded = load_or_generate_suite(c);
  const TaskSuite fresh = make_suite(c.n_train, c.n_test, c.seeds.dataset);
  for (ConfigKind kind : kAllConfigs)
    for (int i = 0; i < c.n_test; ++i) EXPECT_EQ(loaded[kind].test[i].answer, fresh[kind].test[i].answer);
}

TEST(Experiment, RunArtifactsReportAndHistograms) {
  const fs::path root = scratch("run");
  auto c = tiny(root);
  const TaskSuite suite = load_or_generate_suite(c);
  const auto outcome = run_experiment(c, suite, 2);
  EXPECT_EQ(outcome.failed_runs, 0);
  ASSERT_EQ(outcome.reports.size(), 4u);

  const fs::path perm = fs::path(c.out_dir) / "rep0" / "perm1";
  for (const auto& spec : c.learner_specs()) {
    EXPECT_TRUE(fs::exists(perm / spec.label() / "R.csv")) << spec.label();
    EXPECT_TRUE(fs::exists(perm / spec.label() / "flags.csv"));
    EXPECT_EQ(fs::exists(perm / spec.label() / "buffer.csv"), spec.kind == LearnerKind::PartialReplay);
  }
  EXPECT_TRUE(fs::exists(perm / "offline" / "R.csv"));

  const auto metrics = nlohmann::json::parse(read_file(fs::path(c.out_dir) / "metrics.json"));
  ASSERT_EQ(metrics["learners"].size(), 4u);
  for (const auto& l : metrics["learners"])
    for (const char* key : {"omega", "avg_accuracy", "bwt", "fwt", "final_accuracy"})
      EXPECT_TRUE(l["mean"].contains(key)) << key;

  // The written config reproduces the run.
  const auto reread = load_config((fs::path(c.out_dir) / "config.ini").string());
  EXPECT_EQ(reread, c);

  auto report_cfg = c;
  report_cfg.out_dir = (root / "report").string();
  const auto report = run_report(report_cfg, {c.out_dir});
  EXPECT_EQ(report.table.size(), 4u);
  ASSERT_EQ(report.significance.size(), 2u);
  for (const auto& fam : report.significance) {
    EXPECT_EQ(fam.comparisons.size(), 3u);
    EXPECT_EQ(fam.n_subsets, 300);
  }
  const std::string header = read_file(fs::path(report_cfg.out_dir) / "report.csv");
  EXPECT_EQ(header.substr(0, header.find('\n')), "learner,omega,avg_accuracy,bwt,fwt,final_accuracy,runs");

  auto hist_cfg = c;
  hist_cfg.out_dir = (root / "hist").string();
  const auto hists = run_hist(hist_cfg, c.out_dir);
  EXPECT_EQ(hists.size(), 2u);
  for (const auto& path : hists) {
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    double total = 0.0;
    while (std::getline(in, line)) total += std::stod(line.substr(line.rfind(',') + 1));
    EXPECT_DOUBLE_EQ(total, 7.0 * c.n_train);
  }
  EXPECT_THROW(run_hist(hist_cfg, perm / "fine_tune_stream"), ArtifactError);
}

TEST(Experiment, RerunIsByteIdentical) {
  const fs::path root = scratch("det");
  auto c = tiny(root);
  c.learners = {LearnerKind::PartialReplay, LearnerKind::Ewc};
  const TaskSuite suite = load_or_generate_suite(c);
  run_experiment(c, suite, 1);
  const auto first = snapshot(c.out_dir);
  run_experiment(c, suite, 3);
  EXPECT_EQ(snapshot(c.out_dir), first);
}

TEST(Experiment, SweepGrid) {
  const fs::path root = scratch("sweep");
  auto c = tiny(root);
  const auto sweep = run_sweep(c, load_or_generate_suite(c), 2);
  EXPECT_EQ(sweep.cells.size(), 4u);
  EXPECT_EQ(sweep.failed_runs, 0);
  const std::string table = read_file(fs::path(c.out_dir) / "sweep_table.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "policy,r8,r16");
}

TEST(Experiment, DivergenceLeavesFailureMarker) {
  const fs::path root = scratch("fail");
  auto c = tiny(root);
  c.training.divergence_threshold = 1e-6;
  const auto outcome = run_experiment(c, load_or_generate_suite(c), 1);
  EXPECT_GT(outcome.failed_runs, 0);
  EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "rep0" / "perm1" / "FAILED"));
}

TEST(Experiment, ReportNeedsFlags) {
  const fs::path root = scratch("noflags");
  EXPECT_THROW(run_report(tiny(root), {root}), ArtifactError);
}

TEST(Cli, ExitCodes) {
  const fs::path root = scratch("cli");
  EXPECT_EQ(run_cli("gen --out " + (root / "data").string()), 0);
  EXPECT_EQ(fs::exists(root / "data" / "Center-train.jsonl"), true);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("run --jobs 0"), 2);
  EXPECT_EQ(run_cli("run --config " + (root / "missing.ini").string()), 2);
  std::ofstream(root / "bad.ini") << "[data]\nconfigs = Triangle\n";
  EXPECT_EQ(run_cli("gen --config " + (root / "bad.ini").string()), 2);
  EXPECT_EQ(run_cli("hist --out " + (root / "h").string() + " " + (root / "data").string()), 1);
  EXPECT_EQ(run_cli("--help"), 0);
}
