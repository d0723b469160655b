// rpmcl: dataset generation, continual-learning runs, replay sweeps,
// reports and replay-count histograms.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rpmcl/config.hpp"
#include "rpmcl/experiment.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out;
  bool fast = false;
  std::vector<std::string> result_dirs;
  std::string run_dir;
};

// Precedence: defaults < config file < environment < command line.
rpmcl::ExperimentConfig resolve(const Options& opt) {
  rpmcl::ExperimentConfig config = opt.config_path.empty() ? rpmcl::ExperimentConfig{} : rpmcl::load_config(opt.config_path);
  rpmcl::apply_env_overrides(config, [](const char* name) { return std::getenv(name); });
  if (opt.seed) rpmcl::override_seeds(config, *opt.seed);
  if (!opt.out.empty()) config.out_dir = opt.out;
  if (opt.fast) rpmcl::apply_fast_profile(config);
  rpmcl::validate(config);
  return config;
}

void print_reports(const std::vector<rpmcl::MetricsReport>& reports) {
  std::cout << "learner,omega,avg_accuracy,bwt,fwt,final_accuracy,runs\n";
  for (const auto& r : reports)
    std::cout << r.learner << ',' << r.mean.omega << ',' << r.mean.avg_accuracy << ',' << r.mean.bwt << ','
              << r.mean.fwt << ',' << r.mean.final_accuracy << ',' << r.breakdown.size() << '\n';
}

int cmd_gen(const Options& opt) {
  rpmcl::ExperimentConfig config = resolve(opt);
  // For gen, --out names the dataset directory.
  if (!opt.out.empty()) config.data_dir = opt.out;
  for (const auto& path : rpmcl::generate_datasets(config)) std::cout << path.string() << '\n';
  return 0;
}

int cmd_run(const Options& opt) {
  const rpmcl::ExperimentConfig config = resolve(opt);
  const rpmcl::TaskSuite suite = rpmcl::load_or_generate_suite(config, &std::cerr);
  const auto outcome = rpmcl::run_experiment(config, suite, opt.jobs, &std::cerr);
  print_reports(outcome.reports);
  if (outcome.failed_runs > 0) {
    std::cerr << outcome.failed_runs << " run(s) failed; see FAILED markers under " << config.out_dir << '\n';
    return kExitRuntime;
  }
  return 0;
}

int cmd_sweep(const Options& opt) {
  const rpmcl::ExperimentConfig config = resolve(opt);
  const rpmcl::TaskSuite suite = rpmcl::load_or_generate_suite(config, &std::cerr);
  const auto outcome = rpmcl::run_sweep(config, suite, opt.jobs, &std::cerr);
  std::cout << "policy,r,omega\n";
  for (const auto& c : outcome.cells) std::cout << rpmcl::to_string(c.policy) << ',' << c.r << ',' << c.omega << '\n';
  if (outcome.failed_runs > 0) {
    std::cerr << outcome.failed_runs << " run(s) failed\n";
    return kExitRuntime;
  }
  return 0;
}

int cmd_report(const Options& opt) {
  const rpmcl::ExperimentConfig config = resolve(opt);
  std::vector<rpmcl::fs::path> dirs(opt.result_dirs.begin(), opt.result_dirs.end());
  if (dirs.empty()) dirs.emplace_back(config.out_dir);
  const auto outcome = rpmcl::run_report(config, dirs);
  print_reports(outcome.table);
  std::cout << "\nfamily,a,b,p,rejected\n";
  for (const auto& fam : outcome.significance)
    for (const auto& c : fam.comparisons)
      std::cout << fam.family << ',' << c.a << ',' << c.b << ',' << c.test.p << ',' << (c.rejected ? 1 : 0) << '\n';
  return 0;
}

int cmd_hist(const Options& opt) {
  const rpmcl::ExperimentConfig config = resolve(opt);
  const std::string dir = opt.run_dir.empty() ? config.out_dir : opt.run_dir;
  for (const auto& path : rpmcl::run_hist(config, dir)) std::cout << path.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning with selective replay on symbolic matrix-reasoning tasks"};
  app.require_subcommand(1);
  Options opt;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "Config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "Override every named seed");
    sub->add_option("--jobs", opt.jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_flag("--fast", opt.fast, "Short CI training profile");
  };

  auto* gen = app.add_subcommand("gen", "Write the seven task datasets");
  auto* run = app.add_subcommand("run", "Run the configured learners");
  auto* sweep = app.add_subcommand("sweep", "Replay batch size sweep over all policies");
  auto* report = app.add_subcommand("report", "Aggregate tables and significance tests");
  auto* hist = app.add_subcommand("hist", "Export replay-count histograms");
  for (auto* sub : {gen, run, sweep, report, hist}) common(sub);
  report->add_option("dirs", opt.result_dirs, "Result directories (default: output directory)");
  hist->add_option("run_dir", opt.run_dir, "Result directory (default: output directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(opt);
    if (*run) return cmd_run(opt);
    if (*sweep) return cmd_sweep(opt);
    if (*report) return cmd_report(opt);
    if (*hist) return cmd_hist(opt);
  } catch (const rpmcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
