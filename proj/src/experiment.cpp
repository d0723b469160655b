#include "rpmcl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace rpmcl {
namespace {

using json = nlohmann::ordered_json;

std::mutex log_mutex;

void say(std::ostream* log, const std::string& line) {
  if (!log) return;
  std::lock_guard lock(log_mutex);
  *log << line << std::endl;
}

template <class F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  const std::size_t count = std::min<std::size_t>(std::size_t(jobs), n);
  for (std::size_t w = 0; w < count; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

fs::path dataset_path(const ExperimentConfig& c, ConfigKind kind, Split split) {
  return fs::path(c.data_dir) / (std::string(to_string(kind)) + (split == Split::Train ? "-train" : "-test") + ".jsonl");
}

std::string run_id(int rep, int perm) { return "rep" + std::to_string(rep) + "/perm" + std::to_string(perm); }

json metrics_json(const MetricValues& m) {
  return {{"omega", m.omega},
          {"avg_accuracy", m.avg_accuracy},
          {"bwt", m.bwt},
          {"fwt", m.fwt},
          {"final_accuracy", m.final_accuracy}};
}

json report_json(const MetricsReport& r) {
  json runs = json::array();
  for (std::size_t i = 0; i < r.breakdown.size(); ++i) {
    json entry = {{"run", r.labels[i]}};
    entry.update(metrics_json(r.breakdown[i]));
    runs.push_back(entry);
  }
  return {{"learner", r.learner}, {"mean", metrics_json(r.mean)}, {"runs", runs}};
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string metrics_csv(const std::vector<MetricsReport>& reports) {
  std::string out = "learner,omega,avg_accuracy,bwt,fwt,final_accuracy,runs\n";
  for (const auto& r : reports)
    out += r.learner + "," + fmt(r.mean.omega) + "," + fmt(r.mean.avg_accuracy) + "," + fmt(r.mean.bwt) + "," +
           fmt(r.mean.fwt) + "," + fmt(r.mean.final_accuracy) + "," + std::to_string(r.breakdown.size()) + "\n";
  return out;
}

std::string flags_csv(const std::vector<std::uint8_t>& flags, int n_test_per_task) {
  std::string out = "config,flags\n";
  for (int k = 0; k < kConfigCount; ++k) {
    out += std::string(to_string(kAllConfigs[k])) + ",";
    for (int i = 0; i < n_test_per_task; ++i) out += flags[std::size_t(k * n_test_per_task + i)] ? '1' : '0';
    out += '\n';
  }
  return out;
}

std::vector<std::uint8_t> parse_flags_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "config,flags") throw ArtifactError("flags.csv: bad header");
  std::vector<std::uint8_t> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ArtifactError("flags.csv: bad row");
    for (char ch : line.substr(comma + 1)) {
      if (ch != '0' && ch != '1') throw ArtifactError("flags.csv: flags must be 0 or 1");
      out.push_back(ch == '1');
    }
  }
  return out;
}

/// Schedule, shared base weights and offline reference of one
/// (replicate, permutation) pair.
struct RunSlot {
  int rep = 0;
  int perm = 0;
  Seeds seeds;
  StreamSchedule schedule;
  std::optional<BaseState> base;
  RMatrix R_offline;
  bool failed = false;
};

std::vector<RunSlot> prepare_slots(const ExperimentConfig& config, const TaskSuite& suite, const fs::path& root,
                                int jobs, std::ostream* log) {
  std::vector<RunSlot> slots;
  for (int rep = 0; rep < config.replicates; ++rep)
    for (int perm : config.permutations) {
      RunSlot s;
      s.rep = rep;
      s.perm = perm;
      s.seeds = config.replicate_seeds(rep);
      s.schedule = make_schedule(suite, perm, s.seeds.stream);
      slots.push_back(std::move(s));
    }
  parallel_for(slots.size(), jobs, [&](std::size_t i) {
    RunSlot& s = slots[i];
    const fs::path dir = root / run_id(s.rep, s.perm) / "offline";
    try {
      s.base = base_initialize(s.schedule, config.training, s.seeds.init);
    } catch (const DivergenceError& e) {
      s.failed = true;
      fs::create_directories(dir.parent_path());
      write_file(dir.parent_path() / "FAILED", std::string("base initialization: ") + e.what() + "\n");
      say(log, run_id(s.rep, s.perm) + ": base initialization diverged");
      return;
    }
    const RunResult offline = offline_train(s.schedule, config.training, s.seeds.init, config.seeds.dataset);
    write_run_artifacts(dir, offline, s.schedule);
    s.failed = offline.failed;
    s.R_offline = offline.R;
    say(log, run_id(s.rep, s.perm) + "/offline done" + (offline.failed ? " (FAILED)" : ""));
  });
  return slots;
}

struct RunOutcome {
  RMatrix R;
  bool failed = true;
  double wall_seconds = 0.0;
};

RunOutcome run_one(const RunSlot& slot, const LearnerSpec& spec, const ExperimentConfig& config, const fs::path& root,
                   std::ostream* log) {
  if (slot.failed || !slot.base) return {};
  const RunResult result = run_learner(spec, slot.schedule, *slot.base, config.training, slot.seeds.stream);
  write_run_artifacts(root / run_id(slot.rep, slot.perm) / spec.label(), result, slot.schedule);
  say(log, run_id(slot.rep, slot.perm) + "/" + spec.label() + " done" + (result.failed ? " (FAILED)" : ""));
  return {result.R, result.failed, result.log.wall_seconds};
}

bool complete(const RMatrix& R) { return R.rows() == kConfigCount && R.cols() == kConfigCount; }

}  // namespace

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << content;
  if (!out) throw ArtifactError("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_run_artifacts(const fs::path& dir, const RunResult& result, const StreamSchedule& schedule) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string perm = "perm" + std::to_string(schedule.permutation_id);
  const std::string label = result.learner.label();

  std::ostringstream r_csv;
  write_rmatrix_csv(r_csv, result.R, perm, label);
  write_file(dir / "R.csv", r_csv.str());

  std::string runlog;
  json header = {{"type", "runlog"},
                 {"learner", label},
                 {"permutation", schedule.permutation_id},
                 {"tasks", json::array()},
                 {"updates", result.log.updates},
                 {"stream_length", result.log.stream_length},
                 {"aux_bytes", result.log.aux_bytes},
                 {"failed", result.failed}};
  for (ConfigKind k : schedule.permutation) header["tasks"].push_back(std::string(to_string(k)));
  runlog += header.dump() + "\n";
  for (const auto& rec : result.log.records)
    runlog += json({{"step", rec.step}, {"task", rec.task}, {"loss", rec.loss}, {"event", rec.event}}).dump() + "\n";
  for (std::size_t i = 0; i < result.log.rows.size(); ++i)
    runlog += json({{"event", "eval"}, {"row", i}, {"accuracy", result.log.rows[i].accuracy}}).dump() + "\n";
  write_file(dir / "runlog.jsonl", runlog);

  if (!result.log.rows.empty()) {
    const int n_test = int(result.log.rows.back().flags.front().size());
    write_file(dir / "flags.csv", flags_csv(canonical_final_flags(result.log, schedule), n_test));
  }
  if (result.log.final_buffer) {
    std::ostringstream buf;
    write_buffer_csv(buf, *result.log.final_buffer);
    write_file(dir / "buffer.csv", buf.str());
  }
  write_file(dir / "timing.json", json({{"wall_seconds", result.log.wall_seconds}}).dump() + "\n");
  if (result.failed) write_file(dir / "FAILED", result.error + "\n");
}

std::vector<fs::path> generate_datasets(const ExperimentConfig& config) {
  std::vector<fs::path> written;
  for (ConfigKind kind : config.configs) {
    const auto [train, test] = generate_dataset(TaskConfig{kind}, config.n_train, config.n_test, config.seeds.dataset);
    for (const Dataset* d : {&train, &test}) {
      const fs::path path = dataset_path(config, kind, d->split);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      save_dataset(path.string(), *d);
      written.push_back(path);
    }
  }
  return written;
}

TaskSuite load_or_generate_suite(const ExperimentConfig& config, std::ostream* log) {
  bool all_present = true;
  for (ConfigKind kind : kAllConfigs)
    for (Split split : {Split::Train, Split::Test}) all_present &= fs::exists(dataset_path(config, kind, split));
  if (!all_present) {
    say(log, "datasets not found under " + config.data_dir + "; generating from seed " +
                 std::to_string(config.seeds.dataset));
    return make_suite(config.n_train, config.n_test, config.seeds.dataset);
  }
  std::vector<Dataset> datasets;
  for (ConfigKind kind : kAllConfigs)
    for (Split split : {Split::Train, Split::Test}) datasets.push_back(load_dataset(dataset_path(config, kind, split).string()));
  return make_suite(datasets);
}

ExperimentOutcome run_experiment(const ExperimentConfig& config, const TaskSuite& suite, int jobs, std::ostream* log) {
  validate(config);
  const fs::path root(config.out_dir);
  fs::create_directories(root);
  write_file(root / "config.ini", to_ini(config));

  std::vector<RunSlot> slots = prepare_slots(config, suite, root, jobs, log);
  const std::vector<LearnerSpec> specs = config.learner_specs();

  std::vector<RunOutcome> outcomes(slots.size() * specs.size());
  parallel_for(outcomes.size(), jobs, [&](std::size_t i) {
    outcomes[i] = run_one(slots[i / specs.size()], specs[i % specs.size()], config, root, log);
  });

  ExperimentOutcome result;
  for (const RunSlot& s : slots) result.failed_runs += s.failed;
  for (std::size_t j = 0; j < specs.size(); ++j) {
    std::vector<std::string> labels;
    std::vector<MetricValues> values;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const RunOutcome& o = outcomes[i * specs.size() + j];
      if (o.failed || slots[i].failed || !complete(o.R)) {
        result.failed_runs += !slots[i].failed;
        continue;
      }
      labels.push_back(run_id(slots[i].rep, slots[i].perm));
      values.push_back(compute_metrics(o.R, slots[i].R_offline));
    }
    if (!values.empty()) result.reports.push_back(aggregate_metrics(specs[j].label(), labels, values));
  }

  json doc = {{"schema", 1}, {"type", "metrics"}, {"learners", json::array()}};
  for (const auto& r : result.reports) doc["learners"].push_back(report_json(r));
  write_file(root / "metrics.json", doc.dump(2) + "\n");
  write_file(root / "metrics.csv", metrics_csv(result.reports));
  return result;
}

SweepOutcome run_sweep(const ExperimentConfig& config, const TaskSuite& suite, int jobs, std::ostream* log) {
  validate(config);
  const fs::path root = fs::path(config.out_dir) / "sweep";
  fs::create_directories(root);
  write_file(fs::path(config.out_dir) / "config.ini", to_ini(config));

  std::vector<RunSlot> slots = prepare_slots(config, suite, root, jobs, log);
  std::vector<LearnerSpec> specs;
  for (PolicyKind p : config.sweep_policies)
    for (int r : config.sweep_r) specs.push_back({LearnerKind::PartialReplay, {p, Balance::Unbalanced}, r});

  std::vector<RunOutcome> outcomes(slots.size() * specs.size());
  parallel_for(outcomes.size(), jobs, [&](std::size_t i) {
    outcomes[i] = run_one(slots[i / specs.size()], specs[i % specs.size()], config, root, log);
  });

  SweepOutcome result;
  for (std::size_t j = 0; j < specs.size(); ++j) {
    double omega_sum = 0.0, seconds = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const RunOutcome& o = outcomes[i * specs.size() + j];
      if (o.failed || slots[i].failed || !complete(o.R)) {
        ++result.failed_runs;
        continue;
      }
      omega_sum += omega(o.R, slots[i].R_offline);
      seconds += o.wall_seconds;
      ++n;
    }
    SweepCell cell{specs[j].policy.kind, specs[j].r, n ? omega_sum / n : std::nan(""), n ? seconds / n : 0.0};
    result.cells.push_back(cell);
  }

  std::string long_form = "policy,r,omega\n", timing = "policy,r,mean_wall_seconds\n";
  std::string table = "policy";
  for (int r : config.sweep_r) table += ",r" + std::to_string(r);
  table += "\n";
  for (std::size_t j = 0; j < result.cells.size(); ++j) {
    const SweepCell& c = result.cells[j];
    const std::string policy(to_string(c.policy));
    long_form += policy + "," + std::to_string(c.r) + "," + fmt(c.omega) + "\n";
    timing += policy + "," + std::to_string(c.r) + "," + fmt(c.wall_seconds) + "\n";
    if (j % config.sweep_r.size() == 0) table += policy;
    table += "," + fmt(c.omega);
    if (j % config.sweep_r.size() == config.sweep_r.size() - 1) table += "\n";
  }
  write_file(fs::path(config.out_dir) / "sweep.csv", long_form);
  write_file(fs::path(config.out_dir) / "sweep_table.csv", table);
  write_file(fs::path(config.out_dir) / "sweep_timing.csv", timing);
  return result;
}

std::map<std::string, LoadedLearner> load_results(const std::vector<fs::path>& dirs) {
  std::map<std::string, LoadedLearner> learners;
  for (const fs::path& dir : dirs) {
    if (!fs::is_directory(dir)) throw ArtifactError("not a result directory: " + dir.string());
    // Sorted traversal keeps the run order independent of the filesystem.
    std::vector<fs::path> rep_dirs;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && e.path().filename().string().rfind("rep", 0) == 0) rep_dirs.push_back(e.path());
    std::sort(rep_dirs.begin(), rep_dirs.end());
    for (const fs::path& rep : rep_dirs) {
      std::vector<fs::path> perm_dirs;
      for (const auto& e : fs::directory_iterator(rep))
        if (e.is_directory() && e.path().filename().string().rfind("perm", 0) == 0) perm_dirs.push_back(e.path());
      std::sort(perm_dirs.begin(), perm_dirs.end());
      for (const fs::path& perm : perm_dirs) {
        const std::string id = rep.filename().string() + "/" + perm.filename().string();
        const fs::path offline_dir = perm / "offline";
        std::optional<RMatrix> R_off;
        if (fs::exists(offline_dir / "R.csv") && !fs::exists(offline_dir / "FAILED")) {
          std::istringstream in(read_file(offline_dir / "R.csv"));
          R_off = read_rmatrix_csv(in);
        }
        std::vector<fs::path> runs;
        for (const auto& e : fs::directory_iterator(perm))
          if (e.is_directory() && e.path().filename() != "offline") runs.push_back(e.path());
        std::sort(runs.begin(), runs.end());
        for (const fs::path& run : runs) {
          if (!fs::exists(run / "R.csv")) continue;
          LoadedLearner& l = learners[run.filename().string()];
          l.label = run.filename().string();
          if (fs::exists(run / "FAILED") || !R_off) {
            ++l.failed;
            continue;
          }
          std::istringstream in(read_file(run / "R.csv"));
          RMatrix R = read_rmatrix_csv(in);
          if (!complete(R) || !complete(*R_off)) {
            ++l.failed;
            continue;
          }
          l.run_ids.push_back(id);
          l.R.push_back(std::move(R));
          l.R_offline.push_back(*R_off);
          if (!fs::exists(run / "flags.csv")) throw ArtifactError("missing flags.csv in " + run.string());
          l.flags.push_back(parse_flags_csv(read_file(run / "flags.csv")));
        }
      }
    }
  }
  return learners;
}

ReportOutcome run_report(const ExperimentConfig& config, const std::vector<fs::path>& dirs) {
  const auto learners = load_results(dirs);
  ReportOutcome out;
  std::map<std::string, std::vector<double>> subsets_by_learner;

  std::size_t pool = 0;
  for (const auto& [label, l] : learners)
    if (!l.flags.empty()) pool = l.flags.front().size();
  if (pool == 0) throw ArtifactError("no completed runs with correctness flags found");
  Rng rng(derive_seed(config.seeds.subset, {0x5ab5e7}));
  const auto subsets = partition_subsets(pool, config.n_subsets, rng);

  for (const auto& [label, l] : learners) {
    if (l.R.empty()) continue;
    std::vector<MetricValues> values;
    for (std::size_t i = 0; i < l.R.size(); ++i) values.push_back(compute_metrics(l.R[i], l.R_offline[i]));
    out.table.push_back(aggregate_metrics(label, l.run_ids, values));
    for (const auto& f : l.flags)
      if (f.size() != pool) throw ArtifactError("flag pools differ in size across runs");
    subsets_by_learner[label] = subset_accuracies(l.flags, subsets);
  }
  if (out.table.size() < 2) throw ArtifactError("report needs at least two learners with results");

  for (const auto& [label, ref] : subsets_by_learner) {
    if (label.find("-random-") == std::string::npos && label.find("-min_replays-") == std::string::npos) continue;
    std::vector<std::pair<std::string, std::vector<double>>> others;
    for (const auto& [other, s] : subsets_by_learner)
      if (other != label) others.emplace_back(other, s);
    out.significance.push_back(compare_family("vs " + label, label, ref, others, config.alpha, config.variant));
  }

  const fs::path root(config.out_dir);
  write_file(root / "report.csv", metrics_csv(out.table));
  std::string sig = "family,a,b,mean_a,mean_b,t,df,p,rejected\n";
  json doc = {{"schema", 1}, {"type", "report"}, {"table", json::array()}, {"significance", json::array()}};
  for (const auto& r : out.table) doc["table"].push_back(report_json(r));
  for (const auto& fam : out.significance) {
    json comps = json::array();
    for (const auto& c : fam.comparisons) {
      sig += fam.family + "," + c.a + "," + c.b + "," + fmt(c.mean_a) + "," + fmt(c.mean_b) + "," + fmt(c.test.t) +
             "," + fmt(c.test.df) + "," + fmt(c.test.p) + "," + (c.rejected ? "1" : "0") + "\n";
      comps.push_back({{"a", c.a},
                       {"b", c.b},
                       {"mean_a", c.mean_a},
                       {"mean_b", c.mean_b},
                       {"t", fmt(c.test.t)},
                       {"df", c.test.df},
                       {"p", c.test.p},
                       {"rejected", c.rejected}});
    }
    doc["significance"].push_back(
        {{"family", fam.family}, {"alpha", fam.alpha}, {"n_subsets", fam.n_subsets}, {"comparisons", comps}});
  }
  write_file(root / "significance.csv", sig);
  write_file(root / "report.json", doc.dump(2) + "\n");
  return out;
}

std::vector<fs::path> run_hist(const ExperimentConfig& config, const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw ArtifactError("not a result directory: " + run_dir.string());
  std::map<std::string, std::vector<Histogram>> by_learner;
  std::vector<fs::path> buffers;
  for (const auto& e : fs::recursive_directory_iterator(run_dir))
    if (e.is_regular_file() && e.path().filename() == "buffer.csv") buffers.push_back(e.path());
  std::sort(buffers.begin(), buffers.end());
  for (const fs::path& b : buffers) {
    std::istringstream in(read_file(b));
    const auto entries = read_buffer_csv(in);
    by_learner[b.parent_path().filename().string()].push_back(replay_histogram(entries));
  }
  if (by_learner.empty()) throw ArtifactError("no replay buffer snapshots under " + run_dir.string());

  std::vector<fs::path> written;
  for (const auto& [label, hists] : by_learner) {
    std::ostringstream out;
    write_histogram_csv(out, average_histograms(hists));
    const fs::path path = fs::path(config.out_dir) / "hist" / (label + ".csv");
    write_file(path, out.str());
    written.push_back(path);
  }
  return written;
}

}  // namespace rpmcl
