#include "rpmcl/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace rpmcl {
namespace {

namespace pt = boost::property_tree;

const std::map<std::string, std::set<std::string>> kKnownKeys = {
    {"experiment", {"schema_version", "permutations", "learners", "policies", "balances", "r", "replicates"}},
    {"data", {"n_train", "n_test", "dir", "configs"}},
    {"training",
     {"epochs", "batch_size", "lr", "beta1", "beta2", "adam_epsilon", "ewc_lambda", "distill_lambda",
      "offline_min_epochs", "offline_max_epochs", "offline_patience", "validation_fraction",
      "divergence_threshold"}},
    {"seeds", {"dataset", "init", "stream", "subset"}},
    {"sweep", {"policies", "r_values"}},
    {"report", {"alpha", "n_subsets", "variant"}},
    {"output", {"dir"}},
};

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const std::string s = trim(text);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return value;
}

template <class T, class Parse>
std::vector<T> parse_list(const std::string& key, const std::string& value, Parse parse) {
  std::vector<T> out;
  for (const auto& item : split_list(value)) {
    const auto parsed = parse(item);
    if (!parsed) throw ConfigError("unknown entry in " + key + ": '" + item + "'");
    out.push_back(*parsed);
  }
  if (out.empty()) throw ConfigError(key + " must not be empty");
  return out;
}

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

template <class T, class Name>
std::string join(const std::vector<T>& items, Name name) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + std::string(name(items[i]));
  return out;
}

std::optional<WelchVariant> parse_variant(std::string_view s) {
  if (s == "two_sample") return WelchVariant::TwoSample;
  if (s == "paired_differences") return WelchVariant::PairedDifferences;
  return std::nullopt;
}

std::string_view variant_name(WelchVariant v) {
  return v == WelchVariant::TwoSample ? "two_sample" : "paired_differences";
}

}  // namespace

std::vector<LearnerSpec> ExperimentConfig::learner_specs() const {
  std::vector<LearnerSpec> out;
  for (LearnerKind kind : learners) {
    if (kind == LearnerKind::Offline) continue;  // always run as the reference
    if (kind != LearnerKind::PartialReplay) {
      out.push_back({kind, {}, r});
      continue;
    }
    for (Balance b : balances)
      for (PolicyKind p : policies) out.push_back({kind, {p, b}, r});
  }
  return out;
}

Seeds ExperimentConfig::replicate_seeds(int k) const {
  Seeds s = seeds;
  s.init += std::uint64_t(k);
  s.stream += std::uint64_t(k);
  return s;
}

ExperimentConfig parse_config(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }

  for (const auto& [section, body] : tree) {
    const auto known = kKnownKeys.find(section);
    if (known == kKnownKeys.end()) throw ConfigError("unknown config section [" + section + "]");
    if (body.empty() && !body.data().empty()) throw ConfigError("key outside a section: " + section);
    for (const auto& [key, value] : body)
      if (!known->second.count(key)) throw ConfigError("unknown key " + section + "." + key);
  }

  ExperimentConfig c;
  auto get = [&](const char* path) -> std::optional<std::string> {
    if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(path, '.'))) return trim(*v);
    return std::nullopt;
  };
  auto get_value = [&](const char* path, auto& field) {
    if (auto v = get(path)) field = parse_number<std::remove_reference_t<decltype(field)>>(path, *v);
  };

  if (auto v = get("experiment.schema_version")) {
    if (parse_number<int>("experiment.schema_version", *v) != kConfigSchemaVersion)
      throw ConfigError("unsupported schema_version " + *v);
  }
  if (auto v = get("experiment.permutations")) {
    if (*v == "all") {
      c.permutations = {1, 2, 3};
    } else {
      c.permutations.clear();
      for (const auto& item : split_list(*v)) c.permutations.push_back(parse_number<int>("experiment.permutations", item));
    }
  }
  if (auto v = get("experiment.learners")) c.learners = parse_list<LearnerKind>("experiment.learners", *v, parse_learner_kind);
  if (auto v = get("experiment.policies")) {
    c.policies = *v == "all" ? std::vector<PolicyKind>(kAllPolicies.begin(), kAllPolicies.end())
                             : parse_list<PolicyKind>("experiment.policies", *v, parse_policy_kind);
  }
  if (auto v = get("experiment.balances")) c.balances = parse_list<Balance>("experiment.balances", *v, parse_balance);
  get_value("experiment.r", c.r);
  get_value("experiment.replicates", c.replicates);

  get_value("data.n_train", c.n_train);
  get_value("data.n_test", c.n_test);
  if (auto v = get("data.dir")) c.data_dir = *v;
  if (auto v = get("data.configs")) {
    c.configs = *v == "all" ? std::vector<ConfigKind>(kAllConfigs.begin(), kAllConfigs.end())
                            : parse_list<ConfigKind>("data.configs", *v, parse_config_kind);
  }

  TrainingConfig& t = c.training;
  get_value("training.epochs", t.epochs);
  get_value("training.batch_size", t.batch_size);
  get_value("training.lr", t.adam.lr);
  get_value("training.beta1", t.adam.beta1);
  get_value("training.beta2", t.adam.beta2);
  get_value("training.adam_epsilon", t.adam.epsilon);
  get_value("training.ewc_lambda", t.ewc_lambda);
  get_value("training.distill_lambda", t.distill_lambda);
  get_value("training.offline_min_epochs", t.offline_min_epochs);
  get_value("training.offline_max_epochs", t.offline_max_epochs);
  get_value("training.offline_patience", t.offline_patience);
  get_value("training.validation_fraction", t.validation_fraction);
  get_value("training.divergence_threshold", t.divergence_threshold);

  get_value("seeds.dataset", c.seeds.dataset);
  get_value("seeds.init", c.seeds.init);
  get_value("seeds.stream", c.seeds.stream);
  get_value("seeds.subset", c.seeds.subset);

  if (auto v = get("sweep.policies")) {
    c.sweep_policies = *v == "all" ? std::vector<PolicyKind>(kAllPolicies.begin(), kAllPolicies.end())
                                   : parse_list<PolicyKind>("sweep.policies", *v, parse_policy_kind);
  }
  if (auto v = get("sweep.r_values")) {
    c.sweep_r.clear();
    for (const auto& item : split_list(*v)) c.sweep_r.push_back(parse_number<int>("sweep.r_values", item));
  }

  get_value("report.alpha", c.alpha);
  get_value("report.n_subsets", c.n_subsets);
  if (auto v = get("report.variant")) {
    const auto parsed = parse_variant(*v);
    if (!parsed) throw ConfigError("unknown report.variant '" + *v + "'");
    c.variant = *parsed;
  }
  if (auto v = get("output.dir")) c.out_dir = *v;

  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in);
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(!c.permutations.empty(), "experiment.permutations must not be empty");
  for (int p : c.permutations) require(p >= 1 && p <= 3, "permutations must be 1, 2 or 3");
  require(c.r >= 1, "experiment.r must be positive");
  require(c.replicates >= 1, "experiment.replicates must be positive");
  require(c.n_train > 0 && c.n_test > 0, "data sizes must be positive");
  require(!c.configs.empty(), "data.configs must not be empty");
  const TrainingConfig& t = c.training;
  require(t.epochs >= 1 && t.batch_size >= 1, "training epochs and batch size must be positive");
  require(t.adam.lr > 0 && t.adam.beta1 >= 0 && t.adam.beta1 < 1 && t.adam.beta2 >= 0 && t.adam.beta2 < 1 &&
              t.adam.epsilon > 0,
          "Adam settings out of range");
  require(t.ewc_lambda >= 0 && t.distill_lambda >= 0, "loss weights must be non-negative");
  require(t.offline_min_epochs >= 1 && t.offline_max_epochs >= t.offline_min_epochs && t.offline_patience >= 1,
          "offline epoch bounds out of range");
  require(t.validation_fraction >= 0 && t.validation_fraction < 1, "validation_fraction must be in [0, 1)");
  require(t.divergence_threshold > 0, "divergence_threshold must be positive");
  require(!c.sweep_policies.empty(), "sweep.policies must not be empty");
  require(!c.sweep_r.empty(), "sweep.r_values must not be empty");
  for (int r : c.sweep_r) require(r == 8 || r == 16 || r == 32 || r == 64, "sweep.r_values must be drawn from 8, 16, 32, 64");
  require(c.alpha > 0 && c.alpha < 1, "report.alpha must be in (0, 1)");
  require(c.n_subsets >= 2, "report.n_subsets must be at least 2");
  require(!c.out_dir.empty(), "output.dir must not be empty");
}

void write_config(std::ostream& out, const ExperimentConfig& c) {
  const TrainingConfig& t = c.training;
  auto name = [](auto x) { return to_string(x); };
  out << "[experiment]\n"
      << "schema_version = " << kConfigSchemaVersion << '\n'
      << "permutations = " << join(c.permutations, [](int p) { return std::to_string(p); }) << '\n'
      << "learners = " << join(c.learners, name) << '\n'
      << "policies = " << join(c.policies, name) << '\n'
      << "balances = " << join(c.balances, name) << '\n'
      << "r = " << c.r << '\n'
      << "replicates = " << c.replicates << "\n\n";
  out << "[data]\n"
      << "n_train = " << c.n_train << '\n'
      << "n_test = " << c.n_test << '\n'
      << "dir = " << c.data_dir << '\n'
      << "configs = " << join(c.configs, name) << "\n\n";
  out << "[training]\n"
      << "epochs = " << t.epochs << '\n'
      << "batch_size = " << t.batch_size << '\n'
      << "lr = " << format_double(t.adam.lr) << '\n'
      << "beta1 = " << format_double(t.adam.beta1) << '\n'
      << "beta2 = " << format_double(t.adam.beta2) << '\n'
      << "adam_epsilon = " << format_double(t.adam.epsilon) << '\n'
      << "ewc_lambda = " << format_double(t.ewc_lambda) << '\n'
      << "distill_lambda = " << format_double(t.distill_lambda) << '\n'
      << "offline_min_epochs = " << t.offline_min_epochs << '\n'
      << "offline_max_epochs = " << t.offline_max_epochs << '\n'
      << "offline_patience = " << t.offline_patience << '\n'
      << "validation_fraction = " << format_double(t.validation_fraction) << '\n'
      << "divergence_threshold = " << format_double(t.divergence_threshold) << "\n\n";
  out << "[seeds]\n"
      << "dataset = " << c.seeds.dataset << '\n'
      << "init = " << c.seeds.init << '\n'
      << "stream = " << c.seeds.stream << '\n'
      << "subset = " << c.seeds.subset << "\n\n";
  out << "[sweep]\n"
      << "policies = " << join(c.sweep_policies, name) << '\n'
      << "r_values = " << join(c.sweep_r, [](int r) { return std::to_string(r); }) << "\n\n";
  out << "[report]\n"
      << "alpha = " << format_double(c.alpha) << '\n'
      << "n_subsets = " << c.n_subsets << '\n'
      << "variant = " << variant_name(c.variant) << "\n\n";
  out << "[output]\n"
      << "dir = " << c.out_dir << '\n';
}

std::string to_ini(const ExperimentConfig& config) {
  std::ostringstream out;
  write_config(out, config);
  return out.str();
}

void override_seeds(ExperimentConfig& config, std::uint64_t seed) {
  config.seeds = {seed, seed, seed, seed};
}

void apply_env_overrides(ExperimentConfig& config, const EnvLookup& getenv_fn) {
  auto seed_from = [&](const char* var, std::uint64_t& field) {
    if (const char* v = getenv_fn(var)) field = parse_number<std::uint64_t>(var, v);
  };
  if (const char* v = getenv_fn("RPMCL_SEED")) override_seeds(config, parse_number<std::uint64_t>("RPMCL_SEED", v));
  seed_from("RPMCL_DATASET_SEED", config.seeds.dataset);
  seed_from("RPMCL_INIT_SEED", config.seeds.init);
  seed_from("RPMCL_STREAM_SEED", config.seeds.stream);
  seed_from("RPMCL_SUBSET_SEED", config.seeds.subset);
  if (const char* v = getenv_fn("RPMCL_OUT")) {
    if (!*v) throw ConfigError("RPMCL_OUT must not be empty");
    config.out_dir = v;
  }
}

void apply_fast_profile(ExperimentConfig& config) { config.training = TrainingConfig::fast(); }

}  // namespace rpmcl
