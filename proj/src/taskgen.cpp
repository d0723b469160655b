#include "rpmcl/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "json.hpp"

namespace rpmcl {


namespace {

constexpr std::array<std::string_view, kConfigCount> kConfigNames = {
    "Center", "TwoByTwoGrid", "ThreeByThreeGrid", "LeftRight", "UpDown", "OutInCenter", "OutInGrid"};
constexpr std::array<std::string_view, kConfigCount> kConfigAliases = {
    "center", "2x2grid", "3x3grid", "left-right", "up-down", "out-in-center", "out-in-grid"};
constexpr std::array<std::string_view, 4> kRuleNames = {"Constant", "Progression", "Arithmetic",
                                                        "DistributeThree"};
constexpr std::array<int, 4> kProgressionSteps = {-2, -1, 1, 2};

constexpr int kMaxDistractorFailures = 100;
constexpr int kMaxProblemRetries = 100;

int wrap(int value, int domain) { return ((value % domain) + domain) % domain; }

// Rule kind and parameter per (configuration, attribute). Every task has
// its own profile, so tasks compete for the same slot features.
struct ProfileEntry {
  RuleKind kind;
  int param;
};
constexpr std::array<std::array<ProfileEntry, kAttributeCount>, kConfigCount> kRuleProfiles = {{
    {{{RuleKind::Constant, 0}, {RuleKind::Progression, 1}, {RuleKind::DistributeThree, 0}}},     // Center
    {{{RuleKind::DistributeThree, 0}, {RuleKind::Constant, 0}, {RuleKind::Progression, -1}}},    // 2x2
    {{{RuleKind::Progression, 2}, {RuleKind::DistributeThree, 0}, {RuleKind::Constant, 0}}},     // 3x3
    {{{RuleKind::DistributeThree, 0}, {RuleKind::Constant, 0}, {RuleKind::Constant, 0}}},        // L-R
    {{{RuleKind::Constant, 0}, {RuleKind::DistributeThree, 0}, {RuleKind::Constant, 0}}},        // U-D
    {{{RuleKind::Constant, 0}, {RuleKind::Progression, -1}, {RuleKind::Constant, 0}}},           // O-IC
    {{{RuleKind::Arithmetic, 1}, {RuleKind::Constant, 0}, {RuleKind::Constant, 0}}},             // O-IG
}};

std::array<std::uint8_t, 3> draw_triple(int domain, Rng& rng) {
  std::vector<std::uint8_t> pool(domain);
  for (int v = 0; v < domain; ++v) pool[v] = static_cast<std::uint8_t>(v);
  std::array<std::uint8_t, 3> triple{};
  for (int i = 0; i < 3; ++i) {
    std::swap(pool[i], pool[i + uniform_index(rng, domain - i)]);
    triple[i] = pool[i];
  }
  return triple;
}

AttributeRule draw_rule(Attribute attribute, TaskConfig config, RuleSampling sampling, Rng& rng) {
  const int a = static_cast<int>(attribute);
  AttributeRule rule;
  if (sampling == RuleSampling::Profile) {
    rule.kind = kRuleProfiles[config.index()][a].kind;
    rule.param = kRuleProfiles[config.index()][a].param;
  } else {
    rule.kind = static_cast<RuleKind>(uniform_index(rng, 4));
    if (rule.kind == RuleKind::Progression) rule.param = kProgressionSteps[uniform_index(rng, kProgressionSteps.size())];
    if (rule.kind == RuleKind::Arithmetic) rule.param = uniform_index(rng, 2) == 0 ? 1 : -1;
  }
  if (rule.kind == RuleKind::DistributeThree) rule.triple = draw_triple(kDomainSize[a], rng);
  return rule;
}

// Three values of one row for one slot attribute.
std::array<int, 3> draw_row(const AttributeRule& rule, int domain, int row, int rotation, Rng& rng) {
  switch (rule.kind) {
    case RuleKind::Constant: {
      const int v = static_cast<int>(uniform_index(rng, domain));
      return {v, v, v};
    }
    case RuleKind::Progression: {
      const int v = static_cast<int>(uniform_index(rng, domain));
      return {v, wrap(v + rule.param, domain), wrap(v + 2 * rule.param, domain)};
    }
    case RuleKind::Arithmetic: {
      const int a = static_cast<int>(uniform_index(rng, domain));
      const int b = static_cast<int>(uniform_index(rng, domain));
      return {a, b, wrap(a + rule.param * b, domain)};
    }
    case RuleKind::DistributeThree: {
      const int shift = rotation + row;
      return {rule.triple[shift % 3], rule.triple[(shift + 1) % 3], rule.triple[(shift + 2) % 3]};
    }
  }
  return {};
}

Panel perturb(const Panel& answer, TaskConfig config, Rng& rng) {
  Panel out = answer;
  const auto comps = components(config);
  const int positions = static_cast<int>(comps.size()) * kAttributeCount;
  const int k = std::min(uniform_int(rng, 1, 3), positions);
  std::vector<int> order(positions);
  for (int i = 0; i < positions; ++i) order[i] = i;
  for (int i = 0; i < k; ++i) {
    std::swap(order[i], order[i + uniform_index(rng, positions - i)]);
    const Component c = comps[order[i] / kAttributeCount];
    const int attr = order[i] % kAttributeCount;
    const int domain = kDomainSize[attr];
    const int value = wrap(answer.slots[c.first].values[attr] + 1 + static_cast<int>(uniform_index(rng, domain - 1)), domain);
    for (int s = c.first; s < c.first + c.count; ++s) out.slots[s].values[attr] = static_cast<std::uint8_t>(value);
  }
  return out;
}

std::optional<RpmProblem> try_generate(TaskConfig config, RuleSampling sampling, Rng& rng) {
  const int slots = config.slot_count();
  RpmProblem problem;
  problem.config = config;
  for (int a = 0; a < kAttributeCount; ++a) problem.rules.per_attribute[a] = draw_rule(static_cast<Attribute>(a), config, sampling, rng);

  std::array<Panel, 9> grid;
  for (auto& panel : grid) panel.slots.resize(slots);
  for (const Component c : components(config)) {
    for (int a = 0; a < kAttributeCount; ++a) {
      const auto& rule = problem.rules.per_attribute[a];
      const int rotation = static_cast<int>(uniform_index(rng, 3));
      for (int row = 0; row < 3; ++row) {
        const auto values = draw_row(rule, kDomainSize[a], row, rotation, rng);
        for (int col = 0; col < 3; ++col)
          for (int s = c.first; s < c.first + c.count; ++s)
            grid[row * 3 + col].slots[s].values[a] = static_cast<std::uint8_t>(values[col]);
      }
    }
  }
  std::copy_n(grid.begin(), kContextPanels, problem.context.begin());
  const Panel& answer = grid[8];

  std::vector<Panel> distractors;
  int failures = 0;
  while (distractors.size() < kChoicePanels - 1) {
    Panel candidate = perturb(answer, config, rng);
    const bool duplicate = candidate == answer ||
                           std::find(distractors.begin(), distractors.end(), candidate) != distractors.end();
    if (!duplicate) {
      distractors.push_back(std::move(candidate));
      failures = 0;
    } else if (++failures >= kMaxDistractorFailures) {
      return std::nullopt;
    }
  }

  problem.answer = static_cast<int>(uniform_index(rng, kChoicePanels));
  for (int k = 0, d = 0; k < kChoicePanels; ++k) {
    problem.choices[k] = k == problem.answer ? answer : distractors[d++];
  }
  return problem;
}

nlohmann::json panel_to_json(const Panel& panel) {
  auto flat = nlohmann::json::array();
  for (const auto& slot : panel.slots)
    for (auto v : slot.values) flat.push_back(static_cast<int>(v));
  return flat;
}

Panel panel_from_json(const nlohmann::json& j, int slot_count) {
  if (!j.is_array() || static_cast<int>(j.size()) != slot_count * kAttributeCount)
    throw FormatError("panel has wrong number of attribute values");
  Panel panel;
  panel.slots.resize(slot_count);
  for (int s = 0; s < slot_count; ++s) {
    for (int a = 0; a < kAttributeCount; ++a) {
      const int v = j[s * kAttributeCount + a].get<int>();
      if (v < 0 || v >= kDomainSize[a]) throw FormatError("attribute value out of domain");
      panel.slots[s].values[a] = static_cast<std::uint8_t>(v);
    }
  }
  return panel;
}

std::string_view split_name(Split split) { return split == Split::Train ? "train" : "test"; }

}  // namespace

std::vector<Component> components(TaskConfig config) {
  switch (config.kind) {
    case ConfigKind::Center: return {{0, 1}};
    case ConfigKind::TwoByTwoGrid: return {{0, 4}};
    case ConfigKind::ThreeByThreeGrid: return {{0, 9}};
    case ConfigKind::LeftRight:
    case ConfigKind::UpDown:
    case ConfigKind::OutInCenter: return {{0, 1}, {1, 1}};
    case ConfigKind::OutInGrid: return {{0, 1}, {1, 4}};
  }
  return {};
}

std::string_view to_string(ConfigKind kind) { return kConfigNames[static_cast<int>(kind)]; }

std::optional<ConfigKind> parse_config_kind(std::string_view name) {
  for (int i = 0; i < kConfigCount; ++i) {
    if (name == kConfigNames[i] || name == kConfigAliases[i]) return static_cast<ConfigKind>(i);
  }
  return std::nullopt;
}

std::string_view to_string(RuleKind kind) { return kRuleNames[static_cast<int>(kind)]; }

std::optional<RuleKind> parse_rule_kind(std::string_view name) {
  for (std::size_t i = 0; i < kRuleNames.size(); ++i)
    if (name == kRuleNames[i]) return static_cast<RuleKind>(i);
  return std::nullopt;
}

int apply_rule(const AttributeRule& rule, int first, int second, int domain_size) {
  switch (rule.kind) {
    case RuleKind::Constant:
      return first;
    case RuleKind::Progression:
      return wrap(second + rule.param, domain_size);
    case RuleKind::Arithmetic:
      return wrap(first + rule.param * second, domain_size);
    case RuleKind::DistributeThree:
      for (int v : rule.triple)
        if (v != first && v != second) return v;
      return first;
  }
  return first;
}

RpmProblem generate_problem(TaskConfig config, Rng& rng, RuleSampling sampling) {
  for (int attempt = 0; attempt < kMaxProblemRetries; ++attempt) {
    if (auto problem = try_generate(config, sampling, rng)) return *std::move(problem);
  }
  throw GenerationError("could not build " + std::to_string(kChoicePanels) + " distinct choices for " +
                        std::string(to_string(config.kind)));
}

int solve_by_rules(const RpmProblem& problem) {
  const Panel& first = problem.context[6];
  const Panel& second = problem.context[7];
  const int slots = problem.config.slot_count();
  int found = -1;
  int matches = 0;
  for (int k = 0; k < kChoicePanels; ++k) {
    const Panel& choice = problem.choices[k];
    if (static_cast<int>(choice.slots.size()) != slots) continue;
    bool ok = true;
    for (int s = 0; s < slots && ok; ++s) {
      for (int a = 0; a < kAttributeCount && ok; ++a) {
        const int expected = apply_rule(problem.rules.per_attribute[a], first.slots[s].values[a],
                                        second.slots[s].values[a], kDomainSize[a]);
        ok = choice.slots[s].values[a] == expected;
      }
    }
    if (ok) {
      found = k;
      ++matches;
    }
  }
  if (matches != 1)
    throw AmbiguityError(std::to_string(matches) + " choices satisfy the rules");
  return found;
}

std::vector<int> panel_feature_indices(const Panel& panel, TaskConfig config) {
  std::vector<int> idx;
  idx.reserve(panel.slots.size() * kAttributeCount + 1);
  for (std::size_t s = 0; s < panel.slots.size(); ++s) {
    const int base = static_cast<int>(s) * kSlotFeatures;
    idx.push_back(base + panel.slots[s].values[0]);
    idx.push_back(base + 5 + panel.slots[s].values[1]);
    idx.push_back(base + 11 + panel.slots[s].values[2]);
  }
  idx.push_back(kMaxSlots * kSlotFeatures + config.index());
  return idx;
}

std::pair<Dataset, Dataset> generate_dataset(TaskConfig config, int n_train, int n_test, std::uint64_t seed) {
  if (n_train <= 0 || n_test <= 0) throw std::invalid_argument("dataset sizes must be positive");
  Dataset train{{}, config, Split::Train, seed};
  Dataset test{{}, config, Split::Test, seed};

  std::set<std::string> seen;
  auto key = [](const RpmProblem& p) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& panel : p.context) j.push_back(panel_to_json(panel));
    for (const auto& panel : p.choices) j.push_back(panel_to_json(panel));
    j.push_back(p.answer);
    return j.dump();
  };

  Rng train_rng(derive_seed(seed, {static_cast<std::uint64_t>(config.index()), 0}));
  train.problems.reserve(n_train);
  while (static_cast<int>(train.problems.size()) < n_train) {
    auto p = generate_problem(config, train_rng);
    if (seen.insert(key(p)).second) train.problems.push_back(std::move(p));
  }
  Rng test_rng(derive_seed(seed, {static_cast<std::uint64_t>(config.index()), 1}));
  test.problems.reserve(n_test);
  while (static_cast<int>(test.problems.size()) < n_test) {
    auto p = generate_problem(config, test_rng);
    if (seen.insert(key(p)).second) test.problems.push_back(std::move(p));
  }
  return {std::move(train), std::move(test)};
}

void write_dataset(std::ostream& out, const Dataset& dataset) {
  nlohmann::ordered_json header;
  header["schema"] = kDatasetSchemaVersion;
  header["type"] = "rpm-dataset";
  header["config"] = to_string(dataset.config.kind);
  header["split"] = split_name(dataset.split);
  header["seed"] = dataset.seed;
  header["count"] = dataset.problems.size();
  out << header.dump() << '\n';
  for (const auto& p : dataset.problems) {
    nlohmann::ordered_json rec;
    rec["config"] = to_string(p.config.kind);
    rec["answer"] = p.answer;
    auto panels = nlohmann::json::array();
    for (const auto& panel : p.context) panels.push_back(panel_to_json(panel));
    for (const auto& panel : p.choices) panels.push_back(panel_to_json(panel));
    rec["panels"] = std::move(panels);
    auto rules = nlohmann::json::array();
    for (const auto& r : p.rules.per_attribute) {
      rules.push_back({to_string(r.kind), r.param, {r.triple[0], r.triple[1], r.triple[2]}});
    }
    rec["rules"] = std::move(rules);
    out << rec.dump() << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty dataset stream");
  Dataset dataset;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("schema").get<int>() != kDatasetSchemaVersion) throw FormatError("unsupported dataset schema");
    const auto kind = parse_config_kind(header.at("config").get<std::string>());
    if (!kind) throw FormatError("unknown config kind in header");
    dataset.config = TaskConfig{*kind};
    const auto split = header.at("split").get<std::string>();
    if (split != "train" && split != "test") throw FormatError("unknown split");
    dataset.split = split == "train" ? Split::Train : Split::Test;
    dataset.seed = header.at("seed").get<std::uint64_t>();
    count = header.at("count").get<std::size_t>();

    dataset.problems.reserve(count);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto rec = nlohmann::json::parse(line);
      RpmProblem p;
      const auto pk = parse_config_kind(rec.at("config").get<std::string>());
      if (!pk) throw FormatError("unknown config kind in record");
      p.config = TaskConfig{*pk};
      p.answer = rec.at("answer").get<int>();
      if (p.answer < 0 || p.answer >= kChoicePanels) throw FormatError("answer index out of range");
      const auto& panels = rec.at("panels");
      if (panels.size() != kContextPanels + kChoicePanels) throw FormatError("record needs 16 panels");
      for (int i = 0; i < kContextPanels; ++i) p.context[i] = panel_from_json(panels[i], p.config.slot_count());
      for (int i = 0; i < kChoicePanels; ++i)
        p.choices[i] = panel_from_json(panels[kContextPanels + i], p.config.slot_count());
      const auto& rules = rec.at("rules");
      if (rules.size() != kAttributeCount) throw FormatError("record needs 3 rules");
      for (int a = 0; a < kAttributeCount; ++a) {
        const auto rk = parse_rule_kind(rules[a].at(0).get<std::string>());
        if (!rk) throw FormatError("unknown rule kind");
        auto& r = p.rules.per_attribute[a];
        r.kind = *rk;
        r.param = rules[a].at(1).get<int>();
        for (int i = 0; i < 3; ++i) r.triple[i] = rules[a].at(2).at(i).get<std::uint8_t>();
      }
      dataset.problems.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed dataset record: ") + e.what());
  }
  if (dataset.problems.size() != count) throw FormatError("dataset record count does not match header");
  return dataset;
}

void save_dataset(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(out, dataset);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_dataset(in);
}

}  // namespace rpmcl
