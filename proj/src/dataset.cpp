#include "fpvit/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fpvit/error.hpp"
#include "fpvit/rng.hpp"

namespace fpvit {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

std::string_view to_string(Label label) {
  switch (label) {
    case Label::Control: return "control";
    case Label::KS: return "ks";
    case Label::WSS: return "wss";
  }
  return "?";
}

Label parse_label(std::string_view text) {
  const std::string s = lower(trim(text));
  if (s == "control") return Label::Control;
  if (s == "ks") return Label::KS;
  if (s == "wss") return Label::WSS;
  throw Error(ErrorKind::Parse, "unknown label '" + std::string(text) + "' (expected control, ks or wss)");
}

std::string_view to_string(Task task) {
  switch (task) {
    case Task::ControlVsKS: return "control-ks";
    case Task::ControlVsWSS: return "control-wss";
    case Task::KSvsWSS: return "ks-wss";
  }
  return "?";
}

Task parse_task(std::string_view text) {
  const std::string s = lower(trim(text));
  if (s == "control-ks") return Task::ControlVsKS;
  if (s == "control-wss") return Task::ControlVsWSS;
  if (s == "ks-wss") return Task::KSvsWSS;
  throw Error(ErrorKind::Parse, "unknown task '" + std::string(text) + "' (expected control-ks, control-wss or ks-wss)");
}

std::array<Label, 2> task_classes(Task task) {
  switch (task) {
    case Task::ControlVsKS: return {Label::Control, Label::KS};
    case Task::ControlVsWSS: return {Label::Control, Label::WSS};
    case Task::KSvsWSS: return {Label::KS, Label::WSS};
  }
  return {Label::Control, Label::KS};
}

std::optional<int> class_index(Task task, Label label) {
  const auto classes = task_classes(task);
  if (label == classes[0]) return 0;
  if (label == classes[1]) return 1;
  return std::nullopt;
}

void validate_manifest(const Manifest& m) {
  std::set<std::pair<std::string, int>> seen;
  std::map<std::string, Label> labels;
  for (const Record& r : m.records) {
    if (r.participant_id.empty()) throw Error(ErrorKind::Invariant, "record with empty participant_id");
    if (r.finger < 1 || r.finger > 10)
      throw Error(ErrorKind::Invariant,
                  "participant " + r.participant_id + ": finger " + std::to_string(r.finger) + " outside [1, 10]");
    if (!seen.emplace(r.participant_id, r.finger).second)
      throw Error(ErrorKind::Invariant, "duplicate record for participant " + r.participant_id + ", finger " +
                                            std::to_string(r.finger));
    const auto [it, inserted] = labels.emplace(r.participant_id, r.label);
    if (!inserted && it->second != r.label)
      throw Error(ErrorKind::Invariant, "participant " + r.participant_id + " has inconsistent labels (" +
                                            std::string(to_string(it->second)) + " and " +
                                            std::string(to_string(r.label)) + ")");
    if (r.quality && (*r.quality < 0 || *r.quality > 100))
      throw Error(ErrorKind::Invariant, "participant " + r.participant_id + ", finger " +
                                            std::to_string(r.finger) + ": quality outside [0, 100]");
  }
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open manifest '" + path.string() + "'");
  Manifest m;
  m.base_dir = path.parent_path();

  std::string line;
  std::size_t line_no = 0;
  bool has_quality = false;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_csv(line);
    if (!header_seen) {
      header_seen = true;
      const std::vector<std::string> base{"participant_id", "finger", "label", "path"};
      if (fields.size() < 4 || !std::equal(base.begin(), base.end(), fields.begin()) ||
          (fields.size() == 5 && fields[4] != "quality") || fields.size() > 5)
        throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) +
                                          ": expected header participant_id,finger,label,path[,quality]");
      has_quality = fields.size() == 5;
      continue;
    }
    const std::size_t expected = has_quality ? 5 : 4;
    if (fields.size() != expected)
      throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                        std::to_string(expected) + " fields, got " + std::to_string(fields.size()));
    Record r;
    r.participant_id = fields[0];
    try {
      std::size_t used = 0;
      r.finger = std::stoi(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("trailing");
      r.label = parse_label(fields[2]);
      r.path = fields[3];
      if (has_quality && !fields[4].empty()) {
        r.quality = std::stoi(fields[4], &used);
        if (used != fields[4].size()) throw std::invalid_argument("trailing");
      }
    } catch (const Error& e) {
      throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception&) {
      throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": malformed integer field");
    }
    m.records.push_back(std::move(r));
  }
  if (!header_seen) throw Error(ErrorKind::Parse, path.string() + ": missing header");
  validate_manifest(m);
  return m;
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest '" + path.string() + "'");
  const bool has_quality =
      std::any_of(m.records.begin(), m.records.end(), [](const Record& r) { return r.quality.has_value(); });
  out << "participant_id,finger,label,path" << (has_quality ? ",quality" : "") << "\n";
  for (const Record& r : m.records) {
    out << r.participant_id << ',' << r.finger << ',' << to_string(r.label) << ',' << r.path.generic_string();
    if (has_quality) {
      out << ',';
      if (r.quality) out << *r.quality;
    }
    out << "\n";
  }
}

SplitPlan make_split(const Manifest& m, Task task, double test_fraction, int n_folds, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw Error(ErrorKind::InvalidArgument, "test_fraction must be in (0, 1)");
  if (n_folds < 1) throw Error(ErrorKind::InvalidArgument, "n_folds must be >= 1");

  // Sorted participant lists per class so the shuffle input is independent
  // of manifest row order.
  const auto classes = task_classes(task);
  std::array<std::set<std::string>, 2> members;
  for (const Record& r : m.records)
    if (auto c = class_index(task, r.label)) members[static_cast<std::size_t>(*c)].insert(r.participant_id);

  for (int c = 0; c < 2; ++c) {
    const std::size_t have = members[c].size();
    if (have < static_cast<std::size_t>(n_folds) + 1)
      throw Error(ErrorKind::InvalidArgument,
                  "class " + std::string(to_string(classes[c])) + " has " + std::to_string(have) +
                      " participants; need at least " + std::to_string(n_folds + 1));
  }

  SplitPlan plan;
  plan.task = task;
  plan.seed = seed;
  plan.test_fraction = test_fraction;
  plan.folds.assign(static_cast<std::size_t>(n_folds), {});

  Rng rng(seed);
  std::size_t fold_cursor = 0;
  for (int c = 0; c < 2; ++c) {
    std::vector<std::string> ids(members[c].begin(), members[c].end());
    rng.shuffle(std::span<std::string>(ids));
    const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(ids.size()) * test_fraction));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i < n_test) {
        plan.test_participants.push_back(ids[i]);
      } else {
        plan.train_participants.push_back(ids[i]);
        plan.folds[fold_cursor % plan.folds.size()].push_back(ids[i]);
        ++fold_cursor;
      }
    }
  }
  return plan;
}

nlohmann::json to_json(const SplitPlan& plan) {
  return {
      {"task", to_string(plan.task)},
      {"seed", plan.seed},
      {"test_fraction", plan.test_fraction},
      {"train_participants", plan.train_participants},
      {"test_participants", plan.test_participants},
      {"folds", plan.folds},
  };
}

SplitPlan split_plan_from_json(const nlohmann::json& j) {
  try {
    SplitPlan plan;
    plan.task = parse_task(j.at("task").get<std::string>());
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.test_fraction = j.at("test_fraction").get<double>();
    plan.train_participants = j.at("train_participants").get<std::vector<std::string>>();
    plan.test_participants = j.at("test_participants").get<std::vector<std::string>>();
    plan.folds = j.at("folds").get<std::vector<std::vector<std::string>>>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("malformed split plan: ") + e.what());
  }
}

void save_split_plan(const SplitPlan& plan, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write split plan '" + path.string() + "'");
  out << to_json(plan).dump(2) << "\n";
}

SplitPlan load_split_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open split plan '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
  }
  return split_plan_from_json(j);
}

std::vector<std::size_t> SplitIndex::fold_train(std::size_t k) const {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (f != k) out.insert(out.end(), folds[f].begin(), folds[f].end());
  std::sort(out.begin(), out.end());
  return out;
}

SplitIndex expand_split(const SplitPlan& plan, const Manifest& m) {
  // Participant -> partition: -1 test, k >= 0 fold k.
  std::map<std::string, int> where;
  for (const auto& p : plan.test_participants) where[p] = -1;
  for (std::size_t k = 0; k < plan.folds.size(); ++k)
    for (const auto& p : plan.folds[k]) where[p] = static_cast<int>(k);
  for (const auto& p : plan.train_participants)
    if (!where.contains(p)) where[p] = -2;  // train without fold (no CV)

  std::set<std::string> known;
  for (const Record& r : m.records) known.insert(r.participant_id);
  for (const auto& [p, _] : where)
    if (!known.contains(p)) throw Error(ErrorKind::InvalidArgument, "split plan names unknown participant '" + p + "'");

  SplitIndex index;
  index.folds.assign(plan.folds.size(), {});
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const Record& r = m.records[i];
    if (!class_index(plan.task, r.label)) continue;
    const auto it = where.find(r.participant_id);
    if (it == where.end()) continue;
    if (it->second == -1) {
      index.test.push_back(i);
    } else {
      index.train.push_back(i);
      if (it->second >= 0) index.folds[static_cast<std::size_t>(it->second)].push_back(i);
    }
  }
  return index;
}

std::array<double, 2> class_weights(const Manifest& m, Task task, std::span<const std::size_t> images) {
  std::array<double, 2> counts{0.0, 0.0};
  for (std::size_t i : images)
    if (auto c = class_index(task, m.records.at(i).label)) counts[static_cast<std::size_t>(*c)] += 1.0;
  if (counts[0] == 0.0 || counts[1] == 0.0)
    throw Error(ErrorKind::InvalidArgument, "class_weights: task '" + std::string(to_string(task)) +
                                                "' has an empty class");
  const double total = counts[0] + counts[1];
  return {total / (2.0 * counts[0]), total / (2.0 * counts[1])};
}

std::array<double, 2> class_weights(const Manifest& m, Task task) {
  std::vector<std::size_t> all(m.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return class_weights(m, task, all);
}

}  // namespace fpvit
