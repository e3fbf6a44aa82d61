#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace fpvit {

enum class Label { Control = 0, KS = 1, WSS = 2 };

std::string_view to_string(Label label);
Label parse_label(std::string_view text);

/// Binary task. Class index 0 is the first-named class, 1 the second.
enum class Task { ControlVsKS, ControlVsWSS, KSvsWSS };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);
std::array<Label, 2> task_classes(Task task);
/// Class index of label within task, or nullopt when the label is not part of it.
std::optional<int> class_index(Task task, Label label);

struct Record {
  std::string participant_id;
  int finger = 1;
  Label label = Label::Control;
  std::filesystem::path path;
  std::optional<int> quality;
};

/// Participant-keyed image index. Relative record paths resolve against
/// base_dir (the directory holding the manifest file).
struct Manifest {
  std::vector<Record> records;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const Record& r) const {
    return r.path.is_absolute() || base_dir.empty() ? r.path : base_dir / r.path;
  }
};

/// Throws ErrorKind::Invariant on duplicate (participant, finger), finger
/// outside [1, 10], or a participant with more than one label.
void validate_manifest(const Manifest& m);

/// CSV with header `participant_id,finger,label,path[,quality]`. Fields may
/// not contain commas.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

struct SplitPlan {
  Task task = Task::ControlVsKS;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  std::vector<std::string> train_participants;
  std::vector<std::string> test_participants;
  std::vector<std::vector<std::string>> folds;
};

/// Stratified participant-level split: per class, a seeded shuffle sends
/// round(N * test_fraction) participants to test and deals the rest to
/// folds round-robin, continuing the fold counter across classes.
SplitPlan make_split(const Manifest& m, Task task, double test_fraction = 0.2, int n_folds = 5,
                     std::uint64_t seed = 0);

nlohmann::json to_json(const SplitPlan& plan);
SplitPlan split_plan_from_json(const nlohmann::json& j);
void save_split_plan(const SplitPlan& plan, const std::filesystem::path& path);
SplitPlan load_split_plan(const std::filesystem::path& path);

/// Image-level indices into Manifest::records.
struct SplitIndex {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<std::vector<std::size_t>> folds;

  /// Training images of the model that validates on fold k.
  std::vector<std::size_t> fold_train(std::size_t k) const;
};

SplitIndex expand_split(const SplitPlan& plan, const Manifest& m);

/// weight_c = N_total / (2 N_c) over the given task images.
std::array<double, 2> class_weights(const Manifest& m, Task task, std::span<const std::size_t> images);
std::array<double, 2> class_weights(const Manifest& m, Task task);

}  // namespace fpvit
