#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctxsens/corpus.hpp"
#include "ctxsens/evaluation.hpp"
#include "ctxsens/models.hpp"

namespace ctxsens {

enum class Selection { TeacherTopK, RandomK };
enum class ScoreTransform { Identity, Abs };

std::string_view to_string(Selection selection);
Selection parse_selection(std::string_view text);
std::string_view to_string(ScoreTransform transform);
ScoreTransform parse_score_transform(std::string_view text);

struct AugmentationConfig {
  Selection selection = Selection::TeacherTopK;
  std::size_t k_per_cycle = 1000;
  std::size_t n_cycles = 5;
  bool single_shot = false;  // one cycle of k_per_cycle * n_cycles
  ScoreTransform score_transform = ScoreTransform::Identity;
  Family family = Family::Ridge;  // teacher and student
  TrainConfig train;
  double silver_weight = 1.0;
  LabelRule label_rule = LabelRule::Absolute;
  std::uint64_t seed = 0;  // random_k draws and student seeds

  std::size_t cycles() const { return single_shot ? 1 : n_cycles; }
  std::size_t k() const { return single_shot ? k_per_cycle * n_cycles : k_per_cycle; }
  nlohmann::json to_json() const;
};

struct CycleLog {
  std::size_t repeat = 0;
  std::size_t cycle = 0;  // 1-based
  std::vector<std::string> selected_ids;
  std::vector<double> silver_scores;  // teacher predictions, parallel to selected_ids
  double silver_min = 0.0;
  double silver_mean = 0.0;
  double silver_max = 0.0;
  FoldResult student;  // on the fixed test split
  std::size_t train_size = 0;  // after augmentation
  std::size_t pool_size = 0;   // after removal
  std::string test_fingerprint;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct AugmentationRun {
  FoldResult baseline;  // the initial teacher, trained on gold only
  std::vector<CycleLog> cycles;
};

// The k ids with the largest score; ties by ascending id.
std::vector<std::string> select_top_k(std::span<const std::pair<std::string, double>> scored, std::size_t k);

using CycleCallback = std::function<void(const CycleLog&)>;

// Teacher on gold train; each cycle silver-scores the remaining pool,
// moves k posts into the train set, retrains a student from scratch,
// evaluates it on `gold_test` and promotes it. `on_cycle` runs after every
// cycle so partial logs survive a later failure.
AugmentationRun run_augmentation(std::span<const Example> gold_train, std::span<const Example> gold_validation,
                                 std::span<const Example> gold_test, std::span<const Post> pool,
                                 const AugmentationConfig& config, const CycleCallback& on_cycle = {});

struct AugmentationCvResult {
  std::vector<AugmentationRun> repeats;
  // Index 0 is the gold-only baseline, index c the student after cycle c.
  std::vector<EvalReport> per_cycle;
};

// Runs the loop once per repeat of `split` over `gold` and averages each
// cycle's test metrics across repeats.
AugmentationCvResult run_augmentation_cv(std::span<const Example> gold, std::span<const Post> pool,
                                         const AugmentationConfig& config, const SplitSpec& split,
                                         const CycleCallback& on_cycle = {});

}  // namespace ctxsens
