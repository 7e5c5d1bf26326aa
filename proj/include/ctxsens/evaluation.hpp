#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxsens/aggregation.hpp"
#include "ctxsens/corpus.hpp"
#include "ctxsens/models.hpp"
#include "ctxsens/scorer.hpp"

namespace ctxsens {

// Raised when a metric is undefined for its input (one class only, no
// positives, empty or mismatched lists).
class MetricError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

double mse(std::span<const double> pred, std::span<const double> gold);
double mae(std::span<const double> pred, std::span<const double> gold);

// Mann-Whitney: P(score+ > score-) + 0.5 P(tie), via average ranks.
double roc_auc(std::span<const double> scores, const std::vector<bool>& labels);
// Average precision over a descending sweep with tied scores grouped.
double aupr(std::span<const double> scores, const std::vector<bool>& labels);

// How the binary ground truth and the ranking score are derived.
enum class LabelRule {
  Absolute,     // label |delta| > t(p), ranked by |prediction|
  PositiveOnly  // label delta > t(p), ranked by prediction
};

std::string_view to_string(LabelRule rule);
LabelRule parse_label_rule(std::string_view text);

bool sensitivity_label(const SensitivityRecord& record, LabelRule rule);
double ranking_score(double prediction, LabelRule rule);

// One regression example per post with both conditions present; target is
// delta and `sensitive` follows the label rule.
std::vector<Example> make_examples(const DatasetBundle& bundle, const SensitivityTable& table,
                                   LabelRule rule = LabelRule::Absolute);

// Reads an `aggregate` output (sensitivity.jsonl): post_id, target_text,
// parent_text, delta, threshold, is_sensitive.
std::vector<Example> load_sensitivity_examples(const std::filesystem::path& path,
                                               LabelRule rule = LabelRule::Absolute);
std::string sensitivity_to_jsonl(const DatasetBundle& bundle, const SensitivityTable& table);

struct SplitSpec {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
  std::size_t n_repeats = 3;
  std::uint64_t seed = 0;
};

void validate(const SplitSpec& spec);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

// Test and validation sizes are round(n * fraction); train gets the rest.
Split make_split(std::size_t n, const SplitSpec& spec, std::size_t repeat);
std::string split_fingerprint(std::span<const Example> examples, const Split& split);

struct FoldResult {
  std::size_t repeat = 0;
  double mse = 0.0;
  double mae = 0.0;
  std::optional<double> auc;
  std::optional<double> aupr;
  std::string missing_reason;  // set when auc/aupr are undefined on this fold
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
  std::size_t n_test = 0;
  std::string split_fingerprint;
};

struct MetricSummary {
  std::optional<double> mean;  // over folds where the metric is defined
  double sem = 0.0;
  std::size_t n_folds = 0;
};

MetricSummary summarize_metric(std::span<const std::optional<double>> values);

struct EvalReport {
  std::string family;
  std::vector<FoldResult> folds;
  MetricSummary mse, mae, auc, aupr;
  bool has_missing = false;

  std::size_t n_folds() const { return folds.size(); }
  // Fraction-scale values plus a x100 block for comparison with percentages.
  nlohmann::json to_json() const;
  std::string folds_csv() const;
};

EvalReport summarize_folds(std::string family, std::vector<FoldResult> folds);

// Scores `test` with the model and fills the metric fields.
FoldResult evaluate_fold(const RegressorModel& model, std::span<const Example> test,
                         LabelRule rule = LabelRule::Absolute);
FoldResult evaluate_predictions(std::span<const double> predictions, std::span<const Example> test,
                                LabelRule rule = LabelRule::Absolute);

struct CvOptions {
  LabelRule label_rule = LabelRule::Absolute;
  bool parallel = true;  // repeats in parallel (never for External)
};

// Each repeat trains on a fresh split seeded from the split seed and the repeat index; the
// model seed from config.seed and the repeat index.
EvalReport monte_carlo_cv(std::span<const Example> examples, Family family, const TrainConfig& config,
                          const SplitSpec& spec, const CvOptions& options = {});
EvalReport monte_carlo_cv(const DatasetBundle& bundle, Family family, const TrainConfig& config,
                          const SplitSpec& spec, const CvOptions& options = {});

enum class StratifyMode { TargetOnly, ConcatParent };

std::string_view to_string(StratifyMode mode);
StratifyMode parse_stratify_mode(std::string_view text);

struct StratifiedRow {
  double threshold = 0.0;
  std::optional<double> mae;  // null when no scored post reaches the threshold
  std::size_t n = 0;
};

struct ScoringFailure {
  std::string post_id;
  std::string error;
};

struct StratifiedResult {
  std::vector<StratifiedRow> rows;
  std::vector<ScoringFailure> failures;
  std::size_t n_scored = 0;
  bool partial() const { return !failures.empty(); }
};

// MAE of the scorer against s_ic over {p : |delta(p)| >= t} for each t.
StratifiedResult stratified_toxicity_mae(TextScorer& scorer, const DatasetBundle& bundle,
                                         const SensitivityTable& table, std::span<const double> thresholds,
                                         StratifyMode mode);
StratifiedResult stratified_toxicity_mae(TextScorer& scorer, const DatasetBundle& bundle,
                                         std::span<const double> thresholds, StratifyMode mode);

}  // namespace ctxsens
