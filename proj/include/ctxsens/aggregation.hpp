#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxsens/corpus.hpp"

namespace ctxsens {

struct ToxicityScore {
  double value = 0.0;  // fraction of raters judging the post toxic
  int n_raters = 0;
  double sem = 0.0;

  bool operator==(const ToxicityScore&) const = default;
};

// Standard error of a binary rater sample, sqrt(p(1-p)/(n-1)). Zero at
// unanimity and for single raters.
double binary_sem(double fraction, int n_raters);

// Toxic and VeryToxic both count as toxic. Returns nullopt (excluded) when any
// judgment is Unsure. Precondition: judgments nonempty.
std::optional<ToxicityScore> aggregate_score(std::span<const RaterJudgment> judgments);
std::optional<ToxicityScore> aggregate_score(const AnnotationRecord& record);

struct SensitivityRecord {
  std::string post_id;
  ToxicityScore s_oc;
  ToxicityScore s_ic;
  double delta = 0.0;      // s_oc - s_ic
  double threshold = 0.0;  // sem_oc + sem_ic
  bool is_sensitive = false;  // |delta| > threshold

  bool operator==(const SensitivityRecord&) const = default;
};

SensitivityRecord sensitivity(const ToxicityScore& s_oc, const ToxicityScore& s_ic,
                              std::string post_id = {});

struct SensitivityTable {
  std::vector<SensitivityRecord> records;  // bundle post order
  std::vector<std::string> excluded_unsure;
  std::vector<std::string> missing_condition;  // lacks an IC or an OC record
};

SensitivityTable compute_sensitivities(const DatasetBundle& bundle);
// Score-only import (no per-rater codes): n_raters and SEMs are 0, so the
// per-post threshold is 0 and is_sensitive means delta != 0.
SensitivityTable compute_sensitivities(const CccImport& import);

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges; the last bin is closed on the right
  std::vector<std::size_t> counts;

  std::vector<double> centers() const;
};

Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi);
// Deltas binned over [-1, 1].
Histogram sensitivity_histogram(std::span<const SensitivityRecord> records, std::size_t bins);

// |{r : |r.delta| >= t}|
std::size_t count_sensitive(std::span<const SensitivityRecord> records, double t);

struct DeltaSummary {
  std::size_t n = 0;
  std::size_t unchanged = 0;  // delta == 0
  std::size_t positive = 0;   // toxicity decreased once context was shown
  std::size_t negative = 0;
  double fraction_unchanged() const { return n ? double(unchanged) / double(n) : 0.0; }
  double fraction_positive() const { return n ? double(positive) / double(n) : 0.0; }
  double fraction_negative() const { return n ? double(negative) / double(n) : 0.0; }
};

// Deltas within `tolerance` of zero count as unchanged.
DeltaSummary summarize_deltas(std::span<const double> deltas, double tolerance = 1e-12);
DeltaSummary summarize_deltas(std::span<const SensitivityRecord> records, double tolerance = 1e-12);

enum class BinarizeRule { StrictMajority, AtLeastHalf };

// StrictMajority: value > 0.5. AtLeastHalf: value >= 0.5.
bool binarize_toxicity(const ToxicityScore& score, BinarizeRule rule = BinarizeRule::StrictMajority);
bool binarize_toxicity(double value, BinarizeRule rule = BinarizeRule::StrictMajority);

// Fraction of records whose binarized IC and OC labels agree.
double binarized_unchanged_fraction(std::span<const SensitivityRecord> records,
                                    BinarizeRule rule = BinarizeRule::StrictMajority);

struct AgreementReport {
  double free_marginal_kappa = 0.0;
  double mean_pairwise_agreement = 0.0;
  std::size_t n_items = 0;
  int n_categories = 0;
};

// Each item lists the category index chosen by each of its raters (>= 2).
// Randolph's free-marginal kappa with n_categories equiprobable categories.
AgreementReport agreement(std::span<const std::vector<int>> items, int n_categories);

enum class CategoryScheme {
  FourLabel,  // non_toxic / unsure / toxic / very_toxic
  Binary      // toxic (toxic or very_toxic) vs. not toxic
};

AgreementReport agreement(std::span<const AnnotationRecord> records,
                          CategoryScheme scheme = CategoryScheme::FourLabel);

}  // namespace ctxsens
