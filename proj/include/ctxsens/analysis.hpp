#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ctxsens/aggregation.hpp"
#include "ctxsens/corpus.hpp"

namespace ctxsens {

// Fraction of records with is_sensitive. Throws ValidationError when empty.
double class_ratio(std::span<const SensitivityRecord> records);

struct ParentUtilityRow {
  double threshold = 0.0;
  std::optional<double> fraction_helpful;  // null when no post reaches t
  std::size_t n = 0;
  std::size_t n_helpful = 0;
  std::size_t n_no_votes = 0;  // counted as not helpful
};

// For each t, among posts with |delta| >= t, the fraction whose IC raters
// said the parent helped by strict majority of those who voted.
std::vector<ParentUtilityRow> parent_utility(std::span<const AnnotationRecord> ic_records,
                                             std::span<const SensitivityRecord> sensitivity,
                                             std::span<const double> thresholds);

// Whether a strict majority of the raters who voted found the parent
// helpful; nullopt when nobody voted.
std::optional<bool> parent_helpful_majority(const AnnotationRecord& record);

enum class Direction {
  AGreater,  // H1: proportion(a) > proportion(b)
  BGreater,
  TwoSided
};

std::string_view to_string(Direction direction);
Direction parse_direction(std::string_view text);

struct BootstrapOptions {
  std::size_t resample_size = 100;
  std::size_t n_resamples = 1000;
  std::uint64_t seed = 0;
  Direction direction = Direction::AGreater;
  bool with_replacement = true;
};

struct BootstrapResult {
  std::size_t n_resamples = 0;
  std::size_t resample_size = 0;
  double observed_a = 0.0;
  double observed_b = 0.0;
  double p_value = 0.0;
  Direction direction = Direction::AGreater;
  std::uint64_t seed = 0;
  bool with_replacement = true;

  nlohmann::json to_json() const;
};

// Each resample draws resample_size items from each group independently and
// compares the proportions. One-sided p = (#resamples against the
// hypothesis + 0.5 #ties) / n_resamples; two-sided doubles the smaller tail.
BootstrapResult paired_bootstrap(const std::vector<bool>& group_a, const std::vector<bool>& group_b,
                                 const BootstrapOptions& options = {});

}  // namespace ctxsens
