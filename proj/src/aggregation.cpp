#include "ctxsens/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ctxsens {

double binary_sem(double fraction, int n_raters) {
  if (n_raters < 2) return 0.0;
  const double var = fraction * (1.0 - fraction);
  if (var <= 0.0) return 0.0;
  return std::sqrt(var / static_cast<double>(n_raters - 1));
}

std::optional<ToxicityScore> aggregate_score(std::span<const RaterJudgment> judgments) {
  if (judgments.empty()) throw std::invalid_argument("aggregate_score: empty judgment list");
  int toxic = 0;
  for (const auto& j : judgments) {
    if (j.label == Label::Unsure) return std::nullopt;
    if (j.label == Label::Toxic || j.label == Label::VeryToxic) ++toxic;
  }
  ToxicityScore score;
  score.n_raters = static_cast<int>(judgments.size());
  score.value = static_cast<double>(toxic) / static_cast<double>(score.n_raters);
  score.sem = (toxic == 0 || toxic == score.n_raters) ? 0.0 : binary_sem(score.value, score.n_raters);
  return score;
}

std::optional<ToxicityScore> aggregate_score(const AnnotationRecord& record) {
  return aggregate_score(std::span<const RaterJudgment>(record.judgments));
}

SensitivityRecord sensitivity(const ToxicityScore& s_oc, const ToxicityScore& s_ic, std::string post_id) {
  SensitivityRecord r;
  r.post_id = std::move(post_id);
  r.s_oc = s_oc;
  r.s_ic = s_ic;
  r.delta = s_oc.value - s_ic.value;
  r.threshold = s_oc.sem + s_ic.sem;
  r.is_sensitive = std::abs(r.delta) > r.threshold;
  return r;
}

SensitivityTable compute_sensitivities(const DatasetBundle& bundle) {
  SensitivityTable table;
  for (const auto& post : bundle.posts()) {
    const auto* ic = bundle.find_ic(post.post_id);
    const auto* oc = bundle.find_oc(post.post_id);
    if (ic == nullptr || oc == nullptr) {
      table.missing_condition.push_back(post.post_id);
      continue;
    }
    auto s_ic = aggregate_score(*ic);
    auto s_oc = aggregate_score(*oc);
    if (!s_ic || !s_oc) {
      table.excluded_unsure.push_back(post.post_id);
      continue;
    }
    table.records.push_back(sensitivity(*s_oc, *s_ic, post.post_id));
  }
  return table;
}

SensitivityTable compute_sensitivities(const CccImport& import) {
  if (import.has_rater_labels) return compute_sensitivities(import.bundle);
  SensitivityTable table;
  for (std::size_t i = 0; i < import.post_ids.size(); ++i) {
    const double ic = import.ic_scores[i];
    const double oc = import.oc_scores[i];
    if (!(ic >= 0.0 && ic <= 1.0 && oc >= 0.0 && oc <= 1.0)) {
      throw ValidationError("toxicity score outside [0, 1] for post " + import.post_ids[i]);
    }
    table.records.push_back(sensitivity({oc, 0, 0.0}, {ic, 0, 0.0}, import.post_ids[i]));
  }
  return table;
}

std::vector<double> Histogram::centers() const {
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) out.push_back(0.5 * (edges[i] + edges[i + 1]));
  return out;
}

Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins == 0) throw std::invalid_argument("histogram: bins must be >= 1");
  if (!(hi > lo)) throw std::invalid_argument("histogram: empty range");
  Histogram h;
  h.counts.assign(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + width * static_cast<double>(i));
  h.edges.back() = hi;
  for (double v : values) {
    double pos = (v - lo) / (hi - lo) * static_cast<double>(bins);
    auto idx = static_cast<long long>(std::floor(pos));
    idx = std::clamp<long long>(idx, 0, static_cast<long long>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(idx)];
  }
  return h;
}

Histogram sensitivity_histogram(std::span<const SensitivityRecord> records, std::size_t bins) {
  std::vector<double> deltas;
  deltas.reserve(records.size());
  for (const auto& r : records) deltas.push_back(r.delta);
  return histogram(deltas, bins, -1.0, 1.0);
}

std::size_t count_sensitive(std::span<const SensitivityRecord> records, double t) {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                [t](const auto& r) { return std::abs(r.delta) >= t; }));
}

DeltaSummary summarize_deltas(std::span<const double> deltas, double tolerance) {
  DeltaSummary s;
  s.n = deltas.size();
  for (double d : deltas) {
    if (std::abs(d) <= tolerance) {
      ++s.unchanged;
    } else if (d > 0) {
      ++s.positive;
    } else {
      ++s.negative;
    }
  }
  return s;
}

DeltaSummary summarize_deltas(std::span<const SensitivityRecord> records, double tolerance) {
  std::vector<double> deltas;
  deltas.reserve(records.size());
  for (const auto& r : records) deltas.push_back(r.delta);
  return summarize_deltas(deltas, tolerance);
}

bool binarize_toxicity(double value, BinarizeRule rule) {
  return rule == BinarizeRule::StrictMajority ? value > 0.5 : value >= 0.5;
}

bool binarize_toxicity(const ToxicityScore& score, BinarizeRule rule) {
  return binarize_toxicity(score.value, rule);
}

double binarized_unchanged_fraction(std::span<const SensitivityRecord> records, BinarizeRule rule) {
  if (records.empty()) return 0.0;
  std::size_t same = 0;
  for (const auto& r : records) {
    if (binarize_toxicity(r.s_ic, rule) == binarize_toxicity(r.s_oc, rule)) ++same;
  }
  return static_cast<double>(same) / static_cast<double>(records.size());
}

AgreementReport agreement(std::span<const std::vector<int>> items, int n_categories) {
  if (n_categories < 2) throw std::invalid_argument("agreement: need at least 2 categories");
  AgreementReport report;
  report.n_categories = n_categories;
  report.n_items = items.size();
  if (items.empty()) throw std::invalid_argument("agreement: no items");
  std::vector<long long> counts(static_cast<std::size_t>(n_categories));
  double observed_sum = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    if (item.size() < 2) {
      throw ValidationError("agreement: item " + std::to_string(i) + " has fewer than 2 judgments");
    }
    std::fill(counts.begin(), counts.end(), 0);
    for (int c : item) {
      if (c < 0 || c >= n_categories) throw std::invalid_argument("agreement: category out of range");
      ++counts[static_cast<std::size_t>(c)];
    }
    const auto r = static_cast<long long>(item.size());
    long long agreeing_pairs = 0;  // ordered pairs
    for (long long nc : counts) agreeing_pairs += nc * (nc - 1);
    observed_sum += static_cast<double>(agreeing_pairs) / static_cast<double>(r * (r - 1));
  }
  const double observed = observed_sum / static_cast<double>(items.size());
  const double chance = 1.0 / static_cast<double>(n_categories);
  report.mean_pairwise_agreement = observed;
  report.free_marginal_kappa = (observed - chance) / (1.0 - chance);
  return report;
}

AgreementReport agreement(std::span<const AnnotationRecord> records, CategoryScheme scheme) {
  std::vector<std::vector<int>> items;
  items.reserve(records.size());
  for (const auto& rec : records) {
    std::vector<int> item;
    for (const auto& j : rec.judgments) {
      if (scheme == CategoryScheme::FourLabel) {
        item.push_back(static_cast<int>(j.label));
      } else {
        item.push_back(j.label == Label::Toxic || j.label == Label::VeryToxic ? 1 : 0);
      }
    }
    if (item.size() < 2) {
      throw ValidationError("agreement: record for post " + rec.post_id + " has fewer than 2 judgments");
    }
    items.push_back(std::move(item));
  }
  return agreement(items, scheme == CategoryScheme::FourLabel ? 4 : 2);
}

}  // namespace ctxsens
