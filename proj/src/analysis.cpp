#include "ctxsens/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>
#include <unordered_map>

namespace ctxsens {

double class_ratio(std::span<const SensitivityRecord> records) {
  if (records.empty()) throw ValidationError("class_ratio: empty input");
  const auto n = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.is_sensitive; });
  return static_cast<double>(n) / static_cast<double>(records.size());
}

std::optional<bool> parent_helpful_majority(const AnnotationRecord& record) {
  std::size_t yes = 0, voted = 0;
  for (const auto& j : record.judgments) {
    if (!j.parent_helpful) continue;
    ++voted;
    if (*j.parent_helpful) ++yes;
  }
  if (voted == 0) return std::nullopt;
  return 2 * yes > voted;
}

std::vector<ParentUtilityRow> parent_utility(std::span<const AnnotationRecord> ic_records,
                                             std::span<const SensitivityRecord> sensitivity,
                                             std::span<const double> thresholds) {
  std::unordered_map<std::string_view, const AnnotationRecord*> by_id;
  for (const auto& r : ic_records) by_id[r.post_id] = &r;
  std::vector<std::optional<bool>> helpful(sensitivity.size());
  for (std::size_t i = 0; i < sensitivity.size(); ++i) {
    auto it = by_id.find(sensitivity[i].post_id);
    if (it != by_id.end()) helpful[i] = parent_helpful_majority(*it->second);
  }
  std::vector<ParentUtilityRow> rows;
  for (double t : thresholds) {
    ParentUtilityRow row;
    row.threshold = t;
    for (std::size_t i = 0; i < sensitivity.size(); ++i) {
      if (!(std::abs(sensitivity[i].delta) >= t)) continue;
      ++row.n;
      if (!helpful[i]) {
        ++row.n_no_votes;
      } else if (*helpful[i]) {
        ++row.n_helpful;
      }
    }
    if (row.n > 0) row.fraction_helpful = static_cast<double>(row.n_helpful) / static_cast<double>(row.n);
    rows.push_back(row);
  }
  return rows;
}

std::string_view to_string(Direction direction) {
  switch (direction) {
    case Direction::AGreater: return "a_greater";
    case Direction::BGreater: return "b_greater";
    case Direction::TwoSided: return "two_sided";
  }
  return "a_greater";
}

Direction parse_direction(std::string_view text) {
  if (text == "a_greater" || text == "a>b") return Direction::AGreater;
  if (text == "b_greater" || text == "b>a") return Direction::BGreater;
  if (text == "two_sided") return Direction::TwoSided;
  throw ValidationError("unknown direction '" + std::string(text) + "' (a_greater|b_greater|two_sided)");
}

nlohmann::json BootstrapResult::to_json() const {
  return {{"n_resamples", n_resamples},
          {"resample_size", resample_size},
          {"observed_a", observed_a},
          {"observed_b", observed_b},
          {"p_value", p_value},
          {"direction", to_string(direction)},
          {"seed", seed},
          {"with_replacement", with_replacement}};
}

namespace {

std::size_t draw_positives(const std::vector<bool>& group, std::size_t m, bool with_replacement, Rng& rng,
                           std::vector<std::size_t>& scratch) {
  std::size_t pos = 0;
  if (with_replacement) {
    for (std::size_t i = 0; i < m; ++i) pos += group[rng.below(group.size())] ? 1 : 0;
    return pos;
  }
  scratch.resize(group.size());
  std::iota(scratch.begin(), scratch.end(), 0);
  for (std::size_t i = 0; i < m; ++i) {
    std::swap(scratch[i], scratch[i + rng.below(scratch.size() - i)]);
    pos += group[scratch[i]] ? 1 : 0;
  }
  return pos;
}

}  // namespace

BootstrapResult paired_bootstrap(const std::vector<bool>& group_a, const std::vector<bool>& group_b,
                                 const BootstrapOptions& options) {
  if (group_a.empty() || group_b.empty()) throw ValidationError("paired_bootstrap: empty group");
  if (options.n_resamples == 0) throw ValidationError("paired_bootstrap: n_resamples must be >= 1");
  if (options.resample_size == 0 || options.resample_size > group_a.size() ||
      options.resample_size > group_b.size()) {
    throw ValidationError("paired_bootstrap: resample_size must be in [1, min group size]");
  }
  BootstrapResult r;
  r.n_resamples = options.n_resamples;
  r.resample_size = options.resample_size;
  r.direction = options.direction;
  r.seed = options.seed;
  r.with_replacement = options.with_replacement;
  auto proportion = [](const std::vector<bool>& g) {
    return static_cast<double>(std::count(g.begin(), g.end(), true)) / static_cast<double>(g.size());
  };
  r.observed_a = proportion(group_a);
  r.observed_b = proportion(group_b);

  // Per resample: +2 when a wins, +1 on a tie. Equal sample sizes make the
  // positive counts directly comparable.
  std::vector<std::uint8_t> outcome(options.n_resamples);
  const std::size_t workers = std::min<std::size_t>(max_threads(), std::max<std::size_t>(1, options.n_resamples / 256));
  auto work = [&](std::size_t w) {
    std::vector<std::size_t> scratch;
    for (std::size_t i = w; i < options.n_resamples; i += workers) {
      Rng rng(derive_seed(options.seed, i));
      const auto a = draw_positives(group_a, options.resample_size, options.with_replacement, rng, scratch);
      const auto b = draw_positives(group_b, options.resample_size, options.with_replacement, rng, scratch);
      outcome[i] = a > b ? 2 : (a == b ? 1 : 0);
    }
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  std::size_t a_wins = 0, ties = 0;
  for (auto o : outcome) {
    if (o == 2) ++a_wins;
    if (o == 1) ++ties;
  }
  const double n = static_cast<double>(options.n_resamples);
  const double p_a = (n - static_cast<double>(a_wins) - static_cast<double>(ties) + 0.5 * static_cast<double>(ties)) / n;
  const double p_b = (static_cast<double>(a_wins) + 0.5 * static_cast<double>(ties)) / n;
  switch (options.direction) {
    case Direction::AGreater: r.p_value = p_a; break;
    case Direction::BGreater: r.p_value = p_b; break;
    case Direction::TwoSided: r.p_value = std::min(1.0, 2.0 * std::min(p_a, p_b)); break;
  }
  return r;
}

}  // namespace ctxsens
